#pragma once

// Window log-likelihood kernels behind posterior_over_grid. The serial path is
// the straight transcription over (candidate, window pair, demo) and is kept
// as the reference the parallel path is tested against.

#include <span>
#include <vector>

#include "stun/kd_bil.hpp"

namespace stun::kernels {

double log_sum_exp(std::span<const double> xs);

/// For every candidate c: sum_i log conditional_density(ds, window[i], c).
std::vector<double> window_log_likelihood_serial(const TrainingDataset& ds,
                                                 std::span<const ObsAction> window,
                                                 const std::vector<LatentParams>& grid,
                                                 const Bandwidths& bw);

/// Same quantity. Demos sharing a latent vector are collapsed into one
/// log-sum-exp term per window pair, and the pair and candidate loops run
/// under OpenMP. Summation order is fixed, so results do not depend on the
/// thread count.
std::vector<double> window_log_likelihood_parallel(const TrainingDataset& ds,
                                                   std::span<const ObsAction> window,
                                                   const std::vector<LatentParams>& grid,
                                                   const Bandwidths& bw);

}  // namespace stun::kernels
