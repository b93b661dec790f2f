#pragma once

// Point estimates of the latent parameters from a grid posterior, and a small
// residual regressor trained to remove the reward bias of the posterior mean.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "stun/kd_bil.hpp"
#include "stun/reward_model.hpp"

namespace stun {

/// Highest-probability candidate; the lowest index wins ties.
LatentParams map_estimate(const Posterior& p);
/// Probability-weighted candidate mean, projected back onto the domain.
LatentParams posterior_mean(const Posterior& p);
/// Per-dimension posterior mean followed by per-dimension standard deviation.
std::vector<double> posterior_summary(const Posterior& p);

struct DebiasPair {
  std::vector<double> summary;  // posterior_summary of an inference run
  LatentParams truth;
};

struct DebiaserConfig {
  int epochs = 400;
  double learning_rate = 0.01;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// g(s) = mean(s) + W2 tanh(W1 s + c1) + c2 with 4k hidden units. W2 and c2
/// start at zero, so a fresh debiaser returns the posterior mean.
class Debiaser {
 public:
  Debiaser() = default;
  Debiaser(int k, MixingKind kind, std::uint64_t seed);

  int k() const { return k_; }
  MixingKind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  int hidden_width() const { return 4 * k_; }

  /// Unprojected output; used by training.
  std::vector<double> forward_raw(std::span<const double> summary) const;
  /// Output projected onto the valid latent domain.
  LatentParams operator()(std::span<const double> summary) const;

  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }
  const std::vector<double>& train_history() const { return train_loss_; }
  const std::vector<double>& holdout_history() const { return holdout_loss_; }

  void save(std::ostream& os) const;
  static Debiaser load(std::istream& is);

 private:
  friend Debiaser train_debiaser(const std::vector<DebiasPair>&, const std::vector<RewardComponents>&,
                                 const RewardConfig&, const DebiaserConfig&);
  // Parameter layout: W1 (h x 2k), c1 (h), W2 (k x h), c2 (k).
  std::size_t off_c1() const { return static_cast<std::size_t>(hidden_width()) * 2 * k_; }
  std::size_t off_w2() const { return off_c1() + hidden_width(); }
  std::size_t off_c2() const { return off_w2() + static_cast<std::size_t>(k_) * hidden_width(); }

  int k_ = 0;
  MixingKind kind_ = MixingKind::Linear;
  std::uint64_t seed_ = 0;
  std::vector<double> params_;
  std::vector<double> train_loss_;
  std::vector<double> holdout_loss_;
};

/// Mean over pairs and probe component vectors of
/// (mix(g(summary), c) - mix(truth, c))^2.
double debias_loss(const Debiaser& d, std::span<const DebiasPair> pairs, const std::vector<RewardComponents>& probes,
                   const RewardConfig& reward);

/// Full-batch Adam on the loss above, keeping the parameters with the lowest
/// holdout loss, then an exact Gauss-Newton solve for the output offset c2 on
/// all pairs. Needs at least 100 pairs; deterministic for a given seed.
Debiaser train_debiaser(const std::vector<DebiasPair>& pairs, const std::vector<RewardComponents>& probes,
                        const RewardConfig& reward, const DebiaserConfig& config);

LatentParams debias(const Debiaser& d, const Posterior& p);

struct EstimatorReport {
  LatentParams map;
  LatentParams mean;
  std::optional<LatentParams> debiased;
  double entropy = 0.0;
};

EstimatorReport summarize(const Posterior& p, const Debiaser* debiaser = nullptr);

}  // namespace stun
