#pragma once

// Kernel density Bayesian inverse learning: a posterior over latent reward
// parameters given observed (observation, action) pairs, using a dataset of
// demonstrations labelled with the latent parameters that generated them.

#include <cstddef>
#include <deque>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stun/particle_env.hpp"
#include "stun/reward_model.hpp"

namespace stun {

/// (obs, action) as seen by the state-action kernel.
struct ObsAction {
  Observation obs;
  Action action = Action::Stay;
};

struct Demonstration {
  Observation obs;
  Action action = Action::Stay;
  LatentParams latent;
};

struct Bandwidths {
  double h = 0.03;        // state-action kernel
  double h_prime = 0.03;  // reward kernel
  void validate() const;
};

/// Demonstrations plus their cached embedding (obs || one-hot action) and the
/// grouping of demos that share an identical latent vector.
class TrainingDataset {
 public:
  TrainingDataset() = default;
  explicit TrainingDataset(std::vector<Demonstration> demos);

  std::size_t size() const { return demos_.size(); }
  bool empty() const { return demos_.empty(); }
  int obs_dim() const { return obs_dim_; }
  int latent_dim() const { return latent_dim_; }
  MixingKind kind() const { return kind_; }
  const std::vector<Demonstration>& demos() const { return demos_; }

  /// Row j of the m x (obs_dim + 5) embedding matrix.
  std::span<const double> embedding(std::size_t j) const;
  int embedding_dim() const { return obs_dim_ + kNumActions; }

  /// Distinct latent vectors, in first-appearance order, and the demo indices
  /// belonging to each.
  const std::vector<LatentParams>& group_latents() const { return group_latents_; }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }
  std::size_t num_distinct_latents() const { return group_latents_.size(); }

  void save(std::ostream& os) const;
  static TrainingDataset load(std::istream& is);

 private:
  std::vector<Demonstration> demos_;
  std::vector<double> embed_;
  int obs_dim_ = 0;
  int latent_dim_ = 0;
  MixingKind kind_ = MixingKind::Linear;
  std::vector<LatentParams> group_latents_;
  std::vector<std::vector<std::size_t>> groups_;
};

/// Bounded FIFO of observed unknown-agent pairs; the oldest entry is evicted
/// once capacity is reached.
class ObservedWindow {
 public:
  explicit ObservedWindow(std::size_t capacity = 300);
  void push(ObsAction pair);
  void clear() { pairs_.clear(); }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<ObsAction>& pairs() const { return pairs_; }

 private:
  std::size_t capacity_;
  std::deque<ObsAction> pairs_;
};

struct Posterior {
  std::vector<LatentParams> candidates;
  std::vector<double> log_weights;  // normalized: log-sum-exp == 0
  std::vector<double> probabilities;

  std::size_t size() const { return candidates.size(); }
  bool empty() const { return candidates.empty(); }
  double entropy() const;
  /// Builds the normalized view from unnormalized log weights.
  static Posterior from_log_weights(std::vector<LatentParams> candidates,
                                    std::vector<double> unnormalized);
  void write_csv(std::ostream& os) const;
};

/// One log-density value per grid candidate.
using LogPrior = std::vector<double>;
LogPrior uniform_log_prior(std::size_t n);

std::vector<double> one_hot(Action a);

/// Euclidean distance between (obs || one-hot action) embeddings.
double sa_distance(const ObsAction& x, const ObsAction& y);
double sa_distance(std::span<const double> obs_x, Action a_x, std::span<const double> obs_y, Action a_y);

/// Linear: 1 - cos(b1, b2). Nonlinear: ||b1 - b2||.
double reward_distance(std::span<const double> b1, std::span<const double> b2, MixingKind kind);

/// Unnormalized conditional density of one pair given latent b, as a ratio of
/// kernel sums; evaluated in log space.
double conditional_density(const TrainingDataset& ds, const ObsAction& pair,
                           std::span<const double> b, const Bandwidths& bw);
double log_conditional_density(const TrainingDataset& ds, const ObsAction& pair,
                               std::span<const double> b, const Bandwidths& bw);

/// log p(b) + sum over the window of log conditional_density.
double log_posterior(const TrainingDataset& ds, std::span<const ObsAction> window,
                     std::span<const double> b, double prior_log_density, const Bandwidths& bw);
double log_posterior(const TrainingDataset& ds, const ObservedWindow& window,
                     std::span<const double> b, double prior_log_density, const Bandwidths& bw);

enum class KernelBackend { Serial, Parallel };

Posterior posterior_over_grid(const TrainingDataset& ds, std::span<const ObsAction> window,
                              const std::vector<LatentParams>& grid, const LogPrior& prior,
                              const Bandwidths& bw, KernelBackend backend = KernelBackend::Parallel);
Posterior posterior_over_grid(const TrainingDataset& ds, const ObservedWindow& window,
                              const std::vector<LatentParams>& grid, const LogPrior& prior,
                              const Bandwidths& bw, KernelBackend backend = KernelBackend::Parallel);

/// Uniform candidate grid: points of the simplex with coordinates in
/// multiples of 1/resolution (Linear), or the hypercube lattice with
/// `resolution + 1` points per axis (Nonlinear).
std::vector<LatentParams> latent_grid(int k, MixingKind kind, int resolution);
/// Resolution giving roughly `target` candidates (25 for k=2, fewer per axis as k grows).
int default_grid_resolution(int k, MixingKind kind);

}  // namespace stun
