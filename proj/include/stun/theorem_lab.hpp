#pragma once

// Tabular Q-learning on small random MDPs with exact, zero-mean-noise, or
// constant-offset rewards, checked against dynamic-programming oracles.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <utility>
#include <vector>

namespace stun::lab {

using Rng = std::mt19937_64;

struct FiniteMDP {
  int n_states = 0;
  int n_actions = 0;
  std::vector<double> P;  // P[(s * A + a) * S + s2]
  std::vector<double> R;  // R[s * A + a]
  double gamma = 0.9;

  double prob(int s, int a, int s2) const { return P[(static_cast<std::size_t>(s) * n_actions + a) * n_states + s2]; }
  double reward(int s, int a) const { return R[static_cast<std::size_t>(s) * n_actions + a]; }
  /// Throws std::invalid_argument on bad sizes, non-stochastic rows, gamma outside (0, 1) or non-finite rewards.
  void validate() const;
};

/// Transition rows are normalized uniform draws, rewards uniform on [0, 1].
FiniteMDP random_mdp(int n_states, int n_actions, double gamma, std::uint64_t seed);

using QTable = std::vector<double>;  // [s * A + a]

double sup_norm_gap(const QTable& a, const QTable& b);

struct ValueIterationResult {
  QTable q;
  int iterations = 0;
  std::vector<double> iterate_changes;  // ||Q_{t+1} - Q_t||_inf per iteration
};

/// Bellman optimality iteration from Q = 0 until the change drops below tolerance.
ValueIterationResult value_iteration(const FiniteMDP& mdp, double tolerance = 1e-12, int max_iterations = 1000000);

/// Exact policy evaluation by linear solve plus greedy improvement until the
/// policy is stable; returns the optimal Q.
QTable policy_iteration(const FiniteMDP& mdp);

enum class ChannelMode { Exact, UnbiasedNoise, Biased };

struct RewardChannel {
  ChannelMode mode = ChannelMode::Exact;
  double half_width = 1.0;  // UnbiasedNoise: reward + U(-w, w)
  double beta = 0.0;        // Biased: reward + beta

  static RewardChannel exact() { return {}; }
  static RewardChannel unbiased(double half_width) { return {ChannelMode::UnbiasedNoise, half_width, 0.0}; }
  static RewardChannel biased(double beta) { return {ChannelMode::Biased, 0.0, beta}; }
  void validate() const;
  double sample(double reward, Rng& rng) const;
};

/// alpha = 1 / (1 + n)^omega where n counts earlier updates of the pair.
/// omega in (0.5, 1] makes the step sizes sum to infinity while their squares
/// sum to a finite value (p-series).
class LearningSchedule {
 public:
  explicit LearningSchedule(double omega = 0.7);
  double omega() const { return omega_; }
  double alpha(long long visits) const;

 private:
  double omega_;
};

struct QLearningConfig {
  long long steps = 1000000;
  double epsilon = 0.2;
  long long trace_every = 1000;
  int start_state = 0;
};

struct QLearningResult {
  QTable q;
  std::vector<long long> visits;
  std::vector<std::pair<long long, double>> trace;  // (step, ||Q - Q*||_inf), filled when an oracle is given
};

/// One behaviour trajectory of epsilon-greedy Q-learning:
/// Q(s,a) <- (1 - alpha) Q(s,a) + alpha (r~ + gamma max_a' Q(s',a')).
QLearningResult q_learning_run(const FiniteMDP& mdp, const RewardChannel& channel, const LearningSchedule& schedule,
                               const QLearningConfig& config, Rng& rng, const QTable* q_star = nullptr);

struct BiasGapRow {
  double beta = 0.0;
  std::uint64_t seed = 0;
  long long steps = 0;
  double gap = 0.0;  // final ||Q - Q*||_inf
};

/// Every (beta, seed) cell runs independently; rows come back in beta-major order.
std::vector<BiasGapRow> bias_gap_experiment(const FiniteMDP& mdp, const std::vector<double>& betas, long long steps,
                                            const std::vector<std::uint64_t>& seeds,
                                            const LearningSchedule& schedule = LearningSchedule(),
                                            double epsilon = 0.2);

/// Mean gap per beta, in the order the betas first appear.
std::vector<std::pair<double, double>> mean_gap_by_beta(const std::vector<BiasGapRow>& rows);

void write_bias_gap_csv(std::ostream& os, const std::vector<BiasGapRow>& rows);

}  // namespace stun::lab
