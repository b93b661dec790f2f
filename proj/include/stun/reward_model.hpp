#pragma once

// Underlying reward components of the predator-prey task and the latent
// parameterized mixing that turns them into one scalar reward.

#include <span>
#include <string>
#include <vector>

#include "stun/particle_env.hpp"

namespace stun {

inline constexpr int kMinLatentDim = 2;
inline constexpr int kMaxLatentDim = 6;

enum class MixingKind { Linear, Nonlinear };
enum class NonlinearMode { Softmax, Network };

const char* to_string(MixingKind kind);
const char* to_string(NonlinearMode mode);
MixingKind mixing_kind_from_string(const std::string& s);
NonlinearMode nonlinear_mode_from_string(const std::string& s);

/// Component order: greedy, safety, cost, preference, wide-greedy, wide-safety.
/// The first k are active.
struct RewardConfig {
  int k = 2;
  MixingKind kind = MixingKind::Linear;
  NonlinearMode nonlinear_mode = NonlinearMode::Softmax;
  bool safety_proportional = false;
  double softmax_beta = 1.0;

  void validate() const;
  friend bool operator==(const RewardConfig&, const RewardConfig&) = default;
};

/// Latent reward parameters. Entries lie in [0,1]; Linear parameters also sum
/// to one.
struct LatentParams {
  std::vector<double> values;
  MixingKind kind = MixingKind::Linear;

  LatentParams() = default;
  LatentParams(std::vector<double> v, MixingKind k);

  int dim() const { return static_cast<int>(values.size()); }
  double operator[](std::size_t i) const { return values[i]; }
  friend bool operator==(const LatentParams&, const LatentParams&) = default;
};

/// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::span<const double> v);
/// Projection onto the valid domain of `kind` (simplex, or the unit box).
std::vector<double> project_to_domain(std::span<const double> v, MixingKind kind);

/// Pair weight used by the preference component: 2.0 when both indices are
/// even, 0.5 when both are odd, 1.0 otherwise.
double preference_weight(int prey_index, int other_index);

std::vector<RewardComponents> compute_components(const EnvState& state,
                                                 std::span<const Action> prey_actions,
                                                 const EnvConfig& env_config,
                                                 const RewardConfig& reward_config);

/// Fixed single-hidden-layer mixer whose hidden weights are constant
/// pseudo-random magnitudes scaled column-wise by the latent parameters:
/// out = sum_i v_i * tanh(sum_j U_ij * b_j * c_j).
class MixingNet {
 public:
  explicit MixingNet(std::span<const double> b);
  double operator()(std::span<const double> c) const;
  /// d out / d b at fixed c.
  std::vector<double> grad_b(std::span<const double> c) const;

 private:
  int k_;
  std::vector<double> b_;
};

double mix_linear(const LatentParams& b, std::span<const double> c);
double mix_nonlinear(const LatentParams& b, std::span<const double> c,
                     const RewardConfig& config);
/// Dispatches on b.kind.
double mix(const LatentParams& b, std::span<const double> c, const RewardConfig& config);
/// Gradient of mix with respect to the latent parameters.
std::vector<double> mix_grad_b(std::span<const double> b, std::span<const double> c,
                               const RewardConfig& config);
/// mix() on raw values, skipping LatentParams domain checks.
double mix_raw(std::span<const double> b, std::span<const double> c,
               const RewardConfig& config);

LatentParams sample_latent(int k, MixingKind kind, Rng& rng);

}  // namespace stun
