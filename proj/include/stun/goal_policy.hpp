#pragma once

// Goal-conditioned softmax policies pi(a | o, b), REINFORCE pre-training over
// sampled latent styles, and team rollouts that mix STUN agents with
// fixed-style teammates.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stun/particle_env.hpp"
#include "stun/reward_model.hpp"

namespace stun {

enum class PolicyRole : std::uint8_t { Stun = 0, Surrogate = 1, MultiTask = 2 };
const char* to_string(PolicyRole role);

struct PolicyLayout {
  int obs_dim = 0;
  int latent_dim = 2;
  int n_actions = kNumActions;
  int hidden_width = 0;  // 0: logits affine in the features

  /// |o| + k + |o|*k + 1 (constant term).
  int feature_dim() const { return obs_dim + latent_dim + obs_dim * latent_dim + 1; }
  int param_count() const;
  friend bool operator==(const PolicyLayout&, const PolicyLayout&) = default;
};

class GoalConditionedPolicy {
 public:
  GoalConditionedPolicy() = default;
  /// Zero-initialized parameters (uniform action distribution). With a hidden
  /// layer the input weights are drawn N(0, init_std^2) from `init_seed`
  /// (init_std = 0 means 1/sqrt(feature_dim)) and the output weights start at zero.
  GoalConditionedPolicy(PolicyLayout layout, double gamma, PolicyRole role, std::uint64_t init_seed = 0,
                        double init_std = 0.0);

  const PolicyLayout& layout() const { return layout_; }
  double gamma() const { return gamma_; }
  PolicyRole role() const { return role_; }
  std::span<const double> params() const { return theta_; }
  std::span<double> params() { return theta_; }

  /// (o || b || o (x) b || 1).
  std::vector<double> features(std::span<const double> obs, std::span<const double> b) const;
  std::vector<double> logits(std::span<const double> obs, std::span<const double> b) const;
  std::vector<double> probabilities(std::span<const double> obs, std::span<const double> b) const;
  /// Gradient of log pi(a | o, b) with respect to the parameters.
  std::vector<double> grad_log_prob(std::span<const double> obs, std::span<const double> b, int action) const;
  /// Gradient of the action-distribution entropy with respect to the parameters.
  std::vector<double> grad_entropy(std::span<const double> obs, std::span<const double> b) const;
  /// Chain rule from a gradient with respect to the logits to the parameters.
  std::vector<double> backprop_logits(std::span<const double> obs, std::span<const double> b,
                                      std::span<const double> d_logits) const;

  int act_index(std::span<const double> obs, std::span<const double> b, Rng& rng, bool greedy = false) const;
  Action act(std::span<const double> obs, std::span<const double> b, Rng& rng, bool greedy = false) const;

  void save(std::ostream& os) const;
  static GoalConditionedPolicy load(std::istream& is);
  friend bool operator==(const GoalConditionedPolicy&, const GoalConditionedPolicy&) = default;

 private:
  void check_dims(std::span<const double> obs, std::span<const double> b) const;
  std::vector<double> hidden(std::span<const double> phi) const;

  PolicyLayout layout_;
  double gamma_ = 0.95;
  PolicyRole role_ = PolicyRole::Stun;
  std::vector<double> theta_;
};

/// A policy whose conditioning vector is frozen at construction.
class FixedBehaviorPolicy {
 public:
  FixedBehaviorPolicy(const GoalConditionedPolicy& policy, LatentParams style, std::string name = {});
  const GoalConditionedPolicy& policy() const { return *policy_; }
  const LatentParams& style() const { return style_; }
  const std::string& name() const { return name_; }
  Action act(std::span<const double> obs, Rng& rng, bool greedy = false) const {
    return policy_->act(obs, style_.values, rng, greedy);
  }

 private:
  const GoalConditionedPolicy* policy_;
  LatentParams style_;
  std::string name_;
};

/// Named styles from safest to greediest. Linear styles put weight t on the
/// greedy component and 1 - t on safety (t = 0, .25, .5, .75, 1); for k > 2
/// each extra component receives a fixed 0.1 share before renormalizing.
const std::vector<std::string>& style_names();
LatentParams style_latent(const std::string& name, int k, MixingKind kind);

struct Trajectory {
  std::vector<Observation> obs;
  std::vector<int> actions;
  std::vector<double> rewards;
  LatentParams latent;  // conditioning vector used while acting
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;
  bool empty() const { return trajectories.empty(); }
};

/// Discounted returns-to-go of one trajectory.
std::vector<double> returns_to_go(const Trajectory& t, double gamma);

/// State-value estimate V(o, b, tau) used as a REINFORCE baseline, where tau
/// is the fraction of the episode still to play. One tanh hidden layer over
/// (o || b || tau), linear output.
class ValueBaseline {
 public:
  ValueBaseline() = default;
  ValueBaseline(int obs_dim, int latent_dim, int hidden_width, std::uint64_t init_seed, double init_std = 1.0);

  bool empty() const { return w_.empty(); }
  double value(std::span<const double> obs, std::span<const double> b, double tau) const;
  /// `steps` full-batch Adam steps on the mean squared error to the discounted
  /// returns-to-go of `batch`. Returns the loss before the first step.
  double fit(const RolloutBatch& batch, double gamma, double learning_rate, int steps = 1);
  std::span<const double> params() const { return w_; }

 private:
  int in_ = 0;
  int hidden_ = 0;
  std::vector<double> w_;  // W1[H x in], c1[H], w2[H], c2
  std::vector<double> m_, v_;
  long long t_ = 0;
};

struct GradientDiagnostics {
  std::vector<double> gradient;
  double grad_norm = 0.0;
  double mean_return = 0.0;
};

/// REINFORCE estimate: mean over trajectories of sum_t (G_t - b_t) grad log pi,
/// where b_t is the mean of G_t at time index t over the other trajectories in
/// the batch (0 for a batch of one), so the estimate stays unbiased. With a
/// `critic`, G_t - b_t is replaced by the generalized advantage
/// sum_l (gamma lambda)^l delta_{t+l} with delta_t = r_t + gamma V_{t+1} - V_t and
/// V = 0 past the last step; lambda = 1 is G_t - V_t exactly. The critic must
/// not have been fitted on this batch. A positive `entropy_coef` adds
/// entropy_coef * sum_t grad H(pi(.|o_t, b)) per trajectory.
GradientDiagnostics estimate_policy_gradient(const GoalConditionedPolicy& policy, const RolloutBatch& batch,
                                             double entropy_coef = 0.0, const ValueBaseline* critic = nullptr,
                                             double gae_lambda = 1.0);

/// theta <- theta + lr * g. Throws std::runtime_error on a non-finite gradient.
GradientDiagnostics policy_gradient_step(GoalConditionedPolicy& policy, const RolloutBatch& batch,
                                         double learning_rate, double entropy_coef = 0.0);

/// Adam moment estimates for ascent on a policy-gradient estimate.
struct AdamState {
  std::vector<double> m, v;
  long long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// theta <- theta + lr * m_hat / (sqrt(v_hat) + eps).
  void ascend(std::span<double> theta, std::span<const double> g, double lr);
};

// ---------------------------------------------------------------------------
// Team rollouts

/// Who controls one prey and with what conditioning vector.
struct PreyController {
  const GoalConditionedPolicy* policy = nullptr;
  LatentParams condition;
  bool greedy = false;
};

struct EpisodeRecord {
  std::vector<Trajectory> trajectories;      // one per prey
  std::vector<double> component_sums;        // summed over prey and steps
  double team_return = 0.0;                  // undiscounted, scored under the scoring latent
  std::vector<std::vector<RewardComponents>> step_components;  // [step][prey]
};

/// Plays one episode of `episode_length` steps. Each prey's reward is the
/// team reward (sum of mixed rewards over prey) when `shared_reward`, its own
/// mixed reward otherwise.
EpisodeRecord run_episode(const EnvConfig& env, const RewardConfig& reward,
                          std::span<const PreyController> controllers, const LatentParams& score_latent,
                          int episode_length, bool shared_reward, Rng& rng);

struct MarlConfig {
  int episodes = 20000;
  double learning_rate = 0.001;
  double gamma = 0.95;
  int batch_episodes = 8;
  int train_episode_length = 25;
  int n_unknown = 1;
  int hidden_width = 0;
  double hidden_init_std = 0.0;  // 0: 1/sqrt(feature_dim)
  bool shared_reward = true;
  bool per_agent_params = false;
  bool train_multitask = true;
  double max_grad_norm = 0.0;  // 0 disables clipping
  double entropy_coef = 0.0;
  std::string optimizer = "sgd";  // "sgd" (plain ascent) or "adam"
  std::string baseline = "batch";  // "batch" (leave-one-out mean) or "critic" (learned ValueBaseline)
  int critic_hidden = 64;
  double critic_learning_rate = 0.003;
  int critic_steps = 4;
  double gae_lambda = 1.0;

  void validate(const EnvConfig& env) const;
};

struct PretrainResult {
  std::vector<GoalConditionedPolicy> stun;  // one shared, or one per STUN agent
  std::vector<GoalConditionedPolicy> surrogate;
  GoalConditionedPolicy multitask;          // conditioned on the prior mean only
  std::vector<double> return_history;       // mean team return per update batch
};

/// Each episode samples a latent style from the prior, rolls out STUN and
/// surrogate prey conditioned on it, and accumulates REINFORCE batches that
/// update every role. `progress` is called after each update when set.
PretrainResult pretrain(const EnvConfig& env, const RewardConfig& reward, const MarlConfig& marl, Rng& rng,
                        const std::function<void(int episode, double mean_return)>& progress = {});

struct TeamEvaluation {
  double mean_return = 0.0;
  double std_return = 0.0;
  std::vector<double> episode_returns;
  std::vector<double> component_means;  // per episode, summed over prey
};

/// Unknown agents occupy prey indices [0, unknown.size()); the remaining prey
/// are STUN agents conditioned on `b_condition`. Returns are scored under
/// `b_true`. `stun` holds one shared policy or one per STUN agent.
TeamEvaluation evaluate_team(std::span<const GoalConditionedPolicy> stun,
                             std::span<const FixedBehaviorPolicy> unknown, const LatentParams& b_condition,
                             const LatentParams& b_true, int episodes, Rng& rng, const EnvConfig& env,
                             const RewardConfig& reward);

/// Prior mean of sample_latent: the uniform vector (1/k each) for Linear,
/// 0.5 each for Nonlinear.
LatentParams prior_mean_latent(int k, MixingKind kind);

}  // namespace stun
