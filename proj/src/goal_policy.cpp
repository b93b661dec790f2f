#include "stun/goal_policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "stun/binary_io.hpp"

namespace stun {

const char* to_string(PolicyRole role) {
  switch (role) {
    case PolicyRole::Stun: return "stun";
    case PolicyRole::Surrogate: return "surrogate";
    case PolicyRole::MultiTask: return "multitask";
  }
  return "?";
}

int PolicyLayout::param_count() const {
  const int f = feature_dim();
  if (hidden_width == 0) return n_actions * f;
  return hidden_width * f + n_actions * hidden_width + n_actions;
}

GoalConditionedPolicy::GoalConditionedPolicy(PolicyLayout layout, double gamma, PolicyRole role,
                                             std::uint64_t init_seed, double init_std)
    : layout_(layout), gamma_(gamma), role_(role) {
  if (layout_.obs_dim <= 0 || layout_.latent_dim < 1 || layout_.n_actions < 2 || layout_.hidden_width < 0) {
    throw std::invalid_argument("GoalConditionedPolicy: invalid layout");
  }
  if (!(gamma_ > 0.0 && gamma_ <= 1.0)) throw std::invalid_argument("GoalConditionedPolicy: gamma must lie in (0, 1]");
  theta_.assign(layout_.param_count(), 0.0);
  if (!(init_std >= 0.0)) throw std::invalid_argument("GoalConditionedPolicy: init_std must be non-negative");
  if (layout_.hidden_width > 0) {
    Rng rng(init_seed);
    const double scale = init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(layout_.feature_dim()));
    std::normal_distribution<double> n01(0.0, scale);
    const int w1 = layout_.hidden_width * layout_.feature_dim();
    for (int i = 0; i < w1; ++i) theta_[i] = n01(rng);
  }
}

void GoalConditionedPolicy::check_dims(std::span<const double> obs, std::span<const double> b) const {
  if (static_cast<int>(obs.size()) != layout_.obs_dim || static_cast<int>(b.size()) != layout_.latent_dim) {
    throw std::invalid_argument("GoalConditionedPolicy: observation or latent dimension mismatch");
  }
}

std::vector<double> GoalConditionedPolicy::features(std::span<const double> obs, std::span<const double> b) const {
  check_dims(obs, b);
  std::vector<double> phi;
  phi.reserve(layout_.feature_dim());
  phi.insert(phi.end(), obs.begin(), obs.end());
  phi.insert(phi.end(), b.begin(), b.end());
  for (double o : obs) {
    for (double bj : b) phi.push_back(o * bj);
  }
  phi.push_back(1.0);
  return phi;
}

std::vector<double> GoalConditionedPolicy::hidden(std::span<const double> phi) const {
  const int f = layout_.feature_dim();
  std::vector<double> h(layout_.hidden_width);
  for (int u = 0; u < layout_.hidden_width; ++u) {
    const double* w = theta_.data() + u * f;
    h[u] = std::tanh(std::inner_product(phi.begin(), phi.end(), w, 0.0));
  }
  return h;
}

std::vector<double> GoalConditionedPolicy::logits(std::span<const double> obs, std::span<const double> b) const {
  const auto phi = features(obs, b);
  const int a_count = layout_.n_actions;
  const int f = layout_.feature_dim();
  std::vector<double> z(a_count, 0.0);
  if (layout_.hidden_width == 0) {
    for (int a = 0; a < a_count; ++a) z[a] = std::inner_product(phi.begin(), phi.end(), theta_.data() + a * f, 0.0);
    return z;
  }
  const int hw = layout_.hidden_width;
  const auto h = hidden(phi);
  const double* w2 = theta_.data() + hw * f;
  const double* c2 = w2 + a_count * hw;
  for (int a = 0; a < a_count; ++a) z[a] = std::inner_product(h.begin(), h.end(), w2 + a * hw, c2[a]);
  return z;
}

std::vector<double> GoalConditionedPolicy::probabilities(std::span<const double> obs,
                                                         std::span<const double> b) const {
  auto z = logits(obs, b);
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : z) v /= s;
  return z;
}

std::vector<double> GoalConditionedPolicy::grad_log_prob(std::span<const double> obs, std::span<const double> b,
                                                         int action) const {
  if (action < 0 || action >= layout_.n_actions) throw std::out_of_range("grad_log_prob: action index");
  auto delta = probabilities(obs, b);
  for (double& p : delta) p = -p;
  delta[action] += 1.0;
  return backprop_logits(obs, b, delta);
}

std::vector<double> GoalConditionedPolicy::grad_entropy(std::span<const double> obs, std::span<const double> b) const {
  auto p = probabilities(obs, b);
  double h = 0.0;
  for (double q : p) h -= q * std::log(q);
  for (double& q : p) q = -q * (std::log(q) + h);
  return backprop_logits(obs, b, p);
}

std::vector<double> GoalConditionedPolicy::backprop_logits(std::span<const double> obs, std::span<const double> b,
                                                           std::span<const double> delta) const {
  if (static_cast<int>(delta.size()) != layout_.n_actions) throw std::invalid_argument("backprop_logits: size");
  const auto phi = features(obs, b);
  const int a_count = layout_.n_actions;
  const int f = layout_.feature_dim();
  std::vector<double> g(theta_.size(), 0.0);
  if (layout_.hidden_width == 0) {
    for (int a = 0; a < a_count; ++a) {
      for (int i = 0; i < f; ++i) g[a * f + i] = delta[a] * phi[i];
    }
    return g;
  }
  const int hw = layout_.hidden_width;
  const auto h = hidden(phi);
  const double* w2 = theta_.data() + hw * f;
  double* g_w2 = g.data() + hw * f;
  double* g_c2 = g_w2 + a_count * hw;
  std::vector<double> dh(hw, 0.0);
  for (int a = 0; a < a_count; ++a) {
    for (int u = 0; u < hw; ++u) {
      g_w2[a * hw + u] = delta[a] * h[u];
      dh[u] += delta[a] * w2[a * hw + u];
    }
    g_c2[a] = delta[a];
  }
  for (int u = 0; u < hw; ++u) {
    const double dpre = dh[u] * (1.0 - h[u] * h[u]);
    for (int i = 0; i < f; ++i) g[u * f + i] = dpre * phi[i];
  }
  return g;
}

int GoalConditionedPolicy::act_index(std::span<const double> obs, std::span<const double> b, Rng& rng,
                                     bool greedy) const {
  const auto p = probabilities(obs, b);
  if (greedy) return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double c = 0.0;
  for (int a = 0; a < static_cast<int>(p.size()); ++a) {
    c += p[a];
    if (u < c) return a;
  }
  return static_cast<int>(p.size()) - 1;
}

Action GoalConditionedPolicy::act(std::span<const double> obs, std::span<const double> b, Rng& rng,
                                  bool greedy) const {
  if (layout_.n_actions != kNumActions) throw std::logic_error("act: policy does not use the movement action set");
  return static_cast<Action>(act_index(obs, b, rng, greedy));
}

namespace {
constexpr char kPolicyMagic[5] = "GCPL";
constexpr std::uint32_t kPolicyVersion = 1;
}  // namespace

void GoalConditionedPolicy::save(std::ostream& os) const {
  bin::write_header(os, kPolicyMagic, kPolicyVersion);
  bin::write<std::int32_t>(os, layout_.obs_dim);
  bin::write<std::int32_t>(os, layout_.latent_dim);
  bin::write<std::int32_t>(os, layout_.n_actions);
  bin::write<std::int32_t>(os, layout_.hidden_width);
  bin::write<double>(os, gamma_);
  bin::write<std::uint8_t>(os, static_cast<std::uint8_t>(role_));
  bin::write_vec(os, theta_);
}

GoalConditionedPolicy GoalConditionedPolicy::load(std::istream& is) {
  bin::read_header(is, kPolicyMagic, kPolicyVersion);
  PolicyLayout layout;
  layout.obs_dim = bin::read<std::int32_t>(is);
  layout.latent_dim = bin::read<std::int32_t>(is);
  layout.n_actions = bin::read<std::int32_t>(is);
  layout.hidden_width = bin::read<std::int32_t>(is);
  const auto gamma = bin::read<double>(is);
  const auto role = bin::read<std::uint8_t>(is);
  if (role > 2) throw std::runtime_error("corrupt GCPL artifact (role)");
  GoalConditionedPolicy p(layout, gamma, static_cast<PolicyRole>(role));
  auto theta = bin::read_vec<double>(is);
  if (theta.size() != p.theta_.size()) throw std::runtime_error("corrupt GCPL artifact (parameter count)");
  p.theta_ = std::move(theta);
  return p;
}

FixedBehaviorPolicy::FixedBehaviorPolicy(const GoalConditionedPolicy& policy, LatentParams style, std::string name)
    : policy_(&policy), style_(std::move(style)), name_(std::move(name)) {
  if (style_.dim() != policy.layout().latent_dim) {
    throw std::invalid_argument("FixedBehaviorPolicy: style dimension differs from the policy's");
  }
}

const std::vector<std::string>& style_names() {
  static const std::vector<std::string> names = {"safest", "safety-biased", "balanced", "greed-biased",
                                                 "greediest"};
  return names;
}

LatentParams style_latent(const std::string& name, int k, MixingKind kind) {
  const auto& names = style_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::invalid_argument("unknown style '" + name + "'");
  if (k < kMinLatentDim || k > kMaxLatentDim) throw std::invalid_argument("style_latent: unsupported k");
  const double t = 0.25 * static_cast<double>(it - names.begin());
  std::vector<double> v(k, 0.1);
  const double rest = kind == MixingKind::Linear ? 1.0 - 0.1 * (k - 2) : 1.0;
  v[0] = t * rest;
  v[1] = (1.0 - t) * rest;
  if (kind == MixingKind::Linear) v = project_to_simplex(v);
  return LatentParams(std::move(v), kind);
}

LatentParams prior_mean_latent(int k, MixingKind kind) {
  return LatentParams(std::vector<double>(k, kind == MixingKind::Linear ? 1.0 / k : 0.5), kind);
}

std::vector<double> returns_to_go(const Trajectory& t, double gamma) {
  std::vector<double> g(t.rewards.size());
  double acc = 0.0;
  for (std::size_t i = t.rewards.size(); i-- > 0;) {
    acc = t.rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

ValueBaseline::ValueBaseline(int obs_dim, int latent_dim, int hidden_width, std::uint64_t init_seed,
                             double init_std)
    : in_(obs_dim + latent_dim + 1), hidden_(hidden_width) {
  if (obs_dim <= 0 || latent_dim < 1 || hidden_width < 1 || !(init_std > 0.0)) {
    throw std::invalid_argument("ValueBaseline: bad dimensions or init scale");
  }
  w_.assign(static_cast<std::size_t>(hidden_) * (in_ + 2) + 1, 0.0);
  Rng rng(init_seed);
  std::normal_distribution<double> n01(0.0, init_std);
  for (int i = 0; i < hidden_ * in_; ++i) w_[i] = n01(rng);
}

double ValueBaseline::value(std::span<const double> obs, std::span<const double> b, double tau) const {
  if (static_cast<int>(obs.size() + b.size()) + 1 != in_) throw std::invalid_argument("ValueBaseline: input size");
  const double* c1 = w_.data() + hidden_ * in_;
  const double* w2 = c1 + hidden_;
  double out = w2[hidden_];
  for (int u = 0; u < hidden_; ++u) {
    const double* row = w_.data() + u * in_;
    double z = c1[u] + row[in_ - 1] * tau;
    for (std::size_t i = 0; i < obs.size(); ++i) z += row[i] * obs[i];
    for (std::size_t i = 0; i < b.size(); ++i) z += row[obs.size() + i] * b[i];
    out += w2[u] * std::tanh(z);
  }
  return out;
}

double ValueBaseline::fit(const RolloutBatch& batch, double gamma, double learning_rate, int steps) {
  if (empty()) throw std::logic_error("ValueBaseline: not initialized");
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const auto& t : batch.trajectories) {
    const auto g = returns_to_go(t, gamma);
    const double len = static_cast<double>(t.rewards.size());
    for (std::size_t s = 0; s < g.size(); ++s) {
      std::vector<double> row(t.obs[s].begin(), t.obs[s].end());
      row.insert(row.end(), t.latent.values.begin(), t.latent.values.end());
      row.push_back((len - static_cast<double>(s)) / len);
      if (static_cast<int>(row.size()) != in_) throw std::invalid_argument("ValueBaseline: input size");
      x.push_back(std::move(row));
      y.push_back(g[s]);
    }
  }
  if (y.empty()) return 0.0;
  if (m_.empty()) {
    m_.assign(w_.size(), 0.0);
    v_.assign(w_.size(), 0.0);
  }
  const double n = static_cast<double>(y.size());
  double first_loss = 0.0;
  std::vector<double> grad(w_.size()), h(hidden_);
  for (int it = 0; it < steps; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    const double* c1 = w_.data() + hidden_ * in_;
    const double* w2 = c1 + hidden_;
    for (std::size_t r = 0; r < y.size(); ++r) {
      double out = w2[hidden_];
      for (int u = 0; u < hidden_; ++u) {
        h[u] = std::tanh(std::inner_product(x[r].begin(), x[r].end(), w_.begin() + u * in_, c1[u]));
        out += w2[u] * h[u];
      }
      const double e = out - y[r];
      loss += e * e / n;
      const double de = 2.0 * e / n;
      grad[w_.size() - 1] += de;
      for (int u = 0; u < hidden_; ++u) {
        grad[hidden_ * in_ + hidden_ + u] += de * h[u];
        const double dz = de * w2[u] * (1.0 - h[u] * h[u]);
        grad[hidden_ * in_ + u] += dz;
        for (int i = 0; i < in_; ++i) grad[u * in_ + i] += dz * x[r][i];
      }
    }
    if (it == 0) first_loss = loss;
    if (!std::isfinite(loss)) throw std::runtime_error("ValueBaseline: loss diverged");
    // Adam descent
    ++t_;
    const double k1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
    const double k2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    for (std::size_t p = 0; p < w_.size(); ++p) {
      m_[p] = 0.9 * m_[p] + 0.1 * grad[p];
      v_[p] = 0.999 * v_[p] + 0.001 * grad[p] * grad[p];
      w_[p] -= learning_rate * (m_[p] / k1) / (std::sqrt(v_[p] / k2) + 1e-8);
    }
  }
  return first_loss;
}

GradientDiagnostics estimate_policy_gradient(const GoalConditionedPolicy& policy, const RolloutBatch& batch,
                                             double entropy_coef, const ValueBaseline* critic, double gae_lambda) {
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("policy gradient: lambda outside [0, 1]");
  if (batch.empty()) throw std::invalid_argument("policy gradient: empty rollout batch");
  const std::size_t nt = batch.trajectories.size();
  std::vector<std::vector<double>> rtg(nt);
  std::size_t horizon = 0;
  for (std::size_t i = 0; i < nt; ++i) {
    const auto& t = batch.trajectories[i];
    if (t.obs.size() != t.actions.size() || t.actions.size() != t.rewards.size()) {
      throw std::invalid_argument("policy gradient: ragged trajectory");
    }
    rtg[i] = returns_to_go(t, policy.gamma());
    horizon = std::max(horizon, t.rewards.size());
  }
  // Returns are centred on the first trajectory's before summing so that a
  // batch of equal returns gives exactly zero advantage.
  std::vector<double> ref(horizon, 0.0), sums(horizon, 0.0);
  std::vector<int> counts(horizon, 0);
  for (const auto& g : rtg) {
    for (std::size_t s = 0; s < g.size(); ++s) {
      if (counts[s] == 0) ref[s] = g[s];
      sums[s] += g[s] - ref[s];
      ++counts[s];
    }
  }

  GradientDiagnostics d;
  d.gradient.assign(policy.params().size(), 0.0);
  double ret = 0.0;
  std::vector<double> gae;
  for (std::size_t i = 0; i < nt; ++i) {
    const auto& t = batch.trajectories[i];
    ret += std::accumulate(t.rewards.begin(), t.rewards.end(), 0.0);
    if (critic) {
      const std::size_t len = t.rewards.size();
      std::vector<double> v(len + 1, 0.0);
      for (std::size_t s = 0; s < len; ++s) {
        v[s] = critic->value(t.obs[s], t.latent.values, static_cast<double>(len - s) / static_cast<double>(len));
      }
      gae.assign(len, 0.0);
      double acc = 0.0;
      for (std::size_t s = len; s-- > 0;) {
        acc = t.rewards[s] + policy.gamma() * v[s + 1] - v[s] + policy.gamma() * gae_lambda * acc;
        gae[s] = acc;
      }
    }
    for (std::size_t s = 0; s < t.actions.size(); ++s) {
      // Leave-one-out mean keeps the baseline independent of this trajectory.
      const double own = rtg[i][s] - ref[s];
      double adv = counts[s] > 1 ? own - (sums[s] - own) / (counts[s] - 1) : rtg[i][s];
      if (critic) adv = gae[s];
      if (adv == 0.0 && entropy_coef == 0.0) continue;
      if (t.actions[s] < 0 || t.actions[s] >= policy.layout().n_actions) {
        throw std::out_of_range("policy gradient: action index");
      }
      // Logit-space gradient of adv * log pi(a) + c * H.
      auto dz = policy.probabilities(t.obs[s], t.latent.values);
      double h = 0.0;
      for (double q : dz) h -= q * std::log(q);
      for (std::size_t a = 0; a < dz.size(); ++a) {
        const double q = dz[a];
        dz[a] = adv * ((static_cast<int>(a) == t.actions[s] ? 1.0 : 0.0) - q) -
                entropy_coef * q * (std::log(q) + h);
      }
      const auto gl = policy.backprop_logits(t.obs[s], t.latent.values, dz);
      for (std::size_t p = 0; p < gl.size(); ++p) d.gradient[p] += gl[p];
    }
  }
  double sq = 0.0;
  for (double& g : d.gradient) {
    g /= static_cast<double>(nt);
    sq += g * g;
  }
  d.grad_norm = std::sqrt(sq);
  d.mean_return = ret / static_cast<double>(nt);
  return d;
}

GradientDiagnostics policy_gradient_step(GoalConditionedPolicy& policy, const RolloutBatch& batch,
                                         double learning_rate, double entropy_coef) {
  auto d = estimate_policy_gradient(policy, batch, entropy_coef);
  if (!std::isfinite(d.grad_norm) || !std::isfinite(d.mean_return)) {
    throw std::runtime_error("policy gradient: non-finite gradient (norm " + std::to_string(d.grad_norm) +
                             ", mean return " + std::to_string(d.mean_return) + ")");
  }
  auto theta = policy.params();
  for (std::size_t p = 0; p < theta.size(); ++p) theta[p] += learning_rate * d.gradient[p];
  return d;
}

EpisodeRecord run_episode(const EnvConfig& env, const RewardConfig& reward,
                          std::span<const PreyController> controllers, const LatentParams& score_latent,
                          int episode_length, bool shared_reward, Rng& rng) {
  if (static_cast<int>(controllers.size()) != env.n_prey) {
    throw std::invalid_argument("run_episode: need one controller per prey");
  }
  if (score_latent.dim() != reward.k) throw std::invalid_argument("run_episode: scoring latent dimension != k");
  EnvConfig cfg = env;
  cfg.episode_length = episode_length;
  EnvState state = reset(cfg, rng);

  const int n = env.n_prey;
  EpisodeRecord rec;
  rec.trajectories.resize(n);
  rec.component_sums.assign(reward.k, 0.0);
  for (int i = 0; i < n; ++i) {
    rec.trajectories[i].latent = controllers[i].condition;
    rec.trajectories[i].obs.reserve(episode_length);
  }
  std::vector<Action> actions(n);
  std::vector<double> mixed(n);
  bool done = false;
  while (!done) {
    for (int i = 0; i < n; ++i) {
      auto o = observe(state, i, cfg);
      const auto& c = controllers[i];
      const int a = c.policy->act_index(o, c.condition.values, rng, c.greedy);
      actions[i] = static_cast<Action>(a);
      rec.trajectories[i].obs.push_back(std::move(o));
      rec.trajectories[i].actions.push_back(a);
    }
    auto r = step(state, actions, cfg, reward);
    double team = 0.0;
    for (int i = 0; i < n; ++i) {
      mixed[i] = mix(score_latent, r.components[i], reward);
      team += mixed[i];
      for (int c = 0; c < reward.k; ++c) rec.component_sums[c] += r.components[i][c];
    }
    for (int i = 0; i < n; ++i) rec.trajectories[i].rewards.push_back(shared_reward ? team : mixed[i]);
    rec.team_return += team;
    rec.step_components.push_back(std::move(r.components));
    state = std::move(r.next);
    done = r.done;
  }
  return rec;
}

void MarlConfig::validate(const EnvConfig& env) const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("MarlConfig: " + m); };
  if (episodes < 0) fail("episodes must be non-negative");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be non-negative");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (batch_episodes < 1) fail("batch_episodes must be at least 1");
  if (train_episode_length < 1) fail("train_episode_length must be at least 1");
  if (n_unknown < 1 || n_unknown >= env.n_prey) fail("n_unknown must lie in [1, n_prey)");
  if (hidden_width < 0) fail("hidden_width must be non-negative");
  if (!(hidden_init_std >= 0.0)) fail("hidden_init_std must be non-negative");
  if (!(entropy_coef >= 0.0)) fail("entropy_coef must be non-negative");
  if (optimizer != "sgd" && optimizer != "adam") fail("optimizer must be 'sgd' or 'adam'");
  if (baseline != "batch" && baseline != "critic") fail("baseline must be 'batch' or 'critic'");
  if (critic_hidden < 1 || critic_steps < 1 || !(critic_learning_rate > 0.0)) fail("bad critic settings");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must lie in [0, 1]");
}

void AdamState::ascend(std::span<double> theta, std::span<const double> g, double lr) {
  if (g.size() != theta.size()) throw std::invalid_argument("AdamState: gradient size");
  if (m.empty()) {
    m.assign(theta.size(), 0.0);
    v.assign(theta.size(), 0.0);
  }
  if (m.size() != theta.size()) throw std::invalid_argument("AdamState: parameter count changed");
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    theta[i] += lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

namespace {

void update_batches(std::vector<GoalConditionedPolicy>& policies, std::vector<RolloutBatch>& batches,
                    std::vector<AdamState>& adam, std::vector<ValueBaseline>& critics, const MarlConfig& marl) {
  for (std::size_t p = 0; p < policies.size(); ++p) {
    if (batches[p].empty()) continue;
    const ValueBaseline* critic = critics.empty() ? nullptr : &critics[p];
    if (critic || marl.max_grad_norm > 0.0 || marl.optimizer == "adam") {
      auto d = estimate_policy_gradient(policies[p], batches[p], marl.entropy_coef, critic, marl.gae_lambda);
      if (!std::isfinite(d.grad_norm)) throw std::runtime_error("pretrain: non-finite policy gradient");
      if (marl.max_grad_norm > 0.0 && d.grad_norm > marl.max_grad_norm) {
        for (double& g : d.gradient) g *= marl.max_grad_norm / d.grad_norm;
      }
      auto theta = policies[p].params();
      if (marl.optimizer == "adam") {
        adam[p].ascend(theta, d.gradient, marl.learning_rate);
      } else {
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += marl.learning_rate * d.gradient[i];
      }
    } else {
      policy_gradient_step(policies[p], batches[p], marl.learning_rate, marl.entropy_coef);
    }
    // fitted after the gradient so the baseline never saw the batch it scores
    if (!critics.empty()) critics[p].fit(batches[p], marl.gamma, marl.critic_learning_rate, marl.critic_steps);
    batches[p].trajectories.clear();
  }
}

}  // namespace

PretrainResult pretrain(const EnvConfig& env, const RewardConfig& reward, const MarlConfig& marl, Rng& rng,
                        const std::function<void(int, double)>& progress) {
  env.validate();
  reward.validate();
  marl.validate(env);

  const int n = env.n_prey;
  const int n_unknown = marl.n_unknown;
  const int n_stun = n - n_unknown;
  PolicyLayout layout{env.observation_size(), reward.k, kNumActions, marl.hidden_width};

  PretrainResult out;
  std::uint64_t init_seed = rng();
  const int stun_count = marl.per_agent_params ? n_stun : 1;
  const int sur_count = marl.per_agent_params ? n_unknown : 1;
  for (int i = 0; i < stun_count; ++i) out.stun.emplace_back(layout, marl.gamma, PolicyRole::Stun, init_seed + i, marl.hidden_init_std);
  for (int i = 0; i < sur_count; ++i) {
    out.surrogate.emplace_back(layout, marl.gamma, PolicyRole::Surrogate, init_seed + 100 + i,
                               marl.hidden_init_std);
  }
  out.multitask = GoalConditionedPolicy(layout, marl.gamma, PolicyRole::MultiTask, init_seed + 200, marl.hidden_init_std);
  const LatentParams neutral = prior_mean_latent(reward.k, reward.kind);

  std::vector<RolloutBatch> stun_batches(stun_count), sur_batches(sur_count), mt_batches(1);
  std::vector<AdamState> stun_adam(stun_count), sur_adam(sur_count), mt_adam(1);
  std::vector<ValueBaseline> stun_critic, sur_critic, mt_critic;
  if (marl.baseline == "critic") {
    auto make = [&](std::vector<ValueBaseline>& v, int count, std::uint64_t base) {
      for (int i = 0; i < count; ++i) {
        v.emplace_back(layout.obs_dim, layout.latent_dim, marl.critic_hidden, init_seed + base + i);
      }
    };
    make(stun_critic, stun_count, 300);
    make(sur_critic, sur_count, 400);
    make(mt_critic, 1, 500);
  }
  std::vector<GoalConditionedPolicy> mt_holder;
  std::vector<PreyController> controllers(n);
  double batch_return = 0.0;

  for (int ep = 0; ep < marl.episodes; ++ep) {
    const LatentParams b = sample_latent(reward.k, reward.kind, rng);
    for (int i = 0; i < n; ++i) {
      const bool unknown = i < n_unknown;
      const GoalConditionedPolicy& pol =
          unknown ? out.surrogate[marl.per_agent_params ? i : 0] : out.stun[marl.per_agent_params ? i - n_unknown : 0];
      controllers[i] = PreyController{&pol, b, false};
    }
    auto rec = run_episode(env, reward, controllers, b, marl.train_episode_length, marl.shared_reward, rng);
    batch_return += rec.team_return;
    for (int i = 0; i < n; ++i) {
      if (i < n_unknown) {
        sur_batches[marl.per_agent_params ? i : 0].trajectories.push_back(std::move(rec.trajectories[i]));
      } else {
        stun_batches[marl.per_agent_params ? i - n_unknown : 0].trajectories.push_back(
            std::move(rec.trajectories[i]));
      }
    }

    if (marl.train_multitask) {
      for (int i = n_unknown; i < n; ++i) controllers[i] = PreyController{&out.multitask, neutral, false};
      auto mt = run_episode(env, reward, controllers, b, marl.train_episode_length, marl.shared_reward, rng);
      for (int i = n_unknown; i < n; ++i) mt_batches[0].trajectories.push_back(std::move(mt.trajectories[i]));
    }

    if ((ep + 1) % marl.batch_episodes == 0 || ep + 1 == marl.episodes) {
      update_batches(out.stun, stun_batches, stun_adam, stun_critic, marl);
      update_batches(out.surrogate, sur_batches, sur_adam, sur_critic, marl);
      if (marl.train_multitask) {
        mt_holder.assign(1, std::move(out.multitask));
        update_batches(mt_holder, mt_batches, mt_adam, mt_critic, marl);
        out.multitask = std::move(mt_holder.front());
      }
      const int in_batch = (ep % marl.batch_episodes) + 1;
      const double mean = batch_return / in_batch;
      if (!std::isfinite(mean)) throw std::runtime_error("pretrain: mean return diverged");
      out.return_history.push_back(mean);
      batch_return = 0.0;
      if (progress) progress(ep + 1, mean);
    }
  }
  return out;
}

TeamEvaluation evaluate_team(std::span<const GoalConditionedPolicy> stun,
                             std::span<const FixedBehaviorPolicy> unknown, const LatentParams& b_condition,
                             const LatentParams& b_true, int episodes, Rng& rng, const EnvConfig& env,
                             const RewardConfig& reward) {
  const int n = env.n_prey;
  const int n_unknown = static_cast<int>(unknown.size());
  const int n_stun = n - n_unknown;
  if (n_unknown > n) throw std::invalid_argument("evaluate_team: more unknown agents than prey");
  if (n_stun > 0 && stun.empty()) throw std::invalid_argument("evaluate_team: STUN slots but no STUN policy");
  if (stun.size() > 1 && static_cast<int>(stun.size()) != n_stun) {
    throw std::invalid_argument("evaluate_team: STUN policy count matches neither 1 nor the STUN slot count");
  }
  if (episodes < 1) throw std::invalid_argument("evaluate_team: episodes must be positive");

  std::vector<PreyController> controllers(n);
  for (int i = 0; i < n_unknown; ++i) controllers[i] = PreyController{&unknown[i].policy(), unknown[i].style(), false};
  for (int i = n_unknown; i < n; ++i) {
    controllers[i] = PreyController{&stun[stun.size() == 1 ? 0 : i - n_unknown], b_condition, false};
  }

  TeamEvaluation ev;
  ev.component_means.assign(reward.k, 0.0);
  for (int e = 0; e < episodes; ++e) {
    auto rec = run_episode(env, reward, controllers, b_true, env.episode_length, true, rng);
    ev.episode_returns.push_back(rec.team_return);
    for (int c = 0; c < reward.k; ++c) ev.component_means[c] += rec.component_sums[c] / episodes;
  }
  const double mean = std::accumulate(ev.episode_returns.begin(), ev.episode_returns.end(), 0.0) / episodes;
  double var = 0.0;
  for (double r : ev.episode_returns) var += (r - mean) * (r - mean);
  ev.mean_return = mean;
  ev.std_return = episodes > 1 ? std::sqrt(var / (episodes - 1)) : 0.0;
  return ev;
}

}  // namespace stun
