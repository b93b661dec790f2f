#include "stun/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>

namespace stun {

namespace {

void require_dims(std::size_t b, std::size_t c, const char* where) {
  if (b != c) {
    throw std::invalid_argument(std::string(where) + ": dimension mismatch (" +
                                std::to_string(b) + " vs " + std::to_string(c) + ")");
  }
}

// splitmix64, used to derive the fixed mixing-network constants.
std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kMixingSeed = 0x5354554E4D4958ULL;

// Hidden weight magnitude in [0.5, 1.5).
double hidden_weight(int i, int j) {
  const std::uint64_t h = splitmix(kMixingSeed ^ (static_cast<std::uint64_t>(i) << 8) ^
                                   static_cast<std::uint64_t>(j));
  return 0.5 + static_cast<double>(h >> 11) * 0x1.0p-53;
}

double safety_event(double d, double radius, bool proportional) {
  if (d > radius) return 0.0;
  return proportional ? 1.0 - d / radius : 1.0;
}

}  // namespace

const char* to_string(MixingKind kind) {
  return kind == MixingKind::Linear ? "linear" : "nonlinear";
}

const char* to_string(NonlinearMode mode) {
  return mode == NonlinearMode::Softmax ? "softmax" : "network";
}

MixingKind mixing_kind_from_string(const std::string& s) {
  if (s == "linear") return MixingKind::Linear;
  if (s == "nonlinear") return MixingKind::Nonlinear;
  throw std::invalid_argument("unknown mixing kind '" + s + "'");
}

NonlinearMode nonlinear_mode_from_string(const std::string& s) {
  if (s == "softmax") return NonlinearMode::Softmax;
  if (s == "network") return NonlinearMode::Network;
  throw std::invalid_argument("unknown nonlinear mode '" + s + "'");
}

void RewardConfig::validate() const {
  if (k < kMinLatentDim || k > kMaxLatentDim) {
    throw std::invalid_argument("RewardConfig: k must lie in [2, 6], got " + std::to_string(k));
  }
  if (!(softmax_beta > 0.0)) throw std::invalid_argument("RewardConfig: softmax_beta must be positive");
}

LatentParams::LatentParams(std::vector<double> v, MixingKind k) : values(std::move(v)), kind(k) {
  if (values.size() < static_cast<std::size_t>(kMinLatentDim) ||
      values.size() > static_cast<std::size_t>(kMaxLatentDim)) {
    throw std::invalid_argument("LatentParams: dimension must lie in [2, 6]");
  }
  for (double x : values) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("LatentParams: entries must lie in [0, 1]");
  }
  if (kind == MixingKind::Linear) {
    const double s = std::accumulate(values.begin(), values.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("LatentParams: linear entries must sum to 1");
  }
}

std::vector<double> project_to_simplex(std::span<const double> v) {
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double tau = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cumulative += u[i];
    const double t = (cumulative - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) tau = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(v[i] - tau, 0.0, 1.0);
  return out;
}

std::vector<double> project_to_domain(std::span<const double> v, MixingKind kind) {
  if (kind == MixingKind::Linear) return project_to_simplex(v);
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x = std::clamp(x, 0.0, 1.0);
  return out;
}

double preference_weight(int prey_index, int other_index) {
  const bool a = prey_index % 2 == 0;
  const bool b = other_index % 2 == 0;
  if (a && b) return 2.0;
  if (!a && !b) return 0.5;
  return 1.0;
}

std::vector<RewardComponents> compute_components(const EnvState& state,
                                                 std::span<const Action> prey_actions,
                                                 const EnvConfig& env_config,
                                                 const RewardConfig& reward_config) {
  reward_config.validate();
  const int n = static_cast<int>(state.prey.size());
  if (static_cast<int>(prey_actions.size()) != n) {
    throw std::invalid_argument("compute_components: expected one action per prey");
  }
  const int k = reward_config.k;
  const double rs = env_config.resource_radius;
  const double ra = env_config.predation_radius;
  const bool prop = reward_config.safety_proportional;

  std::vector<RewardComponents> out(n, RewardComponents(k, 0.0));
  for (int i = 0; i < n; ++i) {
    double greedy = 0.0, safety = 0.0, preference = 0.0, wide_greedy = 0.0, wide_safety = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = distance(state.prey[i], state.prey[j]);
      if (d <= rs) {
        greedy += 1.0;
        preference += preference_weight(i, j);
      }
      if (d <= 2.0 * rs) wide_greedy += 0.5;
    }
    for (int p = 0; p < static_cast<int>(state.predators.size()); ++p) {
      const double d = distance(state.prey[i], state.predators[p]);
      const double e = safety_event(d, ra, prop);
      safety += e;
      preference += preference_weight(i, p) * e;
      wide_safety += 0.5 * safety_event(d, 2.0 * ra, prop);
    }
    const double cost = prey_actions[i] == Action::Stay ? 0.0 : 1.0;
    const double all[kMaxLatentDim] = {greedy, safety, cost, preference, wide_greedy, wide_safety};
    // 0.0 - x keeps untriggered entries at +0.0 rather than -0.0.
    for (int c = 0; c < k; ++c) out[i][c] = 0.0 - all[c];
  }
  return out;
}

MixingNet::MixingNet(std::span<const double> b) : k_(static_cast<int>(b.size())), b_(b.begin(), b.end()) {}

double MixingNet::operator()(std::span<const double> c) const {
  require_dims(b_.size(), c.size(), "MixingNet");
  const double v = 1.0 / k_;
  double out = 0.0;
  for (int i = 0; i < k_; ++i) {
    double pre = 0.0;
    for (int j = 0; j < k_; ++j) pre += hidden_weight(i, j) * b_[j] * c[j];
    out += v * std::tanh(pre);
  }
  return out;
}

std::vector<double> MixingNet::grad_b(std::span<const double> c) const {
  require_dims(b_.size(), c.size(), "MixingNet");
  const double v = 1.0 / k_;
  std::vector<double> g(k_, 0.0);
  for (int i = 0; i < k_; ++i) {
    double pre = 0.0;
    for (int j = 0; j < k_; ++j) pre += hidden_weight(i, j) * b_[j] * c[j];
    const double th = std::tanh(pre);
    const double dpre = v * (1.0 - th * th);
    for (int j = 0; j < k_; ++j) g[j] += dpre * hidden_weight(i, j) * c[j];
  }
  return g;
}

namespace {

std::vector<double> softmax_weights(std::span<const double> b, double beta) {
  std::vector<double> w(b.size());
  const double mx = *std::max_element(b.begin(), b.end());
  double z = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    w[i] = std::exp(beta * (b[i] - mx));
    z += w[i];
  }
  for (double& x : w) x /= z;
  return w;
}

}  // namespace

double mix_raw(std::span<const double> b, std::span<const double> c, const RewardConfig& config) {
  require_dims(b.size(), c.size(), "mix");
  if (config.kind == MixingKind::Linear) {
    return std::inner_product(b.begin(), b.end(), c.begin(), 0.0);
  }
  if (config.nonlinear_mode == NonlinearMode::Softmax) {
    const auto w = softmax_weights(b, config.softmax_beta);
    return std::inner_product(w.begin(), w.end(), c.begin(), 0.0);
  }
  return MixingNet(b)(c);
}

double mix_linear(const LatentParams& b, std::span<const double> c) {
  if (b.kind != MixingKind::Linear) throw std::invalid_argument("mix_linear: latent parameters are not linear");
  require_dims(b.values.size(), c.size(), "mix_linear");
  return std::inner_product(b.values.begin(), b.values.end(), c.begin(), 0.0);
}

double mix_nonlinear(const LatentParams& b, std::span<const double> c, const RewardConfig& config) {
  if (b.kind != MixingKind::Nonlinear) {
    throw std::invalid_argument("mix_nonlinear: latent parameters are not nonlinear");
  }
  RewardConfig cfg = config;
  cfg.kind = MixingKind::Nonlinear;
  return mix_raw(b.values, c, cfg);
}

double mix(const LatentParams& b, std::span<const double> c, const RewardConfig& config) {
  return b.kind == MixingKind::Linear ? mix_linear(b, c) : mix_nonlinear(b, c, config);
}

std::vector<double> mix_grad_b(std::span<const double> b, std::span<const double> c,
                               const RewardConfig& config) {
  require_dims(b.size(), c.size(), "mix_grad_b");
  if (config.kind == MixingKind::Linear) return {c.begin(), c.end()};
  if (config.nonlinear_mode == NonlinearMode::Network) return MixingNet(b).grad_b(c);
  // d/db_j sum_i w_i c_i = beta * w_j * (c_j - sum_i w_i c_i)
  const auto w = softmax_weights(b, config.softmax_beta);
  const double m = std::inner_product(w.begin(), w.end(), c.begin(), 0.0);
  std::vector<double> g(b.size());
  for (std::size_t j = 0; j < b.size(); ++j) g[j] = config.softmax_beta * w[j] * (c[j] - m);
  return g;
}

LatentParams sample_latent(int k, MixingKind kind, Rng& rng) {
  if (k < kMinLatentDim || k > kMaxLatentDim) {
    throw std::invalid_argument("sample_latent: unsupported latent dimension " + std::to_string(k));
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(k);
  for (;;) {
    double s = 0.0;
    for (double& x : v) {
      x = u(rng);
      s += x;
    }
    if (kind == MixingKind::Nonlinear) break;
    if (s > 0.0) {
      for (double& x : v) x /= s;
      // Rounding can leave the sum a few ulps away from 1.
      v.back() = std::max(0.0, 1.0 - std::accumulate(v.begin(), v.end() - 1, 0.0));
      break;
    }
  }
  return LatentParams(std::move(v), kind);
}

}  // namespace stun
