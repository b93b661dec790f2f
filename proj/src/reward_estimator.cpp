#include "stun/reward_estimator.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "stun/binary_io.hpp"

namespace stun {

namespace {

void require_nonempty(const Posterior& p, const char* what) {
  if (p.empty() || p.probabilities.size() != p.candidates.size()) {
    throw std::invalid_argument(std::string(what) + ": empty posterior");
  }
}

std::vector<double> raw_mean(const Posterior& p) {
  const int k = p.candidates.front().dim();
  std::vector<double> m(k, 0.0);
  for (std::size_t c = 0; c < p.size(); ++c) {
    for (int d = 0; d < k; ++d) m[d] += p.probabilities[c] * p.candidates[c][d];
  }
  return m;
}

}  // namespace

LatentParams map_estimate(const Posterior& p) {
  require_nonempty(p, "map_estimate");
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.size(); ++c) {
    if (p.probabilities[c] > p.probabilities[best]) best = c;
  }
  return p.candidates[best];
}

LatentParams posterior_mean(const Posterior& p) {
  require_nonempty(p, "posterior_mean");
  const auto kind = p.candidates.front().kind;
  return LatentParams(project_to_domain(raw_mean(p), kind), kind);
}

std::vector<double> posterior_summary(const Posterior& p) {
  require_nonempty(p, "posterior_summary");
  const auto m = raw_mean(p);
  const int k = static_cast<int>(m.size());
  std::vector<double> s(2 * k, 0.0);
  std::copy(m.begin(), m.end(), s.begin());
  for (std::size_t c = 0; c < p.size(); ++c) {
    for (int d = 0; d < k; ++d) {
      const double dev = p.candidates[c][d] - m[d];
      s[k + d] += p.probabilities[c] * dev * dev;
    }
  }
  for (int d = 0; d < k; ++d) s[k + d] = std::sqrt(std::max(0.0, s[k + d]));
  return s;
}

Debiaser::Debiaser(int k, MixingKind kind, std::uint64_t seed) : k_(k), kind_(kind), seed_(seed) {
  if (k < kMinLatentDim || k > kMaxLatentDim) throw std::invalid_argument("Debiaser: unsupported latent dimension");
  params_.assign(off_c2() + k_, 0.0);
  Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0 / std::sqrt(2.0 * k_));
  for (std::size_t i = 0; i < off_c1(); ++i) params_[i] = n01(rng);
}

std::vector<double> Debiaser::forward_raw(std::span<const double> s) const {
  if (static_cast<int>(s.size()) != 2 * k_) throw std::invalid_argument("Debiaser: summary length must be 2k");
  const int hw = hidden_width();
  const double* w1 = params_.data();
  const double* c1 = w1 + off_c1();
  const double* w2 = params_.data() + off_w2();
  const double* c2 = params_.data() + off_c2();
  std::vector<double> h(hw);
  for (int u = 0; u < hw; ++u) h[u] = std::tanh(std::inner_product(s.begin(), s.end(), w1 + u * 2 * k_, c1[u]));
  std::vector<double> out(k_);
  for (int d = 0; d < k_; ++d) out[d] = s[d] + c2[d] + std::inner_product(h.begin(), h.end(), w2 + d * hw, 0.0);
  return out;
}

LatentParams Debiaser::operator()(std::span<const double> summary) const {
  return LatentParams(project_to_domain(forward_raw(summary), kind_), kind_);
}

namespace {
constexpr char kDebiaserMagic[5] = "DBSR";
constexpr std::uint32_t kDebiaserVersion = 1;
}  // namespace

void Debiaser::save(std::ostream& os) const {
  bin::write_header(os, kDebiaserMagic, kDebiaserVersion);
  bin::write<std::int32_t>(os, k_);
  bin::write<std::uint8_t>(os, kind_ == MixingKind::Linear ? 0 : 1);
  bin::write<std::uint64_t>(os, seed_);
  bin::write_vec(os, params_);
  bin::write_vec(os, train_loss_);
  bin::write_vec(os, holdout_loss_);
}

Debiaser Debiaser::load(std::istream& is) {
  bin::read_header(is, kDebiaserMagic, kDebiaserVersion);
  const auto k = bin::read<std::int32_t>(is);
  const auto kind = bin::read<std::uint8_t>(is);
  const auto seed = bin::read<std::uint64_t>(is);
  if (kind > 1) throw std::runtime_error("corrupt DBSR artifact (kind)");
  Debiaser d(k, kind == 0 ? MixingKind::Linear : MixingKind::Nonlinear, seed);
  auto params = bin::read_vec<double>(is);
  if (params.size() != d.params_.size()) throw std::runtime_error("corrupt DBSR artifact (parameter count)");
  d.params_ = std::move(params);
  d.train_loss_ = bin::read_vec<double>(is);
  d.holdout_loss_ = bin::read_vec<double>(is);
  return d;
}

double debias_loss(const Debiaser& d, std::span<const DebiasPair> pairs, const std::vector<RewardComponents>& probes,
                   const RewardConfig& reward) {
  if (pairs.empty() || probes.empty()) throw std::invalid_argument("debias_loss: no pairs or no probes");
  double total = 0.0;
  for (const auto& pr : pairs) {
    const auto out = d.forward_raw(pr.summary);
    for (const auto& c : probes) {
      const double e = mix_raw(out, c, reward) - mix_raw(pr.truth.values, c, reward);
      total += e * e;
    }
  }
  return total / static_cast<double>(pairs.size() * probes.size());
}

namespace {

// Gradient of debias_loss with respect to all parameters.
std::vector<double> loss_gradient(const Debiaser& d, std::span<const DebiasPair> pairs,
                                  const std::vector<RewardComponents>& probes, const RewardConfig& reward,
                                  std::size_t off_c1, std::size_t off_w2, std::size_t off_c2) {
  const int k = d.k();
  const int hw = d.hidden_width();
  const auto theta = d.params();
  std::vector<double> g(theta.size(), 0.0);
  const double scale = 2.0 / static_cast<double>(pairs.size() * probes.size());
  std::vector<double> h(hw), d_out(k), d_h(hw);
  for (const auto& pr : pairs) {
    const auto& s = pr.summary;
    for (int u = 0; u < hw; ++u) {
      h[u] = std::tanh(std::inner_product(s.begin(), s.end(), theta.data() + u * 2 * k, theta[off_c1 + u]));
    }
    const auto out = d.forward_raw(s);
    std::fill(d_out.begin(), d_out.end(), 0.0);
    for (const auto& c : probes) {
      const double e = mix_raw(out, c, reward) - mix_raw(pr.truth.values, c, reward);
      const auto gb = mix_grad_b(out, c, reward);
      for (int j = 0; j < k; ++j) d_out[j] += scale * e * gb[j];
    }
    std::fill(d_h.begin(), d_h.end(), 0.0);
    for (int j = 0; j < k; ++j) {
      g[off_c2 + j] += d_out[j];
      for (int u = 0; u < hw; ++u) {
        g[off_w2 + j * hw + u] += d_out[j] * h[u];
        d_h[u] += d_out[j] * theta[off_w2 + j * hw + u];
      }
    }
    for (int u = 0; u < hw; ++u) {
      const double dpre = d_h[u] * (1.0 - h[u] * h[u]);
      g[off_c1 + u] += dpre;
      for (int i = 0; i < 2 * k; ++i) g[u * 2 * k + i] += dpre * s[i];
    }
  }
  return g;
}

}  // namespace

Debiaser train_debiaser(const std::vector<DebiasPair>& pairs, const std::vector<RewardComponents>& probes,
                        const RewardConfig& reward, const DebiaserConfig& config) {
  if (pairs.size() < 100) throw std::invalid_argument("train_debiaser: need at least 100 pairs");
  if (probes.empty()) throw std::invalid_argument("train_debiaser: empty probe set");
  if (config.epochs < 0 || !(config.learning_rate >= 0.0)) throw std::invalid_argument("train_debiaser: bad config");
  if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0)) {
    throw std::invalid_argument("train_debiaser: holdout_fraction must lie in [0, 1)");
  }
  const int k = reward.k;
  for (const auto& p : pairs) {
    if (p.truth.dim() != k || static_cast<int>(p.summary.size()) != 2 * k) {
      throw std::invalid_argument("train_debiaser: pair dimension differs from k");
    }
  }
  for (const auto& c : probes) {
    if (static_cast<int>(c.size()) != k) throw std::invalid_argument("train_debiaser: probe dimension differs from k");
  }

  Debiaser d(k, reward.kind, config.seed);
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<DebiasPair> shuffled = pairs;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto n_hold = static_cast<std::size_t>(config.holdout_fraction * static_cast<double>(shuffled.size()));
  std::span<const DebiasPair> all(shuffled);
  std::span<const DebiasPair> train = all.subspan(n_hold);
  std::span<const DebiasPair> hold = n_hold > 0 ? all.subspan(0, n_hold) : train;

  const double initial_train = debias_loss(d, train, probes, reward);
  if (!std::isfinite(initial_train)) throw std::runtime_error("train_debiaser: non-finite initial loss");
  d.train_loss_.push_back(initial_train);
  d.holdout_loss_.push_back(debias_loss(d, hold, probes, reward));
  std::vector<double> best = d.params_;
  double best_hold = d.holdout_loss_.back();

  // Adam, full batch.
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m(d.params_.size(), 0.0), v(d.params_.size(), 0.0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto g = loss_gradient(d, train, probes, reward, d.off_c1(), d.off_w2(), d.off_c2());
    const double c1 = 1.0 - std::pow(b1, epoch), c2 = 1.0 - std::pow(b2, epoch);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      d.params_[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
    const double tl = debias_loss(d, train, probes, reward);
    if (!std::isfinite(tl)) throw std::runtime_error("train_debiaser: non-finite loss at epoch " + std::to_string(epoch));
    d.train_loss_.push_back(tl);
    d.holdout_loss_.push_back(debias_loss(d, hold, probes, reward));
    if (d.holdout_loss_.back() < best_hold && tl <= initial_train) {
      best_hold = d.holdout_loss_.back();
      best = d.params_;
    }
  }
  d.params_ = best;

  // Gauss-Newton on the output offset over all pairs. For linear mixing the
  // residuals are affine in c2 and one step is exact.
  const std::size_t oc2 = d.off_c2();
  for (int it = 0; it < 5; ++it) {
    Eigen::MatrixXd jtj = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd jtr = Eigen::VectorXd::Zero(k);
    for (const auto& pr : all) {
      const auto out = d.forward_raw(pr.summary);
      for (const auto& c : probes) {
        const double e = mix_raw(out, c, reward) - mix_raw(pr.truth.values, c, reward);
        const auto gb = mix_grad_b(out, c, reward);
        const Eigen::Map<const Eigen::VectorXd> j(gb.data(), k);
        jtj += j * j.transpose();
        jtr += e * j;
      }
    }
    jtj.diagonal().array() += 1e-12 * (1.0 + jtj.diagonal().cwiseAbs().maxCoeff());
    const Eigen::VectorXd step = jtj.ldlt().solve(-jtr);
    if (!step.allFinite()) break;
    const double before = debias_loss(d, all, probes, reward);
    for (int j = 0; j < k; ++j) d.params_[oc2 + j] += step[j];
    const double after = debias_loss(d, all, probes, reward);
    if (!(after <= before)) {
      for (int j = 0; j < k; ++j) d.params_[oc2 + j] -= step[j];
      break;
    }
    if (reward.kind == MixingKind::Linear || step.norm() < 1e-12) break;
  }
  return d;
}

LatentParams debias(const Debiaser& d, const Posterior& p) {
  require_nonempty(p, "debias");
  if (p.candidates.front().dim() != d.k() || p.candidates.front().kind != d.kind()) {
    throw std::invalid_argument("debias: posterior family differs from the debiaser's");
  }
  return d(posterior_summary(p));
}

EstimatorReport summarize(const Posterior& p, const Debiaser* debiaser) {
  EstimatorReport r;
  r.map = map_estimate(p);
  r.mean = posterior_mean(p);
  if (debiaser) r.debiased = debias(*debiaser, p);
  r.entropy = p.entropy();
  return r;
}

}  // namespace stun
