#include "stun/kd_bil.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "stun/binary_io.hpp"
#include "stun/kd_bil_kernels.hpp"

namespace stun {

void Bandwidths::validate() const {
  if (!(h > 0.0) || !(h_prime > 0.0)) throw std::invalid_argument("Bandwidths: h and h_prime must be positive");
}

std::vector<double> one_hot(Action a) {
  std::vector<double> v(kNumActions, 0.0);
  v[static_cast<int>(a)] = 1.0;
  return v;
}

TrainingDataset::TrainingDataset(std::vector<Demonstration> demos) : demos_(std::move(demos)) {
  if (demos_.empty()) throw std::invalid_argument("TrainingDataset: no demonstrations");
  obs_dim_ = static_cast<int>(demos_.front().obs.size());
  latent_dim_ = demos_.front().latent.dim();
  kind_ = demos_.front().latent.kind;
  const int e = embedding_dim();
  embed_.assign(demos_.size() * e, 0.0);
  for (std::size_t j = 0; j < demos_.size(); ++j) {
    const auto& d = demos_[j];
    if (static_cast<int>(d.obs.size()) != obs_dim_) {
      throw std::invalid_argument("TrainingDataset: inconsistent observation length");
    }
    if (d.latent.dim() != latent_dim_ || d.latent.kind != kind_) {
      throw std::invalid_argument("TrainingDataset: inconsistent latent dimension or kind");
    }
    double* row = embed_.data() + j * e;
    std::copy(d.obs.begin(), d.obs.end(), row);
    row[obs_dim_ + static_cast<int>(d.action)] = 1.0;

    auto it = std::find(group_latents_.begin(), group_latents_.end(), d.latent);
    if (it == group_latents_.end()) {
      group_latents_.push_back(d.latent);
      groups_.emplace_back();
      it = group_latents_.end() - 1;
    }
    groups_[static_cast<std::size_t>(it - group_latents_.begin())].push_back(j);
  }
}

std::span<const double> TrainingDataset::embedding(std::size_t j) const {
  const auto e = static_cast<std::size_t>(embedding_dim());
  return {embed_.data() + j * e, e};
}

namespace {
constexpr char kDatasetMagic[5] = "KDDS";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void TrainingDataset::save(std::ostream& os) const {
  bin::write_header(os, kDatasetMagic, kDatasetVersion);
  bin::write<std::int32_t>(os, obs_dim_);
  bin::write<std::int32_t>(os, latent_dim_);
  bin::write<std::int32_t>(os, kind_ == MixingKind::Linear ? 0 : 1);
  bin::write<std::uint64_t>(os, demos_.size());
  for (const auto& d : demos_) {
    os.write(reinterpret_cast<const char*>(d.obs.data()), sizeof(double) * d.obs.size());
    bin::write<std::uint8_t>(os, static_cast<std::uint8_t>(d.action));
    os.write(reinterpret_cast<const char*>(d.latent.values.data()), sizeof(double) * d.latent.values.size());
  }
}

TrainingDataset TrainingDataset::load(std::istream& is) {
  bin::read_header(is, kDatasetMagic, kDatasetVersion);
  const auto obs_dim = bin::read<std::int32_t>(is);
  const auto latent_dim = bin::read<std::int32_t>(is);
  const auto kind = bin::read<std::int32_t>(is) == 0 ? MixingKind::Linear : MixingKind::Nonlinear;
  const auto m = bin::read<std::uint64_t>(is);
  if (obs_dim <= 0 || latent_dim < kMinLatentDim || latent_dim > kMaxLatentDim || m == 0 || m > (1u << 28)) {
    throw std::runtime_error("corrupt KDDS artifact header");
  }
  std::vector<Demonstration> demos(m);
  for (auto& d : demos) {
    d.obs.resize(obs_dim);
    is.read(reinterpret_cast<char*>(d.obs.data()), sizeof(double) * obs_dim);
    const auto a = bin::read<std::uint8_t>(is);
    if (a >= kNumActions) throw std::runtime_error("corrupt KDDS artifact (action)");
    d.action = static_cast<Action>(a);
    std::vector<double> b(latent_dim);
    is.read(reinterpret_cast<char*>(b.data()), sizeof(double) * latent_dim);
    if (!is) throw std::runtime_error("truncated KDDS artifact");
    d.latent = LatentParams(std::move(b), kind);
  }
  return TrainingDataset(std::move(demos));
}

ObservedWindow::ObservedWindow(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("ObservedWindow: capacity must be positive");
}

void ObservedWindow::push(ObsAction pair) {
  if (pairs_.size() == capacity_) pairs_.pop_front();
  pairs_.push_back(std::move(pair));
}

double Posterior::entropy() const {
  double h = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i] > 0.0) h -= probabilities[i] * log_weights[i];
  }
  return h;
}

Posterior Posterior::from_log_weights(std::vector<LatentParams> candidates, std::vector<double> unnormalized) {
  if (candidates.empty() || candidates.size() != unnormalized.size()) {
    throw std::invalid_argument("Posterior: candidate and weight counts differ or are zero");
  }
  for (double w : unnormalized) {
    if (!std::isfinite(w)) throw std::runtime_error("Posterior: non-finite log weight");
  }
  const double z = kernels::log_sum_exp(unnormalized);
  Posterior p;
  p.candidates = std::move(candidates);
  p.log_weights = std::move(unnormalized);
  p.probabilities.resize(p.log_weights.size());
  for (std::size_t i = 0; i < p.log_weights.size(); ++i) {
    p.log_weights[i] -= z;
    p.probabilities[i] = std::exp(p.log_weights[i]);
  }
  return p;
}

void Posterior::write_csv(std::ostream& os) const {
  os << "candidate";
  const int k = candidates.empty() ? 0 : candidates.front().dim();
  for (int d = 0; d < k; ++d) os << ",b" << d;
  os << ",probability\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    os << i;
    for (double v : candidates[i].values) os << ',' << v;
    os << ',' << probabilities[i] << '\n';
  }
}

LogPrior uniform_log_prior(std::size_t n) { return LogPrior(n, 0.0); }

double sa_distance(std::span<const double> obs_x, Action a_x, std::span<const double> obs_y, Action a_y) {
  if (obs_x.size() != obs_y.size()) throw std::invalid_argument("sa_distance: observation length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < obs_x.size(); ++i) {
    const double d = obs_x[i] - obs_y[i];
    s += d * d;
  }
  if (a_x != a_y) s += 2.0;
  return std::sqrt(s);
}

double sa_distance(const ObsAction& x, const ObsAction& y) {
  return sa_distance(x.obs, x.action, y.obs, y.action);
}

double reward_distance(std::span<const double> b1, std::span<const double> b2, MixingKind kind) {
  if (b1.size() != b2.size()) throw std::invalid_argument("reward_distance: dimension mismatch");
  if (kind == MixingKind::Nonlinear) {
    double s = 0.0;
    for (std::size_t i = 0; i < b1.size(); ++i) s += (b1[i] - b2[i]) * (b1[i] - b2[i]);
    return std::sqrt(s);
  }
  const double dot = std::inner_product(b1.begin(), b1.end(), b2.begin(), 0.0);
  const double n1 = std::sqrt(std::inner_product(b1.begin(), b1.end(), b1.begin(), 0.0));
  const double n2 = std::sqrt(std::inner_product(b2.begin(), b2.end(), b2.begin(), 0.0));
  if (n1 == 0.0 || n2 == 0.0) throw std::invalid_argument("reward_distance: zero vector has no cosine");
  return std::max(0.0, 1.0 - dot / (n1 * n2));
}

namespace {

void check_inputs(const TrainingDataset& ds, std::span<const double> b, const Bandwidths& bw) {
  if (ds.empty()) throw std::invalid_argument("KD-BIL: empty training dataset");
  bw.validate();
  if (static_cast<int>(b.size()) != ds.latent_dim()) {
    throw std::invalid_argument("KD-BIL: latent dimension mismatch with dataset");
  }
}

}  // namespace

double log_conditional_density(const TrainingDataset& ds, const ObsAction& pair, std::span<const double> b,
                               const Bandwidths& bw) {
  check_inputs(ds, b, bw);
  if (static_cast<int>(pair.obs.size()) != ds.obs_dim()) {
    throw std::invalid_argument("KD-BIL: observation length mismatch with dataset");
  }
  const std::size_t m = ds.size();
  std::vector<double> num(m), den(m);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& d = ds.demos()[j];
    const double ds_ = sa_distance(pair.obs, pair.action, d.obs, d.action);
    const double dr = reward_distance(b, d.latent.values, ds.kind());
    den[j] = -dr * dr / (2.0 * bw.h_prime);
    num[j] = -ds_ * ds_ / (2.0 * bw.h) + den[j];
  }
  return kernels::log_sum_exp(num) - kernels::log_sum_exp(den);
}

double conditional_density(const TrainingDataset& ds, const ObsAction& pair, std::span<const double> b,
                           const Bandwidths& bw) {
  return std::exp(log_conditional_density(ds, pair, b, bw));
}

double log_posterior(const TrainingDataset& ds, std::span<const ObsAction> window, std::span<const double> b,
                     double prior_log_density, const Bandwidths& bw) {
  if (window.empty()) throw std::invalid_argument("log_posterior: empty observation window");
  check_inputs(ds, b, bw);
  double s = prior_log_density;
  for (const auto& pair : window) s += log_conditional_density(ds, pair, b, bw);
  return s;
}

double log_posterior(const TrainingDataset& ds, const ObservedWindow& window, std::span<const double> b,
                     double prior_log_density, const Bandwidths& bw) {
  const std::vector<ObsAction> pairs(window.pairs().begin(), window.pairs().end());
  return log_posterior(ds, pairs, b, prior_log_density, bw);
}

Posterior posterior_over_grid(const TrainingDataset& ds, std::span<const ObsAction> window,
                              const std::vector<LatentParams>& grid, const LogPrior& prior, const Bandwidths& bw,
                              KernelBackend backend) {
  if (grid.empty()) throw std::invalid_argument("posterior_over_grid: empty candidate grid");
  if (prior.size() != grid.size()) throw std::invalid_argument("posterior_over_grid: prior size differs from grid");
  if (window.empty()) throw std::invalid_argument("posterior_over_grid: empty observation window");
  check_inputs(ds, grid.front().values, bw);
  for (const auto& pair : window) {
    if (static_cast<int>(pair.obs.size()) != ds.obs_dim()) {
      throw std::invalid_argument("posterior_over_grid: observation length mismatch with dataset");
    }
  }
  auto ll = backend == KernelBackend::Serial ? kernels::window_log_likelihood_serial(ds, window, grid, bw)
                                             : kernels::window_log_likelihood_parallel(ds, window, grid, bw);
  for (std::size_t c = 0; c < grid.size(); ++c) ll[c] += prior[c];
  return Posterior::from_log_weights(grid, std::move(ll));
}

Posterior posterior_over_grid(const TrainingDataset& ds, const ObservedWindow& window,
                              const std::vector<LatentParams>& grid, const LogPrior& prior, const Bandwidths& bw,
                              KernelBackend backend) {
  const std::vector<ObsAction> pairs(window.pairs().begin(), window.pairs().end());
  return posterior_over_grid(ds, pairs, grid, prior, bw, backend);
}

namespace {

void simplex_points(int k, int resolution, int remaining, std::vector<int>& prefix,
                    std::vector<LatentParams>& out) {
  if (static_cast<int>(prefix.size()) == k - 1) {
    std::vector<double> v;
    v.reserve(k);
    for (int p : prefix) v.push_back(static_cast<double>(p) / resolution);
    v.push_back(static_cast<double>(remaining) / resolution);
    out.emplace_back(project_to_simplex(v), MixingKind::Linear);
    return;
  }
  for (int i = 0; i <= remaining; ++i) {
    prefix.push_back(i);
    simplex_points(k, resolution, remaining - i, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace

std::vector<LatentParams> latent_grid(int k, MixingKind kind, int resolution) {
  if (k < kMinLatentDim || k > kMaxLatentDim) throw std::invalid_argument("latent_grid: unsupported k");
  if (resolution < 1) throw std::invalid_argument("latent_grid: resolution must be at least 1");
  std::vector<LatentParams> out;
  if (kind == MixingKind::Linear) {
    std::vector<int> prefix;
    simplex_points(k, resolution, resolution, prefix, out);
    return out;
  }
  std::vector<int> idx(k, 0);
  for (;;) {
    std::vector<double> v(k);
    for (int d = 0; d < k; ++d) v[d] = static_cast<double>(idx[d]) / resolution;
    out.emplace_back(std::move(v), MixingKind::Nonlinear);
    int d = k - 1;
    while (d >= 0 && idx[d] == resolution) idx[d--] = 0;
    if (d < 0) break;
    ++idx[d];
  }
  return out;
}

int default_grid_resolution(int k, MixingKind kind) {
  if (kind == MixingKind::Linear) {
    static constexpr int kRes[] = {0, 0, 24, 6, 4, 3, 2};
    return kRes[k];
  }
  static constexpr int kRes[] = {0, 0, 4, 2, 1, 1, 1};
  return kRes[k];
}

}  // namespace stun
