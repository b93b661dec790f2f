#include "stun/kd_bil_kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stun::kernels {

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<double> window_log_likelihood_serial(const TrainingDataset& ds, std::span<const ObsAction> window,
                                                 const std::vector<LatentParams>& grid, const Bandwidths& bw) {
  const std::size_t m = ds.size();
  std::vector<double> out(grid.size(), 0.0);
  std::vector<double> log_kr(m), terms(m);
  for (std::size_t c = 0; c < grid.size(); ++c) {
    for (std::size_t j = 0; j < m; ++j) {
      const double dr = reward_distance(grid[c].values, ds.demos()[j].latent.values, ds.kind());
      log_kr[j] = -dr * dr / (2.0 * bw.h_prime);
    }
    const double log_norm = log_sum_exp(log_kr);
    double total = 0.0;
    for (const auto& pair : window) {
      for (std::size_t j = 0; j < m; ++j) {
        const auto& d = ds.demos()[j];
        const double dsa = sa_distance(pair.obs, pair.action, d.obs, d.action);
        terms[j] = -dsa * dsa / (2.0 * bw.h) + log_kr[j];
      }
      total += log_sum_exp(terms) - log_norm;
    }
    out[c] = total;
  }
  return out;
}

std::vector<double> window_log_likelihood_parallel(const TrainingDataset& ds, std::span<const ObsAction> window,
                                                   const std::vector<LatentParams>& grid, const Bandwidths& bw) {
  const auto n = static_cast<std::ptrdiff_t>(window.size());
  const auto n_grid = static_cast<std::ptrdiff_t>(grid.size());
  const auto& groups = ds.groups();
  const auto n_groups = static_cast<std::ptrdiff_t>(groups.size());
  const int obs_dim = ds.obs_dim();

  // Reward-kernel log weights per (candidate, latent group) and the
  // normalizer log sum_l K_R(c, b_l), where each group contributes |g| times.
  std::vector<double> log_kr(static_cast<std::size_t>(n_grid * n_groups));
  std::vector<double> log_norm(static_cast<std::size_t>(n_grid));
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < n_grid; ++c) {
    std::vector<double> weighted(static_cast<std::size_t>(n_groups));
    for (std::ptrdiff_t g = 0; g < n_groups; ++g) {
      const double dr = reward_distance(grid[c].values, ds.group_latents()[g].values, ds.kind());
      const double v = -dr * dr / (2.0 * bw.h_prime);
      log_kr[c * n_groups + g] = v;
      weighted[g] = v + std::log(static_cast<double>(groups[g].size()));
    }
    log_norm[c] = log_sum_exp(weighted);
  }

  // Per window pair and group: log sum_{j in g} K((o,a), (o_j,a_j)).
  std::vector<double> log_ks(static_cast<std::size_t>(n * n_groups));
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& pair = window[i];
    std::vector<double> terms;
    for (std::ptrdiff_t g = 0; g < n_groups; ++g) {
      terms.clear();
      for (std::size_t j : groups[g]) {
        const auto e = ds.embedding(j);
        double s = 0.0;
        for (int d = 0; d < obs_dim; ++d) {
          const double diff = pair.obs[d] - e[d];
          s += diff * diff;
        }
        if (e[obs_dim + static_cast<int>(pair.action)] == 0.0) s += 2.0;
        terms.push_back(-s / (2.0 * bw.h));
      }
      log_ks[i * n_groups + g] = log_sum_exp(terms);
    }
  }

  // Per (candidate, pair) log conditional density; summed over pairs in a
  // fixed order afterwards.
  std::vector<double> out(static_cast<std::size_t>(n_grid), 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < n_grid; ++c) {
    std::vector<double> terms(static_cast<std::size_t>(n_groups));
    double total = 0.0;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      for (std::ptrdiff_t g = 0; g < n_groups; ++g) terms[g] = log_kr[c * n_groups + g] + log_ks[i * n_groups + g];
      total += log_sum_exp(terms) - log_norm[c];
    }
    out[c] = total;
  }
  return out;
}

}  // namespace stun::kernels
