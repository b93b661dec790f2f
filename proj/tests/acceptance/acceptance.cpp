// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any failed. The pre-trained bundle is cached under --work-dir and reused
// while its manifest records the same configuration.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kd_bil_oracle.hpp"
#include "stun/harness.hpp"

using namespace stun;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double se_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1) / v.size());
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * (i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  int instances = 0;
  for (MixingKind kind : {MixingKind::Linear, MixingKind::Nonlinear}) {
    for (int trial = 0; trial < 100; ++trial, ++instances) {
      const auto in = oracle::random_instance(rng, kind);
      TrainingDataset ds(in.demos);
      LogPrior lp;
      for (double p : in.prior) lp.push_back(std::log(p));
      const auto expect = oracle::posterior(in.demos, in.window, in.grid, in.prior, 0.03, 0.03);
      for (KernelBackend be : {KernelBackend::Serial, KernelBackend::Parallel}) {
        const auto got = posterior_over_grid(ds, in.window, in.grid, lp, Bandwidths{}, be);
        for (std::size_t c = 0; c < expect.size(); ++c) {
          worst = std::max(worst, std::abs(got.probabilities[c] - expect[c]) / expect[c]);
        }
      }
    }
  }
  return {worst <= 1e-10, std::to_string(instances) + " instances x 2 backends, max relative error " +
                              fmt("%.2e", worst)};
}

Outcome identifiability(const Bundle& b, const ExperimentConfig& cfg, const fs::path& work) {
  Rng rng(cfg.seed + 11);
  const int n = static_cast<int>(cfg.kdbil.window_capacity);
  const auto rows = posterior_heatmap(b, cfg.kdbil, n, rng);
  {
    std::ofstream os(work / "heatmap.csv");
    write_heatmap_csv(os, b.grid, rows);
  }
  // adjacent simplex grid points are this far apart
  const int res = cfg.kdbil.grid_resolution > 0 ? cfg.kdbil.grid_resolution
                                                : default_grid_resolution(b.reward.k, b.reward.kind);
  const double cell = std::sqrt(2.0) / res;
  int close = 0, map_hits = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<double> mean(b.reward.k, 0.0);
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      for (int d = 0; d < b.reward.k; ++d) mean[d] += rows[r][c] * b.grid[c][d];
    }
    double dist = 0.0;
    for (int d = 0; d < b.reward.k; ++d) dist += (mean[d] - b.grid[r][d]) * (mean[d] - b.grid[r][d]);
    close += std::sqrt(dist) <= cell + 1e-12;
    map_hits += static_cast<std::size_t>(std::max_element(rows[r].begin(), rows[r].end()) - rows[r].begin()) == r;
  }
  const double fc = static_cast<double>(close) / rows.size(), fm = static_cast<double>(map_hits) / rows.size();
  return {fc >= 0.8 && fm >= 0.6, "m=" + std::to_string(b.dataset.size()) + " n=" + std::to_string(n) +
                                      " mean within one cell " + std::to_string(close) + "/" +
                                      std::to_string(rows.size()) + ", MAP on truth " + std::to_string(map_hits) +
                                      "/" + std::to_string(rows.size())};
}

Outcome theorem1(const ExperimentConfig& cfg) {
  TheoremSettings s = cfg.theorem;
  s.n_states = 5;
  s.n_actions = 3;
  s.gamma = 0.9;
  s.steps = 10000000;
  s.noise_half_width = 1.0;
  s.betas = {0.5};
  s.seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto rep = run_theorem1(s);
  int converged = 0;
  double worst = 0.0;
  for (double g : rep.unbiased_final_gaps) {
    converged += g < 0.05;
    worst = std::max(worst, g);
  }
  std::vector<double> biased;
  for (const auto& row : rep.bias_rows) biased.push_back(row.gap);
  const double target = 0.5 / (1.0 - s.gamma);
  const double mb = mean_of(biased);
  const bool ok = converged >= 9 && std::abs(mb - target) <= 0.2 * target;
  return {ok, "unbiased converged " + std::to_string(converged) + "/10 (worst gap " + fmt("%.4f", worst) +
                  "), biased mean gap " + fmt("%.3f", mb) + " vs " + fmt("%.1f", target)};
}

Outcome unbiasedness(const Bundle& b, const ExperimentConfig& cfg) {
  if (!b.debiaser) return {false, "bundle has no debiaser"};
  Rng rng(cfg.seed + 23);
  const auto probes = collect_probe_components(b, cfg.debiaser.probes, rng);
  const int episodes = 500;
  std::vector<double> mean_bias, deb_bias;
  for (int e = 0; e < episodes; ++e) {
    const LatentParams truth = sample_latent(b.reward.k, b.reward.kind, rng);
    const auto post = observe_and_infer(b, cfg.kdbil, truth, cfg.debiaser.window_pairs, rng);
    const LatentParams pm = posterior_mean(post);
    const LatentParams db = debias(*b.debiaser, post);
    double a = 0.0, c = 0.0;
    for (const auto& p : probes) {
      const double r = mix(truth, p, b.reward);
      a += mix(pm, p, b.reward) - r;
      c += mix(db, p, b.reward) - r;
    }
    mean_bias.push_back(a / probes.size());
    deb_bias.push_back(c / probes.size());
  }
  const double m = mean_of(mean_bias), se = se_of(mean_bias), d = mean_of(deb_bias);
  const bool ok = std::abs(m) <= 2.0 * se && std::abs(d) <= std::abs(m);
  return {ok, std::to_string(episodes) + " episodes: posterior-mean bias " + fmt("%.5f", m) + " (SE " +
                  fmt("%.5f", se) + "), debiased bias " + fmt("%.5f", d) + " (SE " + fmt("%.5f", se_of(deb_bias)) +
                  ")"};
}

Outcome normalized_score_row() {
  ScoreTable t;
  t.column_names = {"STUN", "FBA-C", "FBA-B", "FBA-A", "MAPPO", "IPPO", "COMA", "MAA2C", "IA2C"};
  t.values = {{1.10, 1.04, 1.04, 0.99, 0.88, 0.85, 0.84, 0.69, 0.68}, {2.38, 2.06, 2.36, 2.19, 1.99, 1.84, 1.83, 1.71, 1.73},
              {3.73, 2.88, 3.55, 3.88, 3.08, 2.94, 2.68, 2.35, 2.67}, {2.43, 2.04, 2.05, 2.08, 2.11, 1.97, 1.80, 1.87, 1.56},
              {2.25, 1.82, 2.22, 2.19, 1.95, 2.22, 2.06, 1.84, 1.87}, {2.12, 1.62, 1.86, 1.95, 1.98, 1.81, 2.18, 1.55, 1.58},
              {2.22, 1.58, 1.97, 2.05, 1.25, 1.83, 1.79, 2.13, 2.12}, {2.08, 1.73, 1.89, 1.87, 1.84, 1.62, 1.55, 1.43, 1.97}};
  const auto s = normalized_score(t);
  const bool ok = s[0] == 99.2 && s[3] == 92.1 && s[2] == 91.6;
  std::string d;
  for (std::size_t c = 0; c < s.size(); ++c) d += (c ? " " : "") + t.column_names[c] + "=" + fmt("%.1f", s[c]);
  return {ok, d};
}

// Trailing three-epoch mean of relative_return must reach 90% of the mean
// over the ten epochs before the switch, using post-switch epochs only. A
// plateau no better than random collaborators counts as no recovery.
bool recovered(const TeamingRun& run, int sw, int within, double* plateau_out, int* epochs_out) {
  std::vector<double> pre;
  for (int e = std::max(0, sw - 10); e < sw; ++e) pre.push_back(run.rows[e].relative_return);
  const double plateau = mean_of(pre);
  *plateau_out = plateau;
  *epochs_out = -1;
  if (!(plateau > 0.0)) return false;
  for (int e = sw + 2; e < sw + within && e < static_cast<int>(run.rows.size()); ++e) {
    const double m = (run.rows[e].relative_return + run.rows[e - 1].relative_return + run.rows[e - 2].relative_return) / 3.0;
    if (m >= 0.9 * plateau) {
      *epochs_out = e - sw + 1;
      return true;
    }
  }
  *epochs_out = -1;
  return false;
}

Outcome dynamic_recovery(const Bundle& b, const ExperimentConfig& cfg, const fs::path& work) {
  ExperimentConfig c = cfg;
  c.dynamic.switch_period = 20;
  c.teaming.epochs = 20 * static_cast<int>(c.dynamic.styles.size());
  const auto schedule = style_schedule(c, true);
  int seeds_ok = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto run = run_teaming(c, b, schedule, AblationMode::Full, 1000 + seed);
    {
      std::ofstream os(work / ("dynamic_seed" + std::to_string(seed) + ".csv"));
      write_metrics_csv(os, run.rows, b.reward.k);
    }
    bool all = true;
    int slowest = 0;
    for (int sw : run.switch_epochs) {
      double plateau = 0.0;
      int took = 0;
      const bool ok = recovered(run, sw, 10, &plateau, &took);
      all = all && ok;
      slowest = ok ? std::max(slowest, took) : 99;
    }
    seeds_ok += all;
    per += " s" + std::to_string(seed) + (all ? ":" + std::to_string(slowest) : ":no");
  }
  return {seeds_ok >= 4, std::to_string(seeds_ok) + "/5 seeds recover every switch within 10 epochs (slowest" + per +
                             ")"};
}

Outcome ablation(const Bundle& b, const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.dynamic.switch_period = 20;
  c.teaming.epochs = 20 * static_cast<int>(c.dynamic.styles.size());
  const auto schedule = style_schedule(c, true);
  std::vector<double> full, fix, online;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto avg = [&](AblationMode m) {
      const auto run = run_teaming(c, b, schedule, m, 2000 + seed);
      double s = 0.0;
      for (const auto& r : run.rows) s += r.mean_return;
      return s / run.rows.size();
    };
    full.push_back(avg(AblationMode::Full));
    fix.push_back(avg(AblationMode::FixB));
    online.push_back(avg(AblationMode::OnlineRl));
  }
  std::vector<double> d1, d2;
  for (std::size_t i = 0; i < full.size(); ++i) {
    d1.push_back(full[i] - fix[i]);
    d2.push_back(full[i] - online[i]);
  }
  const bool ok = mean_of(d1) > se_of(d1) && mean_of(d2) > se_of(d2);
  return {ok, "FULL " + fmt("%.3f", mean_of(full)) + ", FIX_B " + fmt("%.3f", mean_of(fix)) + ", ONLINE_RL " +
                  fmt("%.3f", mean_of(online)) + "; FULL-FIX_B " + fmt("%.3f", mean_of(d1)) + " (SE " +
                  fmt("%.3f", se_of(d1)) + "), FULL-ONLINE_RL " + fmt("%.3f", mean_of(d2)) + " (SE " +
                  fmt("%.3f", se_of(d2)) + ")"};
}

Outcome interpretability(const Bundle& b, const ExperimentConfig& cfg, const fs::path& work) {
  const auto& names = style_names();
  const std::size_t ns = names.size();
  std::vector<double> greedy(ns, 0.0), safety(ns, 0.0);
  std::ofstream os(work / "interpretability.csv");
  os << "seed,style,greedy_return,safety_return\n";
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (std::size_t s = 0; s < ns; ++s) {
      ExperimentConfig c = cfg;
      c.teaming.unknown_style = names[s];
      const auto run = run_teaming(c, b, style_schedule(c, false), AblationMode::Full, 3000 + 17 * seed + s);
      double g = 0.0, f = 0.0;
      for (const auto& r : run.rows) {
        g += r.component_returns[0];
        f += r.component_returns[1];
      }
      g /= run.rows.size();
      f /= run.rows.size();
      os << seed << ',' << names[s] << ',' << g << ',' << f << '\n';
      greedy[s] += g / 5.0;
      safety[s] += f / 5.0;
    }
  }
  std::vector<double> order(ns);
  std::iota(order.begin(), order.end(), 0.0);
  const double rg = spearman(order, greedy), rs = spearman(order, safety);
  std::string d = "rho(greedy)=" + fmt("%.2f", rg) + " rho(safety)=" + fmt("%.2f", rs) + "; greedy";
  for (double x : greedy) d += fmt(" %.3f", x);
  d += "; safety";
  for (double x : safety) d += fmt(" %.3f", x);
  return {rg == 1.0 && rs == -1.0, d};
}

Outcome policy_gradient() {
  // analytic score function against central differences of log pi
  double worst = 0.0;
  Rng rng(31);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int hidden : {0, 6}) {
    for (int trial = 0; trial < 20; ++trial) {
      GoalConditionedPolicy p(PolicyLayout{6, 2, kNumActions, hidden}, 0.95, PolicyRole::Stun);
      for (double& x : p.params()) x = 0.7 * n01(rng);
      std::vector<double> obs(6);
      for (double& x : obs) x = u(rng);
      const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      const std::vector<double> b{t, 1.0 - t};
      const int a = trial % kNumActions;
      const auto g = p.grad_log_prob(obs, b, a);
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double keep = p.params()[i];
        p.params()[i] = keep + 1e-5;
        const double hi = std::log(p.probabilities(obs, b)[a]);
        p.params()[i] = keep - 1e-5;
        const double lo = std::log(p.probabilities(obs, b)[a]);
        p.params()[i] = keep;
        const double fd = (hi - lo) / 2e-5;
        num += (g[i] - fd) * (g[i] - fd);
        den += fd * fd;
      }
      worst = std::max(worst, std::sqrt(num / den));
    }
  }

  // estimator mean against the finite-difference gradient of J on a one-step problem
  const std::vector<double> obs{0.3, -0.6};
  const LatentParams b({0.25, 0.75}, MixingKind::Linear);
  auto reward = [](int a) { return a == 0 ? 1.0 : 0.2; };
  GoalConditionedPolicy p(PolicyLayout{2, 2, 2, 0}, 0.95, PolicyRole::Stun);
  for (double& x : p.params()) x = 0.5 * n01(rng);
  auto value = [&] {
    const auto pr = p.probabilities(obs, b.values);
    return pr[0] * reward(0) + pr[1] * reward(1);
  };
  std::vector<double> fd(p.params().size());
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double keep = p.params()[i];
    p.params()[i] = keep + 1e-6;
    const double hi = value();
    p.params()[i] = keep - 1e-6;
    const double lo = value();
    p.params()[i] = keep;
    fd[i] = (hi - lo) / 2e-6;
  }
  const int batches = 50000;  // two rollouts each
  std::vector<double> mean(fd.size(), 0.0), sq(fd.size(), 0.0);
  Rng roll(77);
  for (int r = 0; r < batches; ++r) {
    RolloutBatch batch;
    for (int k = 0; k < 2; ++k) {
      Trajectory t;
      t.latent = b;
      const int a = p.act_index(obs, b.values, roll);
      t.obs.push_back(obs);
      t.actions.push_back(a);
      t.rewards.push_back(reward(a));
      batch.trajectories.push_back(std::move(t));
    }
    const auto d = estimate_policy_gradient(p, batch);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      mean[i] += d.gradient[i];
      sq[i] += d.gradient[i] * d.gradient[i];
    }
  }
  double worst_z = 0.0;
  bool within = true;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    mean[i] /= batches;
    const double se = std::sqrt(std::max(sq[i] / batches - mean[i] * mean[i], 0.0) / batches);
    const double err = std::abs(mean[i] - fd[i]);
    within = within && err <= 3.0 * se + 1e-9;
    if (se > 0.0) worst_z = std::max(worst_z, err / se);
  }
  return {worst <= 1e-5 && within, "score-function relative error " + fmt("%.2e", worst) +
                                       ", estimator vs FD over 1e5 rollouts worst |z| " + fmt("%.2f", worst_z)};
}

// ---------------------------------------------------------------------------

Bundle obtain_bundle(ExperimentConfig cfg, const fs::path& work) {
  cfg.out_dir = work / "bundle";
  cfg.bundle_dir.clear();
  const auto manifest = cfg.out_dir / kManifestFile;
  if (fs::exists(manifest)) {
    try {
      std::ifstream in(manifest);
      json stored = json::parse(in).at("config"), wanted = json::parse(cfg.to_json_text());
      for (auto* j : {&stored, &wanted}) {
        j->erase("out_dir");
        j->erase("bundle_dir");
      }
      if (stored == wanted) {
        std::cout << "[acceptance] reusing bundle in " << cfg.out_dir.string() << std::endl;
        return load_bundle(cfg.out_dir);
      }
    } catch (const std::exception& e) {
      std::cout << "[acceptance] cached bundle unusable (" << e.what() << "), retraining" << std::endl;
    }
  }
  std::cout << "[acceptance] pre-training bundle into " << cfg.out_dir.string() << std::endl;
  return run_pretrain(cfg, [](const std::string& m) { std::cout << "[acceptance] " << m << std::endl; });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string config_path, work_dir = "acceptance_work";
  app.add_option("--config", config_path, "experiment config for the pre-trained bundle")->required();
  app.add_option("--work-dir", work_dir, "bundle cache and CSV output");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = ExperimentConfig::load(config_path);
    const fs::path work(work_dir);
    fs::create_directories(work);

    std::optional<Bundle> bundle;
    auto need = [&]() -> const Bundle& {
      if (!bundle) bundle = obtain_bundle(cfg, work);
      return *bundle;
    };

    struct Criterion {
      const char* name;
      std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {"kdbil-oracle-equivalence", [] { return oracle_equivalence(); }},
        {"normalized-score", [] { return normalized_score_row(); }},
        {"policy-gradient-correctness", [] { return policy_gradient(); }},
        {"q-learning-unbiased-vs-biased", [&] { return theorem1(cfg); }},
        {"kdbil-identifiability", [&] { return identifiability(need(), cfg, work); }},
        {"estimator-unbiasedness", [&] { return unbiasedness(need(), cfg); }},
        {"dynamic-adaptation", [&] { return dynamic_recovery(need(), cfg, work); }},
        {"ablation-ordering", [&] { return ablation(need(), cfg); }},
        {"behavior-interpretability", [&] { return interpretability(need(), cfg, work); }},
    };

    int failed = 0;
    for (const auto& c : criteria) {
      const auto t0 = std::chrono::steady_clock::now();
      Outcome o;
      try {
        o = c.run();
      } catch (const std::exception& e) {
        o = {false, std::string("error: ") + e.what()};
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      failed += !o.pass;
      std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << fmt("%.1f", secs) << " s]"
                << std::endl;
    }
    return failed == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << '\n';
    return 2;
  }
}
