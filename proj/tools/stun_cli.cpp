// Command-line front end: pretrain, team, dynamic, ablate, theorem1, score,
// export-posterior.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "stun/harness.hpp"

namespace fs = std::filesystem;
using namespace stun;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

ExperimentConfig resolve(const Common& c, ExperimentKind kind) {
  ExperimentConfig cfg;
  try {
    cfg = c.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config_path);
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
  cfg.kind = kind;
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

void log_line(const std::string& s) { std::cerr << "[stun] " << s << '\n'; }

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw StageError("write", "cannot open " + p.string());
  return os;
}

void run_team_like(const ExperimentConfig& cfg, bool dynamic) {
  const Bundle bundle = load_bundle(cfg.bundle_path());
  const auto schedule = style_schedule(cfg, dynamic);
  const auto run = run_teaming(cfg, bundle, schedule, AblationMode::Full, cfg.seed);
  const auto path = cfg.out_dir / (dynamic ? "dynamic_metrics.csv" : "team_metrics.csv");
  auto os = open_out(path);
  write_metrics_csv(os, run.rows, bundle.reward.k);
  double mean = 0.0;
  for (const auto& r : run.rows) mean += r.mean_return;
  log_line("wrote " + path.string() + "; mean return " + std::to_string(mean / run.rows.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-reward inference and zero-shot teaming experiments"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "override the config seed");
    sub->add_option("--out-dir", common.out_dir, "output directory");
  };

  auto* pre = app.add_subcommand("pretrain", "pre-train policies, build the demonstration set, fit the debiaser");
  auto* team = app.add_subcommand("team", "zero-shot teaming with a static unknown agent");
  auto* dyn = app.add_subcommand("dynamic", "teaming with an unknown agent that switches style periodically");
  auto* abl = app.add_subcommand("ablate", "full method vs fixed latent vs on-line policy gradient");
  auto* thm = app.add_subcommand("theorem1", "Q-learning with unbiased and biased reward estimates");
  auto* score = app.add_subcommand("score", "unknown-agent by collaborator return matrix");
  auto* exp = app.add_subcommand("export-posterior", "posterior heatmap over the latent grid");
  int window_pairs = 300;
  exp->add_option("--window", window_pairs, "observed pairs per row");
  for (auto* s : {pre, team, dyn, abl, thm, score, exp}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (pre->parsed()) {
      const auto cfg = resolve(common, ExperimentKind::Pretrain);
      run_pretrain(cfg, log_line);
      log_line("bundle written to " + cfg.out_dir.string());
    } else if (team->parsed()) {
      run_team_like(resolve(common, ExperimentKind::Teaming), false);
    } else if (dyn->parsed()) {
      run_team_like(resolve(common, ExperimentKind::Dynamic), true);
    } else if (abl->parsed()) {
      const auto cfg = resolve(common, ExperimentKind::Ablation);
      const Bundle bundle = load_bundle(cfg.bundle_path());
      const auto schedule = style_schedule(cfg, true);
      for (auto mode : cfg.ablation.modes) {
        const auto run = run_teaming(cfg, bundle, schedule, mode, cfg.seed);
        const auto path = cfg.out_dir / (std::string("ablation_") + to_string(mode) + ".csv");
        auto os = open_out(path);
        write_metrics_csv(os, run.rows, bundle.reward.k);
        double mean = 0.0;
        for (const auto& r : run.rows) mean += r.mean_return;
        log_line(std::string(to_string(mode)) + ": mean return " + std::to_string(mean / run.rows.size()));
      }
    } else if (thm->parsed()) {
      const auto cfg = resolve(common, ExperimentKind::Theorem1);
      const auto rep = run_theorem1(cfg.theorem);
      auto os = open_out(cfg.out_dir / "bias_gap.csv");
      lab::write_bias_gap_csv(os, rep.bias_rows);
      auto tr = open_out(cfg.out_dir / "unbiased_trace.csv");
      tr << "seed,step,sup_norm_gap\n";
      for (std::size_t i = 0; i < rep.unbiased_traces.size(); ++i) {
        for (const auto& [step, gap] : rep.unbiased_traces[i]) tr << cfg.theorem.seeds[i] << ',' << step << ',' << gap << '\n';
      }
      for (std::size_t i = 0; i < rep.unbiased_final_gaps.size(); ++i) {
        log_line("unbiased seed " + std::to_string(cfg.theorem.seeds[i]) + ": final gap " +
                 std::to_string(rep.unbiased_final_gaps[i]));
      }
      for (const auto& [beta, gap] : lab::mean_gap_by_beta(rep.bias_rows)) {
        log_line("beta " + std::to_string(beta) + ": mean gap " + std::to_string(gap));
      }
    } else if (score->parsed()) {
      const auto cfg = resolve(common, ExperimentKind::Score);
      const Bundle bundle = load_bundle(cfg.bundle_path());
      const auto res = run_score_matrix(cfg, bundle);
      auto os = open_out(cfg.out_dir / "score_matrix.csv");
      write_score_csv(os, res);
      if (res.normalized.empty()) log_line("no normalized score: some unknown agent has no collaborator above random");
      for (std::size_t c = 0; c < res.normalized.size(); ++c) {
        log_line(res.raw.column_names[c] + ": " + std::to_string(res.normalized[c]));
      }
    } else if (exp->parsed()) {
      const auto cfg = resolve(common, ExperimentKind::Teaming);
      const Bundle bundle = load_bundle(cfg.bundle_path());
      Rng rng(cfg.seed);
      const auto rows = posterior_heatmap(bundle, cfg.kdbil, window_pairs, rng);
      auto os = open_out(cfg.out_dir / "posterior_heatmap.csv");
      write_heatmap_csv(os, bundle.grid, rows);
      log_line("wrote " + (cfg.out_dir / "posterior_heatmap.csv").string());
    }
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage() << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error [run]: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
