#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stun/harness.hpp"

using namespace stun;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config() {
  auto c = ExperimentConfig::load(fs::path(STUN_SOURCE_DIR) / "configs" / "smoke.json");
  c.marl.episodes = 200;
  c.debiaser.enabled = true;
  c.debiaser.pairs = 100;
  c.debiaser.window_pairs = 40;
  c.debiaser.probes = 16;
  c.debiaser.train.epochs = 30;
  c.teaming.epochs = 6;
  c.teaming.episodes_per_epoch = 2;
  c.dynamic.switch_period = 2;
  c.dynamic.reference_episodes = 5;
  c.score.episodes_per_cell = 3;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("stun_harness_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string policy_bytes(const Bundle& b) {
  std::ostringstream os(std::ios::binary);
  save_policies(os, b);
  return os.str();
}

const Bundle& shared_bundle() {
  static const Bundle b = pretrain_bundle(small_config());
  return b;
}

}  // namespace

TEST_CASE("config round trip and validation") {
  const auto c = small_config();
  const auto text = c.to_json_text();
  CHECK(ExperimentConfig::from_json_text(text).to_json_text() == text);
  CHECK(ExperimentConfig::from_json_text("{}").to_json_text() == ExperimentConfig{}.to_json_text());
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"sed": 3})"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"marl": {"episodez": 3}})"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"seed": "x"})"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text("{"), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text(R"({"kind": "nap"})"), std::invalid_argument);
  auto bad = c;
  bad.dynamic.switch_period = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.teaming.unknown_checkpoint = "/nonexistent/bundle";
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent.json"), std::invalid_argument);
  CHECK(experiment_kind_from_string(to_string(ExperimentKind::Dynamic)) == ExperimentKind::Dynamic);
  CHECK(estimator_from_string(to_string(Estimator::Map)) == Estimator::Map);
  CHECK(ablation_mode_from_string(to_string(AblationMode::OnlineRl)) == AblationMode::OnlineRl);
}

TEST_CASE("normalized score") {
  ScoreTable t;
  t.values = {{1.10, 1.04, 1.04, 0.99, 0.88, 0.85, 0.84, 0.69, 0.68}, {2.38, 2.06, 2.36, 2.19, 1.99, 1.84, 1.83, 1.71, 1.73},
              {3.73, 2.88, 3.55, 3.88, 3.08, 2.94, 2.68, 2.35, 2.67}, {2.43, 2.04, 2.05, 2.08, 2.11, 1.97, 1.80, 1.87, 1.56},
              {2.25, 1.82, 2.22, 2.19, 1.95, 2.22, 2.06, 1.84, 1.87}, {2.12, 1.62, 1.86, 1.95, 1.98, 1.81, 2.18, 1.55, 1.58},
              {2.22, 1.58, 1.97, 2.05, 1.25, 1.83, 1.79, 2.13, 2.12}, {2.08, 1.73, 1.89, 1.87, 1.84, 1.62, 1.55, 1.43, 1.97}};
  const auto s = normalized_score(t);
  REQUIRE(s.size() == 9);
  CHECK(s[0] == 99.2);
  CHECK(s[2] == 91.6);
  CHECK(s[3] == 92.1);

  CHECK(normalized_score(ScoreTable{{}, {}, {{2.0, 1.0}}}) == std::vector<double>{100.0, 50.0});
  CHECK(normalized_score(ScoreTable{{}, {}, {{3.0, 1.0}, {5.0, 4.0}}})[0] == 100.0);

  auto scaled = t;
  for (double& x : scaled.values[4]) x *= 17.5;
  CHECK(normalized_score(scaled) == s);

  CHECK_THROWS_AS(normalized_score(ScoreTable{}), std::invalid_argument);
  CHECK_THROWS_AS(normalized_score(ScoreTable{{}, {}, {{1.0, 2.0}, {1.0}}}), std::invalid_argument);
  CHECK_THROWS_AS(normalized_score(ScoreTable{{}, {}, {{-1.0, 0.0}}}), std::invalid_argument);
}

TEST_CASE("pretrain writes a verified bundle") {
  auto c = small_config();
  c.out_dir = scratch("pretrain") / "nested" / "dir";
  run_pretrain(c);
  for (const char* f : {kPoliciesFile, kDatasetFile, kDebiaserFile, kManifestFile}) CHECK(fs::exists(c.out_dir / f));
  const auto first = slurp(c.out_dir / kManifestFile);
  run_pretrain(c);
  CHECK(slurp(c.out_dir / kManifestFile) == first);

  const Bundle b = load_bundle(c.out_dir);
  CHECK(b.debiaser.has_value());
  CHECK(b.grid.size() == 25);
  CHECK(policy_bytes(b) == policy_bytes(shared_bundle()));

  {
    std::fstream f(c.out_dir / kDatasetFile, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  CHECK_THROWS(load_bundle(c.out_dir));
  fs::remove(c.out_dir / kManifestFile);
  CHECK_THROWS(load_bundle(c.out_dir));
  fs::remove_all(scratch("pretrain"));
}

TEST_CASE("file hash") {
  const auto p = scratch("hash");
  fs::create_directories(p);
  std::ofstream(p / "a") << "a";
  CHECK(file_hash(p / "a") == "af63dc4c8601ec8c");  // FNV-1a 64 of "a"
  std::ofstream(p / "e").close();
  CHECK(file_hash(p / "e") == "cbf29ce484222325");
  CHECK_THROWS(file_hash(p / "missing"));
  fs::remove_all(p);
}

TEST_CASE("style schedule") {
  auto c = small_config();
  const auto fixed = style_schedule(c, false);
  REQUIRE(fixed.size() == 6);
  for (const auto& l : fixed) CHECK(l == fixed.front());
  const auto dyn = style_schedule(c, true);
  REQUIRE(dyn.size() == 6);
  CHECK(dyn[0] == dyn[1]);
  CHECK_FALSE(dyn[1] == dyn[2]);
  CHECK(dyn[2] == dyn[3]);
  CHECK(dyn[0] == style_latent("safest", 2, MixingKind::Linear));
  CHECK(dyn[2] == style_latent("greediest", 2, MixingKind::Linear));
}

TEST_CASE("zero-shot teaming leaves policies untouched") {
  const auto c = small_config();
  const Bundle& b = shared_bundle();
  const auto before = policy_bytes(b);
  for (AblationMode mode : {AblationMode::Full, AblationMode::FixB}) {
    const auto run = run_teaming(c, b, style_schedule(c, true), mode, 3);
    CHECK(policy_bytes(b) == before);
    REQUIRE(run.rows.size() == 6);
    for (std::size_t i = 0; i < run.rows.size(); ++i) {
      CHECK(run.rows[i].epoch == static_cast<int>(i));
      CHECK(std::isfinite(run.rows[i].mean_return));
      CHECK(run.rows[i].estimate.size() == 2);
    }
    CHECK(run.switch_epochs == std::vector<int>{2, 4});
  }
  const auto a = run_teaming(c, b, style_schedule(c, false), AblationMode::Full, 9);
  const auto a2 = run_teaming(c, b, style_schedule(c, false), AblationMode::Full, 9);
  CHECK(a.rows.back().mean_return == a2.rows.back().mean_return);
  CHECK(a.rows.back().estimate == a2.rows.back().estimate);

  const auto online = run_teaming(c, b, style_schedule(c, false), AblationMode::OnlineRl, 3);
  CHECK(online.rows.size() == 6);
  CHECK(policy_bytes(b) == before);  // fine-tuning works on a copy

  Bundle none = b;
  none.n_unknown = 0;
  CHECK_THROWS_AS(run_teaming(c, none, style_schedule(c, false), AblationMode::Full, 1), StageError);
  auto other = c;
  other.reward.kind = MixingKind::Nonlinear;
  CHECK_THROWS_AS(run_teaming(other, b, style_schedule(c, false), AblationMode::Full, 1), StageError);
}

TEST_CASE("metrics csv") {
  std::vector<MetricsRow> rows(2);
  rows[0].epoch = 0;
  rows[1].epoch = 1;
  rows[1].mean_return = -2.5;
  rows[1].estimate = {0.25, 0.75};
  std::ostringstream os;
  write_metrics_csv(os, rows, 2);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == kMetricsSchema);
  std::getline(in, line);
  CHECK(line ==
        "epoch,mean_return,relative_return,component0,component1,estimate0,estimate1,truth0,truth1,posterior_entropy,"
        "wall_seconds");
  std::getline(in, line);
  CHECK(line.rfind("0,", 0) == 0);
  std::getline(in, line);
  CHECK(line.rfind("1,-2.5,0,0,0,0.25,0.75,", 0) == 0);
}

TEST_CASE("posterior heatmap") {
  const Bundle& b = shared_bundle();
  auto kd = small_config().kdbil;
  Rng rng(4);
  const auto rows = posterior_heatmap(b, kd, 20, rng);
  REQUIRE(rows.size() == b.grid.size());
  for (const auto& r : rows) {
    REQUIRE(r.size() == b.grid.size());
    double s = 0.0;
    for (double p : r) s += p;
    CHECK(s == doctest::Approx(1.0));
  }
  std::ostringstream os;
  write_heatmap_csv(os, b.grid, rows);
  const std::string csv = os.str();
  CHECK(csv.rfind("true_index,true_b0,true_b1,p0,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 26);
}

TEST_CASE("score matrix") {
  auto c = small_config();
  c.score.unknown_styles = {"safest", "balanced", "greediest"};
  c.score.collaborators = {"stun", "fixed:safest", "random"};
  const auto r = run_score_matrix(c, shared_bundle());
  REQUIRE(r.raw.values.size() == 3);
  for (const auto& row : r.raw.values) CHECK(row.size() == 3);
  CHECK(r.random_baseline.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(r.shifted.values[i][j] == doctest::Approx(r.raw.values[i][j] - r.random_baseline[i]));
    }
  }
  const auto again = run_score_matrix(c, shared_bundle());
  CHECK(again.raw.values == r.raw.values);
  std::ostringstream os;
  write_score_csv(os, r);
  CHECK(os.str().rfind("unknown,random_baseline,stun,fixed:safest,random\n", 0) == 0);
  // the random column equals the baseline cell-for-cell only in distribution, so no row need be positive
  if (!r.normalized.empty()) CHECK(r.normalized.size() == 3);
  c.score.collaborators = {"fixed:nobody"};
  CHECK_THROWS(run_score_matrix(c, shared_bundle()));
}

TEST_CASE("theorem report") {
  TheoremSettings s;
  s.n_states = 3;
  s.n_actions = 2;
  s.steps = 20000;
  s.seeds = {1, 2};
  s.betas = {0.0, 0.5};
  const auto r = run_theorem1(s);
  CHECK(r.unbiased_final_gaps.size() == 2);
  CHECK(r.unbiased_traces.size() == 2);
  CHECK(r.bias_rows.size() == 4);
  CHECK(r.q_star.size() == 6);
}
