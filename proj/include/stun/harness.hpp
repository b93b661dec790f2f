#pragma once

// Experiment orchestration: pre-training bundles, zero-shot teaming runs with
// on-line inference, ablations, the score matrix and the Q-learning lab.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stun/goal_policy.hpp"
#include "stun/kd_bil.hpp"
#include "stun/kd_bil_dataset.hpp"
#include "stun/reward_estimator.hpp"
#include "stun/theorem_lab.hpp"

namespace stun {

enum class ExperimentKind { Pretrain, Teaming, Dynamic, Ablation, Theorem1, Score };
const char* to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& s);

enum class Estimator { Debiased, Mean, Map };
const char* to_string(Estimator e);
Estimator estimator_from_string(const std::string& s);

enum class AblationMode { Full, FixB, OnlineRl };
const char* to_string(AblationMode m);
AblationMode ablation_mode_from_string(const std::string& s);

struct KdBilSettings {
  Bandwidths bandwidths;
  int grid_resolution = 0;  // 0: default_grid_resolution
  int demos_per_latent = 120;
  int demo_stride = 4;
  std::size_t window_capacity = 300;
};

struct DebiaserSettings {
  bool enabled = true;
  int pairs = 200;
  int window_pairs = 300;  // observed pairs behind each training posterior
  int probes = 64;
  DebiaserConfig train;
};

struct TeamingSettings {
  std::string unknown_style = "balanced";
  std::string unknown_checkpoint;  // optional policies bundle whose surrogate plays the unknown slots
  int epochs = 60;
  int episodes_per_epoch = 4;
  int steps_per_episode = 25;
  Estimator estimator = Estimator::Debiased;
};

struct DynamicSettings {
  int switch_period = 20;
  std::vector<std::string> styles = {"safest", "greediest", "safety-biased", "greed-biased", "balanced"};
  int reference_episodes = 200;  // per style, for the oracle-conditioned reference return
};

struct AblationSettings {
  std::vector<AblationMode> modes = {AblationMode::Full, AblationMode::FixB, AblationMode::OnlineRl};
  std::string fixed_style = "balanced";
  int online_updates_per_epoch = 1;
  double online_learning_rate = 0.001;
};

struct ScoreSettings {
  std::vector<std::string> unknown_styles = {"safest", "balanced", "greediest"};
  // "stun", "multitask", "random" or "fixed:<style>"
  std::vector<std::string> collaborators = {"stun", "fixed:safest", "fixed:balanced", "fixed:greediest", "multitask"};
  int episodes_per_cell = 40;
};

struct TheoremSettings {
  int n_states = 5;
  int n_actions = 3;
  double gamma = 0.9;
  std::uint64_t mdp_seed = 11;
  long long steps = 10000000;
  double omega = 0.7;
  double epsilon = 0.2;
  double noise_half_width = 1.0;
  std::vector<double> betas = {0.0, 0.25, 0.5, 1.0};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Pretrain;
  EnvConfig env;
  RewardConfig reward;
  MarlConfig marl;
  KdBilSettings kdbil;
  DebiaserSettings debiaser;
  TeamingSettings teaming;
  DynamicSettings dynamic;
  AblationSettings ablation;
  ScoreSettings score;
  TheoremSettings theorem;
  std::filesystem::path out_dir = "out";
  std::filesystem::path bundle_dir;  // empty: same as out_dir
  std::uint64_t seed = 0;

  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_json_text() const;
  void validate() const;
  std::filesystem::path bundle_path() const { return bundle_dir.empty() ? out_dir : bundle_dir; }
};

/// Error raised by the orchestration layer, tagged with the failing stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct Bundle {
  EnvConfig env;
  RewardConfig reward;
  int n_unknown = 1;
  std::vector<GoalConditionedPolicy> stun;
  std::vector<GoalConditionedPolicy> surrogate;
  GoalConditionedPolicy multitask;
  std::vector<LatentParams> grid;
  TrainingDataset dataset;
  std::optional<Debiaser> debiaser;
};

inline constexpr const char* kPoliciesFile = "policies.bin";
inline constexpr const char* kDatasetFile = "kdbil_dataset.bin";
inline constexpr const char* kDebiaserFile = "debiaser.bin";
inline constexpr const char* kManifestFile = "manifest.json";

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

void save_policies(std::ostream& os, const Bundle& b);
void load_policies(std::istream& is, Bundle& b);

/// Pre-trains, builds the demonstration dataset over the latent grid, trains
/// the debiaser and writes the four artifact files. Errors carry the stage.
Bundle run_pretrain(const ExperimentConfig& config, const std::function<void(const std::string&)>& log = {});
/// Same, without touching the filesystem.
Bundle pretrain_bundle(const ExperimentConfig& config, const std::function<void(const std::string&)>& log = {});
Bundle load_bundle(const std::filesystem::path& dir);
void save_bundle(const Bundle& b, const ExperimentConfig& config, const std::filesystem::path& dir);

/// Component vectors observed along rollouts of the surrogate at random styles.
std::vector<RewardComponents> collect_probe_components(const Bundle& b, int count, Rng& rng);
/// (posterior summary, true latent) pairs: latents from the prior, windows
/// observed from the surrogate playing with STUN teammates conditioned on it.
std::vector<DebiasPair> collect_debias_pairs(const Bundle& b, const KdBilSettings& kd, int pairs, int window_pairs,
                                             Rng& rng);

/// Posterior for an unknown agent of latent `truth` after observing
/// `window_pairs` of its (obs, action) pairs.
Posterior observe_and_infer(const Bundle& b, const KdBilSettings& kd, const LatentParams& truth, int window_pairs,
                            Rng& rng);
/// Row r: posterior over the grid when the unknown agent plays grid[r].
std::vector<std::vector<double>> posterior_heatmap(const Bundle& b, const KdBilSettings& kd, int window_pairs,
                                                   Rng& rng);
void write_heatmap_csv(std::ostream& os, const std::vector<LatentParams>& grid,
                       const std::vector<std::vector<double>>& rows);

struct MetricsRow {
  int epoch = 0;
  double mean_return = 0.0;
  double relative_return = 0.0;  // (mean - random floor) / (reference - random floor); 1 is oracle conditioning
  std::vector<double> component_returns;
  std::vector<double> estimate;
  std::vector<double> truth;
  double posterior_entropy = 0.0;
  double wall_seconds = 0.0;
};

inline constexpr const char* kMetricsSchema = "# stun metrics v1";
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, int k);

/// Unknown-agent latent per epoch: a fixed style, or a schedule switching
/// every `switch_period` epochs through `styles`.
std::vector<LatentParams> style_schedule(const ExperimentConfig& config, bool dynamic);

struct TeamingRun {
  std::vector<MetricsRow> rows;
  std::vector<int> switch_epochs;  // epochs where the unknown latent changed
};

/// Zero-shot teaming: every epoch re-infers the latent from the window,
/// conditions the STUN policies on it, plays the epoch's episodes and logs one
/// row. Policy parameters are never modified in Full and FixB modes.
TeamingRun run_teaming(const ExperimentConfig& config, const Bundle& bundle, const std::vector<LatentParams>& schedule,
                       AblationMode mode, std::uint64_t seed);

/// Mean team return with STUN policies conditioned on the true latent, per
/// style in `styles` (the oracle-conditioning reference used by relative_return).
/// `collaborator` replaces the STUN policy when given.
std::vector<double> reference_returns(const Bundle& bundle, const std::vector<LatentParams>& styles,
                                      int episodes, int steps, std::uint64_t seed,
                                      const GoalConditionedPolicy* unknown = nullptr,
                                      const GoalConditionedPolicy* collaborator = nullptr);

struct ScoreTable {
  std::vector<std::string> row_names;
  std::vector<std::string> column_names;
  std::vector<std::vector<double>> values;
};

/// Per row 100 * entry / row max, averaged over rows, rounded to one decimal.
/// Rejects empty or ragged tables and rows whose maximum is not positive.
std::vector<double> normalized_score(const ScoreTable& table);

/// Raw mean returns for every (unknown style, collaborator) cell, and the same
/// table shifted per row by the all-random team's return so that entries are
/// improvements over random play.
struct ScoreMatrixResult {
  ScoreTable raw;
  ScoreTable shifted;
  std::vector<double> random_baseline;
  std::vector<double> normalized;  // empty when some row has no collaborator above random play
};
ScoreMatrixResult run_score_matrix(const ExperimentConfig& config, const Bundle& bundle);
void write_score_csv(std::ostream& os, const ScoreMatrixResult& r);

struct TheoremReport {
  lab::FiniteMDP mdp;
  lab::QTable q_star;
  std::vector<double> unbiased_final_gaps;  // per seed
  std::vector<std::vector<std::pair<long long, double>>> unbiased_traces;
  std::vector<lab::BiasGapRow> bias_rows;
};
TheoremReport run_theorem1(const TheoremSettings& s);

}  // namespace stun
