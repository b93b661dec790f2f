#include "stun/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "stun/binary_io.hpp"

namespace stun {

using json = nlohmann::json;

const char* to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Pretrain: return "pretrain";
    case ExperimentKind::Teaming: return "team";
    case ExperimentKind::Dynamic: return "dynamic";
    case ExperimentKind::Ablation: return "ablate";
    case ExperimentKind::Theorem1: return "theorem1";
    case ExperimentKind::Score: return "score";
  }
  return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::Pretrain, ExperimentKind::Teaming, ExperimentKind::Dynamic, ExperimentKind::Ablation,
                 ExperimentKind::Theorem1, ExperimentKind::Score}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown experiment kind '" + s + "'");
}

const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::Debiased: return "debiased";
    case Estimator::Mean: return "mean";
    case Estimator::Map: return "map";
  }
  return "?";
}

Estimator estimator_from_string(const std::string& s) {
  for (auto e : {Estimator::Debiased, Estimator::Mean, Estimator::Map}) {
    if (s == to_string(e)) return e;
  }
  throw std::invalid_argument("unknown estimator '" + s + "'");
}

const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::Full: return "full";
    case AblationMode::FixB: return "fix_b";
    case AblationMode::OnlineRl: return "online_rl";
  }
  return "?";
}

AblationMode ablation_mode_from_string(const std::string& s) {
  for (auto m : {AblationMode::Full, AblationMode::FixB, AblationMode::OnlineRl}) {
    if (s == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown ablation mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return it.key() == a; })) {
      throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
    }
  }
}

template <typename T>
void opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  ExperimentConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    check_keys(j, {"kind", "seed", "out_dir", "bundle_dir", "env", "reward", "marl", "kdbil", "debiaser", "teaming",
                   "dynamic", "ablation", "score", "theorem"},
               "config");
    if (j.contains("kind")) c.kind = experiment_kind_from_string(j["kind"].get<std::string>());
    opt(j, "seed", c.seed);
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("bundle_dir")) c.bundle_dir = j["bundle_dir"].get<std::string>();
    if (j.contains("env")) {
      const auto& e = j["env"];
      check_keys(e, {"map_size", "n_prey", "n_predators", "resource_radius", "predation_radius", "step_size",
                     "episode_length", "seed"},
                 "env");
      opt(e, "map_size", c.env.map_size);
      opt(e, "n_prey", c.env.n_prey);
      opt(e, "n_predators", c.env.n_predators);
      opt(e, "resource_radius", c.env.resource_radius);
      opt(e, "predation_radius", c.env.predation_radius);
      opt(e, "step_size", c.env.step_size);
      opt(e, "episode_length", c.env.episode_length);
      opt(e, "seed", c.env.seed);
    }
    if (j.contains("reward")) {
      const auto& r = j["reward"];
      check_keys(r, {"k", "kind", "nonlinear_mode", "safety_proportional", "softmax_beta"}, "reward");
      opt(r, "k", c.reward.k);
      if (r.contains("kind")) c.reward.kind = mixing_kind_from_string(r["kind"].get<std::string>());
      if (r.contains("nonlinear_mode")) {
        c.reward.nonlinear_mode = nonlinear_mode_from_string(r["nonlinear_mode"].get<std::string>());
      }
      opt(r, "safety_proportional", c.reward.safety_proportional);
      opt(r, "softmax_beta", c.reward.softmax_beta);
    }
    if (j.contains("marl")) {
      const auto& m = j["marl"];
      check_keys(m, {"episodes", "learning_rate", "gamma", "batch_episodes", "train_episode_length", "n_unknown",
                     "hidden_width", "shared_reward", "per_agent_params", "train_multitask", "max_grad_norm", "entropy_coef",
                     "optimizer", "hidden_init_std", "baseline", "critic_hidden", "critic_learning_rate",
                     "critic_steps", "gae_lambda"},
                 "marl");
      opt(m, "episodes", c.marl.episodes);
      opt(m, "learning_rate", c.marl.learning_rate);
      opt(m, "gamma", c.marl.gamma);
      opt(m, "batch_episodes", c.marl.batch_episodes);
      opt(m, "train_episode_length", c.marl.train_episode_length);
      opt(m, "n_unknown", c.marl.n_unknown);
      opt(m, "hidden_width", c.marl.hidden_width);
      opt(m, "shared_reward", c.marl.shared_reward);
      opt(m, "per_agent_params", c.marl.per_agent_params);
      opt(m, "train_multitask", c.marl.train_multitask);
      opt(m, "max_grad_norm", c.marl.max_grad_norm);
      opt(m, "entropy_coef", c.marl.entropy_coef);
      opt(m, "optimizer", c.marl.optimizer);
      opt(m, "baseline", c.marl.baseline);
      opt(m, "critic_hidden", c.marl.critic_hidden);
      opt(m, "critic_learning_rate", c.marl.critic_learning_rate);
      opt(m, "critic_steps", c.marl.critic_steps);
      opt(m, "gae_lambda", c.marl.gae_lambda);
      opt(m, "hidden_init_std", c.marl.hidden_init_std);
    }
    if (j.contains("kdbil")) {
      const auto& k = j["kdbil"];
      check_keys(k, {"h", "h_prime", "grid_resolution", "demos_per_latent", "demo_stride", "window_capacity"}, "kdbil");
      opt(k, "h", c.kdbil.bandwidths.h);
      opt(k, "h_prime", c.kdbil.bandwidths.h_prime);
      opt(k, "grid_resolution", c.kdbil.grid_resolution);
      opt(k, "demos_per_latent", c.kdbil.demos_per_latent);
      opt(k, "demo_stride", c.kdbil.demo_stride);
      opt(k, "window_capacity", c.kdbil.window_capacity);
    }
    if (j.contains("debiaser")) {
      const auto& d = j["debiaser"];
      check_keys(d, {"enabled", "pairs", "window_pairs", "probes", "epochs", "learning_rate", "holdout_fraction", "seed"},
                 "debiaser");
      opt(d, "enabled", c.debiaser.enabled);
      opt(d, "pairs", c.debiaser.pairs);
      opt(d, "window_pairs", c.debiaser.window_pairs);
      opt(d, "probes", c.debiaser.probes);
      opt(d, "epochs", c.debiaser.train.epochs);
      opt(d, "learning_rate", c.debiaser.train.learning_rate);
      opt(d, "holdout_fraction", c.debiaser.train.holdout_fraction);
      opt(d, "seed", c.debiaser.train.seed);
    }
    if (j.contains("teaming")) {
      const auto& t = j["teaming"];
      check_keys(t, {"unknown_style", "unknown_checkpoint", "epochs", "episodes_per_epoch", "steps_per_episode",
                     "estimator"},
                 "teaming");
      opt(t, "unknown_style", c.teaming.unknown_style);
      opt(t, "unknown_checkpoint", c.teaming.unknown_checkpoint);
      opt(t, "epochs", c.teaming.epochs);
      opt(t, "episodes_per_epoch", c.teaming.episodes_per_epoch);
      opt(t, "steps_per_episode", c.teaming.steps_per_episode);
      if (t.contains("estimator")) c.teaming.estimator = estimator_from_string(t["estimator"].get<std::string>());
    }
    if (j.contains("dynamic")) {
      const auto& d = j["dynamic"];
      check_keys(d, {"switch_period", "styles", "reference_episodes"}, "dynamic");
      opt(d, "switch_period", c.dynamic.switch_period);
      opt(d, "styles", c.dynamic.styles);
      opt(d, "reference_episodes", c.dynamic.reference_episodes);
    }
    if (j.contains("ablation")) {
      const auto& a = j["ablation"];
      check_keys(a, {"modes", "fixed_style", "online_updates_per_epoch", "online_learning_rate"}, "ablation");
      if (a.contains("modes")) {
        c.ablation.modes.clear();
        for (const auto& m : a["modes"]) c.ablation.modes.push_back(ablation_mode_from_string(m.get<std::string>()));
      }
      opt(a, "fixed_style", c.ablation.fixed_style);
      opt(a, "online_updates_per_epoch", c.ablation.online_updates_per_epoch);
      opt(a, "online_learning_rate", c.ablation.online_learning_rate);
    }
    if (j.contains("score")) {
      const auto& s = j["score"];
      check_keys(s, {"unknown_styles", "collaborators", "episodes_per_cell"}, "score");
      opt(s, "unknown_styles", c.score.unknown_styles);
      opt(s, "collaborators", c.score.collaborators);
      opt(s, "episodes_per_cell", c.score.episodes_per_cell);
    }
    if (j.contains("theorem")) {
      const auto& t = j["theorem"];
      check_keys(t, {"n_states", "n_actions", "gamma", "mdp_seed", "steps", "omega", "epsilon", "noise_half_width",
                     "betas", "seeds"},
                 "theorem");
      opt(t, "n_states", c.theorem.n_states);
      opt(t, "n_actions", c.theorem.n_actions);
      opt(t, "gamma", c.theorem.gamma);
      opt(t, "mdp_seed", c.theorem.mdp_seed);
      opt(t, "steps", c.theorem.steps);
      opt(t, "omega", c.theorem.omega);
      opt(t, "epsilon", c.theorem.epsilon);
      opt(t, "noise_half_width", c.theorem.noise_half_width);
      opt(t, "betas", c.theorem.betas);
      opt(t, "seeds", c.theorem.seeds);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config has a value of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["kind"] = to_string(kind);
  j["seed"] = seed;
  j["out_dir"] = out_dir.string();
  j["bundle_dir"] = bundle_dir.string();
  j["env"] = {{"map_size", env.map_size},
              {"n_prey", env.n_prey},
              {"n_predators", env.n_predators},
              {"resource_radius", env.resource_radius},
              {"predation_radius", env.predation_radius},
              {"step_size", env.step_size},
              {"episode_length", env.episode_length},
              {"seed", env.seed}};
  j["reward"] = {{"k", reward.k},
                 {"kind", to_string(reward.kind)},
                 {"nonlinear_mode", to_string(reward.nonlinear_mode)},
                 {"safety_proportional", reward.safety_proportional},
                 {"softmax_beta", reward.softmax_beta}};
  j["marl"] = {{"episodes", marl.episodes},
               {"learning_rate", marl.learning_rate},
               {"gamma", marl.gamma},
               {"batch_episodes", marl.batch_episodes},
               {"train_episode_length", marl.train_episode_length},
               {"n_unknown", marl.n_unknown},
               {"hidden_width", marl.hidden_width},
               {"shared_reward", marl.shared_reward},
               {"per_agent_params", marl.per_agent_params},
               {"train_multitask", marl.train_multitask},
               {"max_grad_norm", marl.max_grad_norm},
               {"entropy_coef", marl.entropy_coef},
               {"optimizer", marl.optimizer},
               {"baseline", marl.baseline},
               {"critic_hidden", marl.critic_hidden},
               {"critic_learning_rate", marl.critic_learning_rate},
               {"critic_steps", marl.critic_steps},
               {"gae_lambda", marl.gae_lambda},
               {"hidden_init_std", marl.hidden_init_std}};
  j["kdbil"] = {{"h", kdbil.bandwidths.h},
                {"h_prime", kdbil.bandwidths.h_prime},
                {"grid_resolution", kdbil.grid_resolution},
                {"demos_per_latent", kdbil.demos_per_latent},
                {"demo_stride", kdbil.demo_stride},
                {"window_capacity", kdbil.window_capacity}};
  j["debiaser"] = {{"enabled", debiaser.enabled},
                   {"pairs", debiaser.pairs},
                   {"window_pairs", debiaser.window_pairs},
                   {"probes", debiaser.probes},
                   {"epochs", debiaser.train.epochs},
                   {"learning_rate", debiaser.train.learning_rate},
                   {"holdout_fraction", debiaser.train.holdout_fraction},
                   {"seed", debiaser.train.seed}};
  j["teaming"] = {{"unknown_style", teaming.unknown_style},
                  {"unknown_checkpoint", teaming.unknown_checkpoint},
                  {"epochs", teaming.epochs},
                  {"episodes_per_epoch", teaming.episodes_per_epoch},
                  {"steps_per_episode", teaming.steps_per_episode},
                  {"estimator", to_string(teaming.estimator)}};
  j["dynamic"] = {{"switch_period", dynamic.switch_period},
                  {"styles", dynamic.styles},
                  {"reference_episodes", dynamic.reference_episodes}};
  std::vector<std::string> modes;
  for (auto m : ablation.modes) modes.push_back(to_string(m));
  j["ablation"] = {{"modes", modes},
                   {"fixed_style", ablation.fixed_style},
                   {"online_updates_per_epoch", ablation.online_updates_per_epoch},
                   {"online_learning_rate", ablation.online_learning_rate}};
  j["score"] = {{"unknown_styles", score.unknown_styles},
                {"collaborators", score.collaborators},
                {"episodes_per_cell", score.episodes_per_cell}};
  j["theorem"] = {{"n_states", theorem.n_states},
                  {"n_actions", theorem.n_actions},
                  {"gamma", theorem.gamma},
                  {"mdp_seed", theorem.mdp_seed},
                  {"steps", theorem.steps},
                  {"omega", theorem.omega},
                  {"epsilon", theorem.epsilon},
                  {"noise_half_width", theorem.noise_half_width},
                  {"betas", theorem.betas},
                  {"seeds", theorem.seeds}};
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  env.validate();
  reward.validate();
  marl.validate(env);
  kdbil.bandwidths.validate();
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (kdbil.grid_resolution < 0) fail("kdbil.grid_resolution must be non-negative");
  if (kdbil.demos_per_latent < 1) fail("kdbil.demos_per_latent must be positive");
  if (kdbil.demo_stride < 1) fail("kdbil.demo_stride must be positive");
  if (kdbil.window_capacity < 1) fail("kdbil.window_capacity must be positive");
  if (debiaser.enabled && debiaser.pairs < 100) fail("debiaser.pairs must be at least 100");
  if (debiaser.window_pairs < 1 || debiaser.probes < 1) fail("debiaser window_pairs and probes must be positive");
  if (teaming.epochs < 1 || teaming.episodes_per_epoch < 1 || teaming.steps_per_episode < 1) {
    fail("teaming epochs, episodes_per_epoch and steps_per_episode must be positive");
  }
  if (!teaming.unknown_checkpoint.empty() && !std::filesystem::exists(teaming.unknown_checkpoint)) {
    fail("unknown_checkpoint " + teaming.unknown_checkpoint + " does not exist");
  }
  if (dynamic.switch_period < 1) fail("dynamic.switch_period must be at least 1");
  if (dynamic.styles.empty()) fail("dynamic.styles must not be empty");
  if (dynamic.reference_episodes < 1) fail("dynamic.reference_episodes must be positive");
  auto check_style = [&](const std::string& s) {
    const auto& names = style_names();
    if (std::find(names.begin(), names.end(), s) == names.end()) fail("unknown style '" + s + "'");
  };
  check_style(teaming.unknown_style);
  check_style(ablation.fixed_style);
  for (const auto& s : dynamic.styles) check_style(s);
  for (const auto& s : score.unknown_styles) check_style(s);
  for (const auto& c : score.collaborators) {
    if (c.rfind("fixed:", 0) == 0) {
      check_style(c.substr(6));
    } else if (c != "stun" && c != "multitask" && c != "random") {
      fail("unknown collaborator '" + c + "'");
    }
  }
  if (score.episodes_per_cell < 1) fail("score.episodes_per_cell must be positive");
  if (ablation.online_updates_per_epoch < 0 || !(ablation.online_learning_rate >= 0.0)) fail("bad ablation budget");
  if (theorem.steps < 1 || theorem.seeds.empty()) fail("theorem needs positive steps and at least one seed");
}

// ---------------------------------------------------------------------------
// Artifacts

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

constexpr char kBundleMagic[5] = "PBDL";
constexpr std::uint32_t kBundleVersion = 1;

}  // namespace

void save_policies(std::ostream& os, const Bundle& b) {
  bin::write_header(os, kBundleMagic, kBundleVersion);
  bin::write<double>(os, b.env.map_size);
  bin::write<std::int32_t>(os, b.env.n_prey);
  bin::write<std::int32_t>(os, b.env.n_predators);
  bin::write<double>(os, b.env.resource_radius);
  bin::write<double>(os, b.env.predation_radius);
  bin::write<double>(os, b.env.step_size);
  bin::write<std::int32_t>(os, b.env.episode_length);
  bin::write<std::uint64_t>(os, b.env.seed);
  bin::write<std::int32_t>(os, b.reward.k);
  bin::write<std::uint8_t>(os, static_cast<std::uint8_t>(b.reward.kind));
  bin::write<std::uint8_t>(os, static_cast<std::uint8_t>(b.reward.nonlinear_mode));
  bin::write<std::uint8_t>(os, b.reward.safety_proportional ? 1 : 0);
  bin::write<double>(os, b.reward.softmax_beta);
  bin::write<std::int32_t>(os, b.n_unknown);
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(b.stun.size()));
  for (const auto& p : b.stun) p.save(os);
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(b.surrogate.size()));
  for (const auto& p : b.surrogate) p.save(os);
  b.multitask.save(os);
  bin::write<std::uint32_t>(os, static_cast<std::uint32_t>(b.grid.size()));
  for (const auto& g : b.grid) bin::write_vec(os, g.values);
}

void load_policies(std::istream& is, Bundle& b) {
  bin::read_header(is, kBundleMagic, kBundleVersion);
  b.env.map_size = bin::read<double>(is);
  b.env.n_prey = bin::read<std::int32_t>(is);
  b.env.n_predators = bin::read<std::int32_t>(is);
  b.env.resource_radius = bin::read<double>(is);
  b.env.predation_radius = bin::read<double>(is);
  b.env.step_size = bin::read<double>(is);
  b.env.episode_length = bin::read<std::int32_t>(is);
  b.env.seed = bin::read<std::uint64_t>(is);
  b.reward.k = bin::read<std::int32_t>(is);
  const auto kind = bin::read<std::uint8_t>(is);
  const auto mode = bin::read<std::uint8_t>(is);
  if (kind > 1 || mode > 1) throw std::runtime_error("corrupt PBDL artifact (reward family)");
  b.reward.kind = static_cast<MixingKind>(kind);
  b.reward.nonlinear_mode = static_cast<NonlinearMode>(mode);
  b.reward.safety_proportional = bin::read<std::uint8_t>(is) != 0;
  b.reward.softmax_beta = bin::read<double>(is);
  b.n_unknown = bin::read<std::int32_t>(is);
  b.env.validate();
  b.reward.validate();
  const auto n_stun = bin::read<std::uint32_t>(is);
  if (n_stun > 1024) throw std::runtime_error("corrupt PBDL artifact (policy count)");
  b.stun.clear();
  for (std::uint32_t i = 0; i < n_stun; ++i) b.stun.push_back(GoalConditionedPolicy::load(is));
  const auto n_sur = bin::read<std::uint32_t>(is);
  if (n_sur > 1024) throw std::runtime_error("corrupt PBDL artifact (policy count)");
  b.surrogate.clear();
  for (std::uint32_t i = 0; i < n_sur; ++i) b.surrogate.push_back(GoalConditionedPolicy::load(is));
  b.multitask = GoalConditionedPolicy::load(is);
  const auto n_grid = bin::read<std::uint32_t>(is);
  b.grid.clear();
  for (std::uint32_t i = 0; i < n_grid; ++i) b.grid.emplace_back(bin::read_vec<double>(is), b.reward.kind);
  if (b.stun.empty() || b.surrogate.empty()) throw std::runtime_error("PBDL artifact holds no policies");
}

namespace {

template <typename F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::vector<PreyController> team_controllers(const Bundle& b, const GoalConditionedPolicy& unknown,
                                             const LatentParams& truth, const GoalConditionedPolicy& collaborator,
                                             const LatentParams& condition) {
  std::vector<PreyController> c(b.env.n_prey);
  for (int i = 0; i < b.env.n_prey; ++i) {
    c[i] = i < b.n_unknown ? PreyController{&unknown, truth, false} : PreyController{&collaborator, condition, false};
  }
  return c;
}

}  // namespace

Posterior observe_and_infer(const Bundle& b, const KdBilSettings& kd, const LatentParams& truth, int window_pairs,
                            Rng& rng) {
  if (window_pairs < 1) throw std::invalid_argument("observe_and_infer: window_pairs must be positive");
  const auto controllers = team_controllers(b, b.surrogate.front(), truth, b.stun.front(), truth);
  ObservedWindow window(static_cast<std::size_t>(window_pairs));
  int seen = 0;
  while (seen < window_pairs) {
    auto rec = run_episode(b.env, b.reward, controllers, truth, b.env.episode_length, true, rng);
    for (int t = 0; t < b.env.episode_length && seen < window_pairs; ++t) {
      for (int u = 0; u < b.n_unknown && seen < window_pairs; ++u) {
        window.push(ObsAction{rec.trajectories[u].obs[t], static_cast<Action>(rec.trajectories[u].actions[t])});
        ++seen;
      }
    }
  }
  return posterior_over_grid(b.dataset, window, b.grid, uniform_log_prior(b.grid.size()), kd.bandwidths);
}

std::vector<std::vector<double>> posterior_heatmap(const Bundle& b, const KdBilSettings& kd, int window_pairs,
                                                   Rng& rng) {
  std::vector<std::vector<double>> rows;
  rows.reserve(b.grid.size());
  for (const auto& truth : b.grid) rows.push_back(observe_and_infer(b, kd, truth, window_pairs, rng).probabilities);
  return rows;
}

void write_heatmap_csv(std::ostream& os, const std::vector<LatentParams>& grid,
                       const std::vector<std::vector<double>>& rows) {
  os << "true_index";
  for (int d = 0; d < (grid.empty() ? 0 : grid.front().dim()); ++d) os << ",true_b" << d;
  for (std::size_t c = 0; c < grid.size(); ++c) os << ",p" << c;
  os << '\n';
  os.precision(12);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << r;
    for (double v : grid[r].values) os << ',' << v;
    for (double p : rows[r]) os << ',' << p;
    os << '\n';
  }
}

std::vector<RewardComponents> collect_probe_components(const Bundle& b, int count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("collect_probe_components: count must be positive");
  std::vector<RewardComponents> pool;
  while (static_cast<int>(pool.size()) < 20 * count) {
    const LatentParams style = sample_latent(b.reward.k, b.reward.kind, rng);
    const auto controllers = team_controllers(b, b.surrogate.front(), style, b.stun.front(), style);
    auto rec = run_episode(b.env, b.reward, controllers, style, b.env.episode_length, true, rng);
    for (auto& step : rec.step_components) {
      for (auto& c : step) pool.push_back(std::move(c));
    }
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  return pool;
}

std::vector<DebiasPair> collect_debias_pairs(const Bundle& b, const KdBilSettings& kd, int pairs, int window_pairs,
                                             Rng& rng) {
  std::vector<DebiasPair> out;
  out.reserve(pairs);
  for (int i = 0; i < pairs; ++i) {
    const LatentParams truth = sample_latent(b.reward.k, b.reward.kind, rng);
    const auto post = observe_and_infer(b, kd, truth, window_pairs, rng);
    out.push_back(DebiasPair{posterior_summary(post), truth});
  }
  return out;
}

Bundle pretrain_bundle(const ExperimentConfig& config, const std::function<void(const std::string&)>& log) {
  staged("config", [&] { config.validate(); });
  Rng rng(config.seed);
  Bundle b;
  b.env = config.env;
  b.reward = config.reward;
  b.n_unknown = config.marl.n_unknown;

  staged("pretrain", [&] {
    const int report_every = std::max(1, config.marl.episodes / 10);
    int last_report = 0;
    auto res = pretrain(config.env, config.reward, config.marl, rng, [&](int episode, double mean) {
      if (log && episode - last_report >= report_every) {
        last_report = episode;
        log("pretrain episode " + std::to_string(episode) + " mean team return " + std::to_string(mean));
      }
    });
    b.stun = std::move(res.stun);
    b.surrogate = std::move(res.surrogate);
    b.multitask = std::move(res.multitask);
  });

  staged("dataset", [&] {
    const int res = config.kdbil.grid_resolution > 0 ? config.kdbil.grid_resolution
                                                     : default_grid_resolution(config.reward.k, config.reward.kind);
    b.grid = latent_grid(config.reward.k, config.reward.kind, res);
    std::vector<FixedBehaviorPolicy> surrogates;
    for (const auto& g : b.grid) surrogates.emplace_back(b.surrogate.front(), g);
    DemoCollection spec{config.kdbil.demos_per_latent, config.kdbil.demo_stride, b.n_unknown};
    b.dataset = build_dataset(surrogates, &b.stun.front(), b.env, b.reward, b.grid, spec, rng);
    if (log) log("dataset: " + std::to_string(b.dataset.size()) + " demonstrations over " +
                 std::to_string(b.grid.size()) + " latents");
  });

  if (config.debiaser.enabled) {
    staged("debiaser", [&] {
      const auto probes = collect_probe_components(b, config.debiaser.probes, rng);
      const auto pairs = collect_debias_pairs(b, config.kdbil, config.debiaser.pairs, config.debiaser.window_pairs, rng);
      b.debiaser = train_debiaser(pairs, probes, b.reward, config.debiaser.train);
      if (log) {
        log("debiaser loss " + std::to_string(b.debiaser->train_history().front()) + " -> " +
            std::to_string(b.debiaser->train_history().back()));
      }
    });
  }
  return b;
}

void save_bundle(const Bundle& b, const ExperimentConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, auto&& fn) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / name).string());
    fn(os);
    if (!os) throw std::runtime_error("write failed for " + (dir / name).string());
  };
  write(kPoliciesFile, [&](std::ostream& os) { save_policies(os, b); });
  write(kDatasetFile, [&](std::ostream& os) { b.dataset.save(os); });
  if (b.debiaser) write(kDebiaserFile, [&](std::ostream& os) { b.debiaser->save(os); });

  json manifest;
  manifest["format"] = "stun-bundle";
  manifest["version"] = 1;
  manifest["seed"] = config.seed;
  manifest["config"] = json::parse(config.to_json_text());
  json files = json::object();
  files[kPoliciesFile] = file_hash(dir / kPoliciesFile);
  files[kDatasetFile] = file_hash(dir / kDatasetFile);
  if (b.debiaser) files[kDebiaserFile] = file_hash(dir / kDebiaserFile);
  manifest["files"] = files;
  write(kManifestFile, [&](std::ostream& os) { os << manifest.dump(2) << '\n'; });
}

Bundle run_pretrain(const ExperimentConfig& config, const std::function<void(const std::string&)>& log) {
  Bundle b = pretrain_bundle(config, log);
  staged("write", [&] { save_bundle(b, config, config.out_dir); });
  return b;
}

Bundle load_bundle(const std::filesystem::path& dir) {
  return staged("load", [&] {
    Bundle b;
    const auto manifest_path = dir / kManifestFile;
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("missing " + manifest_path.string());
    const json manifest = json::parse(mf);
    for (const auto& [name, hash] : manifest.at("files").items()) {
      if (file_hash(dir / name) != hash.get<std::string>()) {
        throw std::runtime_error(name + " does not match the manifest hash");
      }
    }
    {
      std::ifstream is(dir / kPoliciesFile, std::ios::binary);
      if (!is) throw std::runtime_error("missing " + (dir / kPoliciesFile).string());
      load_policies(is, b);
    }
    {
      std::ifstream is(dir / kDatasetFile, std::ios::binary);
      if (!is) throw std::runtime_error("missing " + (dir / kDatasetFile).string());
      b.dataset = TrainingDataset::load(is);
    }
    if (manifest.at("files").contains(kDebiaserFile)) {
      std::ifstream is(dir / kDebiaserFile, std::ios::binary);
      b.debiaser = Debiaser::load(is);
      if (b.debiaser->k() != b.reward.k || b.debiaser->kind() != b.reward.kind) {
        throw std::runtime_error("debiaser reward family differs from the policies'");
      }
    }
    if (b.dataset.latent_dim() != b.reward.k || b.dataset.obs_dim() != b.env.observation_size()) {
      throw std::runtime_error("dataset dimensions differ from the policies'");
    }
    return b;
  });
}

// ---------------------------------------------------------------------------
// Teaming

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, int k) {
  os << kMetricsSchema << '\n' << "epoch,mean_return,relative_return";
  for (int c = 0; c < k; ++c) os << ",component" << c;
  for (int c = 0; c < k; ++c) os << ",estimate" << c;
  for (int c = 0; c < k; ++c) os << ",truth" << c;
  os << ",posterior_entropy,wall_seconds\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.mean_return << ',' << r.relative_return;
    for (int c = 0; c < k; ++c) os << ',' << (c < static_cast<int>(r.component_returns.size()) ? r.component_returns[c] : 0.0);
    for (int c = 0; c < k; ++c) os << ',' << (c < static_cast<int>(r.estimate.size()) ? r.estimate[c] : 0.0);
    for (int c = 0; c < k; ++c) os << ',' << (c < static_cast<int>(r.truth.size()) ? r.truth[c] : 0.0);
    os << ',' << r.posterior_entropy << ',' << r.wall_seconds << '\n';
  }
}

std::vector<LatentParams> style_schedule(const ExperimentConfig& config, bool dynamic) {
  std::vector<LatentParams> out;
  out.reserve(config.teaming.epochs);
  for (int e = 0; e < config.teaming.epochs; ++e) {
    const std::string& name =
        dynamic ? config.dynamic.styles[(e / config.dynamic.switch_period) % config.dynamic.styles.size()]
                : config.teaming.unknown_style;
    out.push_back(style_latent(name, config.reward.k, config.reward.kind));
  }
  return out;
}

std::vector<double> reference_returns(const Bundle& bundle, const std::vector<LatentParams>& styles, int episodes,
                                      int steps, std::uint64_t seed, const GoalConditionedPolicy* unknown,
                                      const GoalConditionedPolicy* collaborator) {
  if (episodes < 1 || steps < 1) throw std::invalid_argument("reference_returns: episodes and steps must be positive");
  const GoalConditionedPolicy& u = unknown ? *unknown : bundle.surrogate.front();
  std::vector<double> out;
  for (std::size_t s = 0; s < styles.size(); ++s) {
    Rng rng(seed + 7919 * s);
    const auto controllers =
        team_controllers(bundle, u, styles[s], collaborator ? *collaborator : bundle.stun.front(), styles[s]);
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
      total += run_episode(bundle.env, bundle.reward, controllers, styles[s], steps, true, rng).team_return;
    }
    out.push_back(total / episodes);
  }
  return out;
}

TeamingRun run_teaming(const ExperimentConfig& config, const Bundle& bundle, const std::vector<LatentParams>& schedule,
                       AblationMode mode, std::uint64_t seed) {
  if (bundle.n_unknown < 1) throw StageError("team", "no unknown agents configured; nothing to infer");
  if (schedule.empty()) throw StageError("team", "empty unknown-agent schedule");
  if (!(config.reward == bundle.reward)) throw StageError("team", "reward family differs between config and bundle");
  for (const auto& b : schedule) {
    if (b.dim() != bundle.reward.k || b.kind != bundle.reward.kind) {
      throw StageError("team", "schedule latent does not belong to the bundle's reward family");
    }
  }
  const auto& ts = config.teaming;

  Bundle external;
  const GoalConditionedPolicy* unknown = &bundle.surrogate.front();
  if (!ts.unknown_checkpoint.empty()) {
    external = load_bundle(ts.unknown_checkpoint);
    if (!(external.reward == bundle.reward)) throw StageError("team", "unknown checkpoint uses another reward family");
    unknown = &external.surrogate.front();
  }

  // Reference return per distinct style, with the STUN policy told the truth,
  // and the floor with uniform-random collaborators (zero weights).
  std::vector<LatentParams> distinct;
  for (const auto& b : schedule) {
    if (std::find(distinct.begin(), distinct.end(), b) == distinct.end()) distinct.push_back(b);
  }
  GoalConditionedPolicy uniform = bundle.stun.front();
  std::fill(uniform.params().begin(), uniform.params().end(), 0.0);
  const auto refs = staged("team", [&] {
    return reference_returns(bundle, distinct, config.dynamic.reference_episodes, ts.steps_per_episode,
                             seed ^ 0x5bd1e995ULL, unknown);
  });
  const auto floors = staged("team", [&] {
    return reference_returns(bundle, distinct, config.dynamic.reference_episodes, ts.steps_per_episode,
                             seed ^ 0x27d4eb2fULL, unknown, &uniform);
  });

  Rng rng(seed);
  ObservedWindow window(config.kdbil.window_capacity);
  const LatentParams neutral = prior_mean_latent(bundle.reward.k, bundle.reward.kind);
  LatentParams estimate = mode == AblationMode::FixB
                              ? style_latent(config.ablation.fixed_style, bundle.reward.k, bundle.reward.kind)
                              : neutral;
  GoalConditionedPolicy online = bundle.multitask;
  const auto prior = uniform_log_prior(bundle.grid.size());

  TeamingRun run;
  const auto t0 = std::chrono::steady_clock::now();
  for (int e = 0; e < static_cast<int>(schedule.size()); ++e) {
    const LatentParams& truth = schedule[e];
    if (e > 0 && !(schedule[e] == schedule[e - 1])) run.switch_epochs.push_back(e);
    MetricsRow row;
    row.epoch = e;
    row.truth = truth.values;

    if (mode != AblationMode::FixB && !window.empty()) {
      staged("infer", [&] {
        const auto post = posterior_over_grid(bundle.dataset, window, bundle.grid, prior, config.kdbil.bandwidths);
        row.posterior_entropy = post.entropy();
        switch (ts.estimator) {
          case Estimator::Map: estimate = map_estimate(post); break;
          case Estimator::Mean: estimate = posterior_mean(post); break;
          case Estimator::Debiased:
            estimate = bundle.debiaser ? debias(*bundle.debiaser, post) : posterior_mean(post);
            break;
        }
      });
    }
    row.estimate = estimate.values;

    const bool online_mode = mode == AblationMode::OnlineRl;
    const auto controllers = online_mode ? team_controllers(bundle, *unknown, truth, online, neutral)
                                         : team_controllers(bundle, *unknown, truth, bundle.stun.front(), estimate);
    RolloutBatch batch;
    double total = 0.0;
    std::vector<double> comps(bundle.reward.k, 0.0);
    for (int ep = 0; ep < ts.episodes_per_epoch; ++ep) {
      auto rec = run_episode(bundle.env, bundle.reward, controllers, truth, ts.steps_per_episode, true, rng);
      total += rec.team_return;
      for (int c = 0; c < bundle.reward.k; ++c) comps[c] += rec.component_sums[c];
      for (int t = 0; t < ts.steps_per_episode; ++t) {
        for (int u = 0; u < bundle.n_unknown; ++u) {
          window.push(ObsAction{rec.trajectories[u].obs[t], static_cast<Action>(rec.trajectories[u].actions[t])});
        }
      }
      if (online_mode) {
        // The collaborators only know the inferred latent, so they learn from
        // the team reward rescored under it.
        std::vector<double> team(ts.steps_per_episode, 0.0);
        for (int t = 0; t < ts.steps_per_episode; ++t) {
          for (const auto& c : rec.step_components[t]) team[t] += mix(estimate, c, bundle.reward);
        }
        for (int i = bundle.n_unknown; i < bundle.env.n_prey; ++i) {
          rec.trajectories[i].rewards = team;
          batch.trajectories.push_back(std::move(rec.trajectories[i]));
        }
      }
    }
    if (online_mode) {
      staged("online update", [&] {
        for (int u = 0; u < config.ablation.online_updates_per_epoch; ++u) {
          policy_gradient_step(online, batch, config.ablation.online_learning_rate);
        }
      });
    }
    row.mean_return = total / ts.episodes_per_epoch;
    row.component_returns.resize(bundle.reward.k);
    for (int c = 0; c < bundle.reward.k; ++c) row.component_returns[c] = comps[c] / ts.episodes_per_epoch;
    const auto at = std::find(distinct.begin(), distinct.end(), truth) - distinct.begin();
    const double span = refs[at] - floors[at];
    row.relative_return = span > 0.0 ? (row.mean_return - floors[at]) / span : 0.0;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.rows.push_back(std::move(row));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Scores

std::vector<double> normalized_score(const ScoreTable& table) {
  const auto& v = table.values;
  if (v.empty() || v.front().empty()) throw std::invalid_argument("normalized_score: empty table");
  const std::size_t cols = v.front().size();
  std::vector<double> sum(cols, 0.0);
  for (std::size_t r = 0; r < v.size(); ++r) {
    if (v[r].size() != cols) throw std::invalid_argument("normalized_score: ragged table");
    const double mx = *std::max_element(v[r].begin(), v[r].end());
    if (!(mx > 0.0)) {
      throw std::invalid_argument("normalized_score: row " + std::to_string(r) + " has a non-positive maximum");
    }
    for (std::size_t c = 0; c < cols; ++c) sum[c] += 100.0 * v[r][c] / mx;
  }
  for (double& s : sum) s = std::round(10.0 * s / static_cast<double>(v.size())) / 10.0;
  return sum;
}

ScoreMatrixResult run_score_matrix(const ExperimentConfig& config, const Bundle& bundle) {
  const auto& sc = config.score;
  if (sc.unknown_styles.empty() || sc.collaborators.empty()) throw StageError("score", "empty score matrix spec");
  const int k = bundle.reward.k;
  const auto kind = bundle.reward.kind;
  const int steps = config.teaming.steps_per_episode;
  const GoalConditionedPolicy random_policy(bundle.stun.front().layout(), bundle.stun.front().gamma(),
                                            PolicyRole::Stun);
  const LatentParams neutral = prior_mean_latent(k, kind);

  ScoreMatrixResult out;
  out.raw.row_names = sc.unknown_styles;
  out.raw.column_names = sc.collaborators;
  const std::size_t rows = sc.unknown_styles.size(), cols = sc.collaborators.size();
  out.raw.values.assign(rows, std::vector<double>(cols, 0.0));
  out.random_baseline.assign(rows, 0.0);

  // Cell (r, c) uses seed + r * 1000 + c; column index `cols` is the random baseline.
  const auto n_cells = static_cast<std::ptrdiff_t>(rows * (cols + 1));
  std::vector<std::string> errors(static_cast<std::size_t>(n_cells));
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t cell = 0; cell < n_cells; ++cell) {
    const std::size_t r = cell / (cols + 1), c = cell % (cols + 1);
    const std::uint64_t cell_seed = config.seed + 1000 * r + c;
    try {
      const LatentParams truth = style_latent(sc.unknown_styles[r], k, kind);
      const std::string who = c < cols ? sc.collaborators[c] : std::string("random");
      double value = 0.0;
      if (who == "stun") {
        ExperimentConfig sub = config;
        sub.teaming.epochs = std::max(1, sc.episodes_per_cell / config.teaming.episodes_per_epoch);
        const auto run = run_teaming(sub, bundle, std::vector<LatentParams>(sub.teaming.epochs, truth),
                                     AblationMode::Full, cell_seed);
        for (const auto& row : run.rows) value += row.mean_return;
        value /= static_cast<double>(run.rows.size());
      } else {
        const GoalConditionedPolicy* pol = &bundle.stun.front();
        LatentParams cond = neutral;
        if (who == "multitask") {
          pol = &bundle.multitask;
        } else if (who == "random") {
          pol = &random_policy;
        } else {
          cond = style_latent(who.substr(6), k, kind);
        }
        Rng rng(cell_seed);
        const auto controllers = team_controllers(bundle, bundle.surrogate.front(), truth, *pol, cond);
        for (int e = 0; e < sc.episodes_per_cell; ++e) {
          value += run_episode(bundle.env, bundle.reward, controllers, truth, steps, true, rng).team_return;
        }
        value /= sc.episodes_per_cell;
      }
      if (c < cols) {
        out.raw.values[r][c] = value;
      } else {
        out.random_baseline[r] = value;
      }
    } catch (const std::exception& e) {
      errors[cell] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw StageError("score", e);
  }
  out.shifted = out.raw;
  for (std::size_t r = 0; r < rows; ++r) {
    for (double& v : out.shifted.values[r]) v -= out.random_baseline[r];
  }
  // A row where nobody beats random play has no meaningful 100-point anchor.
  bool scorable = true;
  for (const auto& row : out.shifted.values) scorable = scorable && *std::max_element(row.begin(), row.end()) > 0.0;
  if (scorable) out.normalized = normalized_score(out.shifted);
  return out;
}

void write_score_csv(std::ostream& os, const ScoreMatrixResult& r) {
  os << "unknown,random_baseline";
  for (const auto& c : r.raw.column_names) os << ',' << c;
  os << '\n';
  os.precision(10);
  for (std::size_t i = 0; i < r.raw.row_names.size(); ++i) {
    os << r.raw.row_names[i] << ',' << r.random_baseline[i];
    for (double v : r.raw.values[i]) os << ',' << v;
    os << '\n';
  }
  if (r.normalized.empty()) return;
  os << "normalized,";
  for (double v : r.normalized) os << ',' << v;
  os << '\n';
}

// ---------------------------------------------------------------------------
// Q-learning lab

TheoremReport run_theorem1(const TheoremSettings& s) {
  TheoremReport rep;
  rep.mdp = lab::random_mdp(s.n_states, s.n_actions, s.gamma, s.mdp_seed);
  rep.q_star = lab::value_iteration(rep.mdp).q;
  const lab::LearningSchedule schedule(s.omega);
  const auto n = static_cast<std::ptrdiff_t>(s.seeds.size());
  rep.unbiased_final_gaps.assign(s.seeds.size(), 0.0);
  rep.unbiased_traces.assign(s.seeds.size(), {});
  lab::QLearningConfig cfg;
  cfg.steps = s.steps;
  cfg.epsilon = s.epsilon;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    lab::Rng rng(s.seeds[i]);
    auto res = lab::q_learning_run(rep.mdp, lab::RewardChannel::unbiased(s.noise_half_width), schedule, cfg, rng,
                                   &rep.q_star);
    rep.unbiased_final_gaps[i] = lab::sup_norm_gap(res.q, rep.q_star);
    rep.unbiased_traces[i] = std::move(res.trace);
  }
  rep.bias_rows = lab::bias_gap_experiment(rep.mdp, s.betas, s.steps, s.seeds, schedule, s.epsilon);
  return rep;
}

}  // namespace stun
