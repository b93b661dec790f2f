#include "stun/particle_env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "stun/reward_model.hpp"

namespace stun {

const char* action_name(Action a) {
  switch (a) {
    case Action::Stay: return "STAY";
    case Action::Up: return "UP";
    case Action::Down: return "DOWN";
    case Action::Left: return "LEFT";
    case Action::Right: return "RIGHT";
  }
  return "?";
}

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

void EnvConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("EnvConfig: " + msg); };
  if (!(map_size > 0.0)) fail("map_size must be positive");
  if (!(resource_radius > 0.0)) fail("resource_radius must be positive");
  if (!(predation_radius > 0.0)) fail("predation_radius must be positive");
  if (!(step_size > 0.0 && step_size < map_size)) fail("step_size must lie in (0, map_size)");
  if (n_prey < 2) fail("n_prey must be at least 2");
  if (n_predators < 1) fail("n_predators must be at least 1");
  if (episode_length < 1) fail("episode_length must be at least 1");
}

Vec2 apply_action(Vec2 p, Action a, const EnvConfig& config) {
  const double s = config.step_size;
  switch (a) {
    case Action::Stay: break;
    case Action::Up: p.y += s; break;
    case Action::Down: p.y -= s; break;
    case Action::Left: p.x -= s; break;
    case Action::Right: p.x += s; break;
  }
  p.x = std::clamp(p.x, 0.0, config.map_size);
  p.y = std::clamp(p.y, 0.0, config.map_size);
  return p;
}

EnvState reset(const EnvConfig& config, Rng& rng) {
  config.validate();
  std::uniform_real_distribution<double> coord(0.0, config.map_size);
  EnvState s;
  s.prey.resize(config.n_prey);
  s.predators.resize(config.n_predators);
  for (auto& p : s.prey) {
    p.x = coord(rng);
    p.y = coord(rng);
  }
  for (auto& p : s.predators) {
    p.x = coord(rng);
    p.y = coord(rng);
  }
  return s;
}

std::vector<int> predator_targets(const EnvState& state) {
  const int n = static_cast<int>(state.prey.size());
  std::vector<bool> claimed(n, false);
  std::vector<int> targets;
  targets.reserve(state.predators.size());
  for (const Vec2& pred : state.predators) {
    int best_free = -1;
    int best_any = -1;
    double d_free = std::numeric_limits<double>::infinity();
    double d_any = d_free;
    for (int i = 0; i < n; ++i) {
      const double d = distance(pred, state.prey[i]);
      if (d < d_any) {
        d_any = d;
        best_any = i;
      }
      if (!claimed[i] && d < d_free) {
        d_free = d;
        best_free = i;
      }
    }
    const int t = best_free >= 0 ? best_free : best_any;
    if (best_free >= 0) claimed[t] = true;
    targets.push_back(t);
  }
  return targets;
}

std::vector<Action> predator_actions(const EnvState& state, const EnvConfig& config) {
  const auto targets = predator_targets(state);
  std::vector<Action> out;
  out.reserve(state.predators.size());
  for (std::size_t p = 0; p < state.predators.size(); ++p) {
    const Vec2 target = state.prey[targets[p]];
    Action best = Action::Stay;
    double best_d = std::numeric_limits<double>::infinity();
    for (Action a : kAllActions) {
      const double d = distance(apply_action(state.predators[p], a, config), target);
      if (d < best_d) {
        best_d = d;
        best = a;
      }
    }
    out.push_back(best);
  }
  return out;
}

StepResult step(const EnvState& state, std::span<const Action> prey_actions,
                const EnvConfig& config, const RewardConfig& reward_config) {
  if (static_cast<int>(prey_actions.size()) != config.n_prey ||
      state.prey.size() != prey_actions.size()) {
    throw std::invalid_argument("step: expected one action per prey");
  }
  if (state.step_index >= config.episode_length) {
    throw std::logic_error("step: episode already finished");
  }
  const auto pred_moves = predator_actions(state, config);

  StepResult r;
  r.next.step_index = state.step_index + 1;
  r.next.prey.reserve(state.prey.size());
  for (std::size_t i = 0; i < state.prey.size(); ++i) {
    r.next.prey.push_back(apply_action(state.prey[i], prey_actions[i], config));
  }
  r.next.predators.reserve(state.predators.size());
  for (std::size_t p = 0; p < state.predators.size(); ++p) {
    r.next.predators.push_back(apply_action(state.predators[p], pred_moves[p], config));
  }
  r.components = compute_components(r.next, prey_actions, config, reward_config);
  r.done = r.next.step_index == config.episode_length;
  return r;
}

Observation observe(const EnvState& state, int agent_index, const EnvConfig& config) {
  const int n = static_cast<int>(state.prey.size());
  if (agent_index < 0 || agent_index >= n) {
    throw std::out_of_range("observe: agent index " + std::to_string(agent_index) +
                            " outside [0, " + std::to_string(n) + ")");
  }
  const double scale = 1.0 / config.map_size;
  const Vec2 ego = state.prey[agent_index];
  Observation o;
  o.reserve(2 * (state.prey.size() + state.predators.size()));
  o.push_back(ego.x * scale);
  o.push_back(ego.y * scale);
  for (int j = 0; j < n; ++j) {
    if (j == agent_index) continue;
    o.push_back((state.prey[j].x - ego.x) * scale);
    o.push_back((state.prey[j].y - ego.y) * scale);
  }
  for (const Vec2& p : state.predators) {
    o.push_back((p.x - ego.x) * scale);
    o.push_back((p.y - ego.y) * scale);
  }
  return o;
}

}  // namespace stun
