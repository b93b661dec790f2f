#pragma once

// Seeded predator-prey particle world: N prey (the blue team) share a square
// plane with M scripted predators that chase the nearest unclaimed prey.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace stun {

using Rng = std::mt19937_64;

enum class Action : std::uint8_t { Stay = 0, Up = 1, Down = 2, Left = 3, Right = 4 };
inline constexpr int kNumActions = 5;

inline constexpr std::array<Action, kNumActions> kAllActions = {
    Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right};

const char* action_name(Action a);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

double distance(Vec2 a, Vec2 b);

struct EnvConfig {
  double map_size = 300.0;
  int n_prey = 3;
  int n_predators = 1;
  double resource_radius = 30.0;
  double predation_radius = 30.0;
  double step_size = 5.0;
  int episode_length = 100;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Length of an Observation: 2 * (n_prey + n_predators).
  int observation_size() const { return 2 * (n_prey + n_predators); }
};

struct EnvState {
  std::vector<Vec2> prey;
  std::vector<Vec2> predators;
  int step_index = 0;
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

using Observation = std::vector<double>;
using RewardComponents = std::vector<double>;

struct RewardConfig;

struct StepResult {
  EnvState next;
  std::vector<RewardComponents> components;  // one per prey
  bool done = false;
};

/// Position after taking `a` from `p`, clamped to [0, map_size]^2.
Vec2 apply_action(Vec2 p, Action a, const EnvConfig& config);

EnvState reset(const EnvConfig& config, Rng& rng);

/// Predators claim targets in index order, each taking the nearest prey not
/// yet claimed (surplus predators fall back to the globally nearest prey), and
/// move toward it. Action ties resolve in enumeration order.
std::vector<Action> predator_actions(const EnvState& state, const EnvConfig& config);

/// Target prey index for each predator under the claiming rule above.
std::vector<int> predator_targets(const EnvState& state);

/// Moves prey and predators simultaneously, clamps to the map, and scores the
/// post-move configuration. Throws std::invalid_argument on a wrong action
/// count and std::logic_error when the episode is already finished.
StepResult step(const EnvState& state, std::span<const Action> prey_actions,
                const EnvConfig& config, const RewardConfig& reward_config);

/// Ego position, offsets to the other prey, offsets to the predators; all
/// divided by map_size.
Observation observe(const EnvState& state, int agent_index, const EnvConfig& config);

}  // namespace stun
