#pragma once

// Demonstration collection for the inverse learner: roll out latent-labelled
// surrogate policies and record what the unknown slots observe and do.

#include <span>

#include "stun/goal_policy.hpp"
#include "stun/kd_bil.hpp"

namespace stun {

struct DemoCollection {
  int demos_per_latent = 120;
  int stride = 4;  // record every stride-th step of each rollout
  int n_unknown = 1;
};

/// For every grid latent, the surrogate whose style equals it plays the
/// unknown slots [0, n_unknown) while `teammate` (conditioned on the same
/// latent) plays the rest; when `teammate` is null the surrogate plays every
/// prey. Throws std::invalid_argument when a grid latent has no surrogate.
TrainingDataset build_dataset(std::span<const FixedBehaviorPolicy> surrogates, const GoalConditionedPolicy* teammate,
                              const EnvConfig& env, const RewardConfig& reward,
                              const std::vector<LatentParams>& grid, const DemoCollection& spec, Rng& rng);

}  // namespace stun
