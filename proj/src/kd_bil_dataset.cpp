#include "stun/kd_bil_dataset.hpp"

#include <stdexcept>

namespace stun {

TrainingDataset build_dataset(std::span<const FixedBehaviorPolicy> surrogates, const GoalConditionedPolicy* teammate,
                              const EnvConfig& env, const RewardConfig& reward,
                              const std::vector<LatentParams>& grid, const DemoCollection& spec, Rng& rng) {
  if (grid.empty()) throw std::invalid_argument("build_dataset: empty latent grid");
  if (spec.demos_per_latent < 1) throw std::invalid_argument("build_dataset: demos_per_latent must be positive");
  if (spec.stride < 1) throw std::invalid_argument("build_dataset: stride must be positive");
  if (spec.n_unknown < 1 || spec.n_unknown > env.n_prey) {
    throw std::invalid_argument("build_dataset: n_unknown must lie in [1, n_prey]");
  }

  std::vector<Demonstration> demos;
  demos.reserve(grid.size() * spec.demos_per_latent);
  std::vector<PreyController> controllers(env.n_prey);
  for (const auto& b : grid) {
    const FixedBehaviorPolicy* source = nullptr;
    for (const auto& s : surrogates) {
      if (s.style() == b) {
        source = &s;
        break;
      }
    }
    if (!source) throw std::invalid_argument("build_dataset: no trained surrogate for a requested latent");
    for (int i = 0; i < env.n_prey; ++i) {
      const bool unknown = i < spec.n_unknown;
      controllers[i] = PreyController{unknown || !teammate ? &source->policy() : teammate, b, false};
    }
    int collected = 0;
    while (collected < spec.demos_per_latent) {
      auto rec = run_episode(env, reward, controllers, b, env.episode_length, true, rng);
      for (int t = 0; t < env.episode_length && collected < spec.demos_per_latent; t += spec.stride) {
        for (int u = 0; u < spec.n_unknown && collected < spec.demos_per_latent; ++u) {
          const auto& tr = rec.trajectories[u];
          demos.push_back(Demonstration{tr.obs[t], static_cast<Action>(tr.actions[t]), b});
          ++collected;
        }
      }
    }
  }
  return TrainingDataset(std::move(demos));
}

}  // namespace stun
