#include "stun/theorem_lab.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace stun::lab {

void FiniteMDP::validate() const {
  if (n_states < 1 || n_actions < 1) throw std::invalid_argument("FiniteMDP: need at least one state and action");
  const std::size_t sa = static_cast<std::size_t>(n_states) * n_actions;
  if (P.size() != sa * n_states || R.size() != sa) throw std::invalid_argument("FiniteMDP: table sizes");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("FiniteMDP: gamma must lie in (0, 1)");
  for (std::size_t i = 0; i < sa; ++i) {
    if (!std::isfinite(R[i])) throw std::invalid_argument("FiniteMDP: non-finite reward");
    double s = 0.0;
    for (int s2 = 0; s2 < n_states; ++s2) {
      const double p = P[i * n_states + s2];
      if (!(p >= 0.0)) throw std::invalid_argument("FiniteMDP: negative transition probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("FiniteMDP: transition row does not sum to 1");
  }
}

FiniteMDP random_mdp(int n_states, int n_actions, double gamma, std::uint64_t seed) {
  if (n_states < 1 || n_actions < 1) throw std::invalid_argument("random_mdp: need at least one state and action");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FiniteMDP m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  const std::size_t sa = static_cast<std::size_t>(n_states) * n_actions;
  m.P.resize(sa * n_states);
  m.R.resize(sa);
  for (std::size_t i = 0; i < sa; ++i) {
    double s = 0.0;
    for (int s2 = 0; s2 < n_states; ++s2) s += (m.P[i * n_states + s2] = u(rng) + 1e-3);
    for (int s2 = 0; s2 < n_states; ++s2) m.P[i * n_states + s2] /= s;
    m.R[i] = u(rng);
  }
  m.validate();
  return m;
}

double sup_norm_gap(const QTable& a, const QTable& b) {
  if (a.size() != b.size()) throw std::invalid_argument("sup_norm_gap: size mismatch");
  double g = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) g = std::max(g, std::abs(a[i] - b[i]));
  return g;
}

namespace {

double max_row(const QTable& q, int s, int n_actions) {
  const auto* row = q.data() + static_cast<std::size_t>(s) * n_actions;
  return *std::max_element(row, row + n_actions);
}

}  // namespace

ValueIterationResult value_iteration(const FiniteMDP& mdp, double tolerance, int max_iterations) {
  mdp.validate();
  if (!(tolerance > 0.0)) throw std::invalid_argument("value_iteration: tolerance must be positive");
  const int S = mdp.n_states, A = mdp.n_actions;
  ValueIterationResult out;
  QTable q(static_cast<std::size_t>(S) * A, 0.0), next(q.size());
  std::vector<double> v(S);
  for (int it = 0; it < max_iterations; ++it) {
    for (int s = 0; s < S; ++s) v[s] = max_row(q, s, A);
    for (int s = 0; s < S; ++s) {
      for (int a = 0; a < A; ++a) {
        double e = 0.0;
        for (int s2 = 0; s2 < S; ++s2) e += mdp.prob(s, a, s2) * v[s2];
        next[s * A + a] = mdp.reward(s, a) + mdp.gamma * e;
      }
    }
    const double change = sup_norm_gap(next, q);
    q.swap(next);
    out.iterate_changes.push_back(change);
    out.iterations = it + 1;
    if (change < tolerance) break;
  }
  out.q = std::move(q);
  return out;
}

QTable policy_iteration(const FiniteMDP& mdp) {
  mdp.validate();
  const int S = mdp.n_states, A = mdp.n_actions;
  std::vector<int> policy(S, 0);
  Eigen::VectorXd v(S);
  QTable q(static_cast<std::size_t>(S) * A);
  for (int round = 0; round < 10000; ++round) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(S, S);
    Eigen::VectorXd r(S);
    for (int s = 0; s < S; ++s) {
      r[s] = mdp.reward(s, policy[s]);
      for (int s2 = 0; s2 < S; ++s2) m(s, s2) -= mdp.gamma * mdp.prob(s, policy[s], s2);
    }
    v = m.partialPivLu().solve(r);
    for (int s = 0; s < S; ++s) {
      for (int a = 0; a < A; ++a) {
        double e = 0.0;
        for (int s2 = 0; s2 < S; ++s2) e += mdp.prob(s, a, s2) * v[s2];
        q[s * A + a] = mdp.reward(s, a) + mdp.gamma * e;
      }
    }
    bool stable = true;
    for (int s = 0; s < S; ++s) {
      int best = policy[s];
      for (int a = 0; a < A; ++a) {
        if (q[s * A + a] > q[s * A + best] + 1e-13) best = a;
      }
      if (best != policy[s]) {
        policy[s] = best;
        stable = false;
      }
    }
    if (stable) return q;
  }
  throw std::runtime_error("policy_iteration: no stable policy after 10000 rounds");
}

void RewardChannel::validate() const {
  if (mode == ChannelMode::UnbiasedNoise && !(half_width > 0.0)) {
    throw std::invalid_argument("RewardChannel: noise half-width must be positive");
  }
  if (mode == ChannelMode::Biased && !(beta != 0.0 && std::isfinite(beta))) {
    throw std::invalid_argument("RewardChannel: biased channel needs a finite non-zero offset");
  }
}

double RewardChannel::sample(double reward, Rng& rng) const {
  switch (mode) {
    case ChannelMode::Exact: return reward;
    case ChannelMode::UnbiasedNoise: return reward + std::uniform_real_distribution<double>(-half_width, half_width)(rng);
    case ChannelMode::Biased: return reward + beta;
  }
  return reward;
}

LearningSchedule::LearningSchedule(double omega) : omega_(omega) {
  // sum n^-omega diverges iff omega <= 1; sum n^-2omega converges iff omega > 1/2.
  if (!(omega > 0.5 && omega <= 1.0)) {
    throw std::invalid_argument("LearningSchedule: omega must lie in (0.5, 1] for the Robbins-Monro conditions");
  }
}

double LearningSchedule::alpha(long long visits) const {
  if (visits < 0) throw std::invalid_argument("LearningSchedule: negative visit count");
  return 1.0 / std::pow(1.0 + static_cast<double>(visits), omega_);
}

QLearningResult q_learning_run(const FiniteMDP& mdp, const RewardChannel& channel, const LearningSchedule& schedule,
                               const QLearningConfig& config, Rng& rng, const QTable* q_star) {
  mdp.validate();
  channel.validate();
  if (!(config.epsilon > 0.0 && config.epsilon <= 1.0)) throw std::invalid_argument("q_learning_run: epsilon in (0, 1]");
  if (config.steps < 0 || config.trace_every < 1) throw std::invalid_argument("q_learning_run: bad step counts");
  const int S = mdp.n_states, A = mdp.n_actions;
  if (config.start_state < 0 || config.start_state >= S) throw std::invalid_argument("q_learning_run: start state");
  if (q_star && q_star->size() != static_cast<std::size_t>(S) * A) throw std::invalid_argument("q_learning_run: oracle size");

  QLearningResult out;
  out.q.assign(static_cast<std::size_t>(S) * A, 0.0);
  out.visits.assign(out.q.size(), 0);
  auto& q = out.q;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> any_action(0, A - 1);

  int s = config.start_state;
  for (long long t = 1; t <= config.steps; ++t) {
    int a;
    if (u01(rng) < config.epsilon) {
      a = any_action(rng);
    } else {
      const auto* row = q.data() + static_cast<std::size_t>(s) * A;
      a = static_cast<int>(std::max_element(row, row + A) - row);
    }
    const double x = u01(rng);
    int s2 = S - 1;
    double c = 0.0;
    for (int j = 0; j < S; ++j) {
      c += mdp.prob(s, a, j);
      if (x < c) {
        s2 = j;
        break;
      }
    }
    const double r = channel.sample(mdp.reward(s, a), rng);
    const std::size_t i = static_cast<std::size_t>(s) * A + a;
    const double alpha = schedule.alpha(out.visits[i]++);
    q[i] = (1.0 - alpha) * q[i] + alpha * (r + mdp.gamma * max_row(q, s2, A));
    if (!std::isfinite(q[i])) throw std::runtime_error("q_learning_run: Q diverged at step " + std::to_string(t));
    if (q_star && t % config.trace_every == 0) out.trace.emplace_back(t, sup_norm_gap(q, *q_star));
    s = s2;
  }
  return out;
}

std::vector<BiasGapRow> bias_gap_experiment(const FiniteMDP& mdp, const std::vector<double>& betas, long long steps,
                                            const std::vector<std::uint64_t>& seeds,
                                            const LearningSchedule& schedule, double epsilon) {
  mdp.validate();
  if (betas.empty() || seeds.empty()) throw std::invalid_argument("bias_gap_experiment: empty beta or seed list");
  const QTable q_star = value_iteration(mdp).q;
  const auto n_cells = static_cast<std::ptrdiff_t>(betas.size() * seeds.size());
  std::vector<BiasGapRow> rows(static_cast<std::size_t>(n_cells));
  QLearningConfig cfg;
  cfg.steps = steps;
  cfg.epsilon = epsilon;
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t cell = 0; cell < n_cells; ++cell) {
    const double beta = betas[cell / seeds.size()];
    const std::uint64_t seed = seeds[cell % seeds.size()];
    const RewardChannel ch = beta == 0.0 ? RewardChannel::exact() : RewardChannel::biased(beta);
    Rng rng(seed);
    const auto res = q_learning_run(mdp, ch, schedule, cfg, rng);
    rows[cell] = BiasGapRow{beta, seed, steps, sup_norm_gap(res.q, q_star)};
  }
  return rows;
}

std::vector<std::pair<double, double>> mean_gap_by_beta(const std::vector<BiasGapRow>& rows) {
  std::vector<std::pair<double, double>> out;
  std::vector<int> counts;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.beta; });
    if (it == out.end()) {
      out.emplace_back(r.beta, 0.0);
      counts.push_back(0);
      it = out.end() - 1;
    }
    it->second += r.gap;
    ++counts[it - out.begin()];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].second /= counts[i];
  return out;
}

void write_bias_gap_csv(std::ostream& os, const std::vector<BiasGapRow>& rows) {
  os << "beta,seed,steps,sup_norm_gap\n";
  os.precision(10);
  for (const auto& r : rows) os << r.beta << ',' << r.seed << ',' << r.steps << ',' << r.gap << '\n';
}

}  // namespace stun::lab
