#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "stun/reward_estimator.hpp"

using namespace stun;

namespace {

LatentParams lin(double t) { return LatentParams({t, 1.0 - t}, MixingKind::Linear); }

Posterior over(std::vector<LatentParams> c, std::vector<double> p) {
  for (double& x : p) x = std::log(x);
  return Posterior::from_log_weights(std::move(c), std::move(p));
}

// Component j is drawn from [-3/(j+1), 0] so a shift in the weights moves the mixed reward.
std::vector<RewardComponents> probes(Rng& rng, int k, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<RewardComponents> out(n, RewardComponents(k));
  for (auto& c : out) {
    for (int j = 0; j < k; ++j) c[j] = -3.0 * u(rng) / (j + 1);
  }
  return out;
}

// Posterior summaries whose mean sits a constant delta away from the truth.
std::vector<DebiasPair> shifted_pairs(Rng& rng, int n, double delta) {
  std::uniform_real_distribution<double> t(0.1, 0.8);
  std::uniform_real_distribution<double> sd(0.02, 0.08);
  std::vector<DebiasPair> pairs;
  for (int i = 0; i < n; ++i) {
    const double x = t(rng);
    const double s = sd(rng);
    pairs.push_back(DebiasPair{{x + delta, 1.0 - x - delta, s, s}, lin(x)});
  }
  return pairs;
}

double mean_reward_bias(std::span<const DebiasPair> pairs, const std::vector<RewardComponents>& pr,
                        const RewardConfig& rc, const Debiaser* d) {
  double total = 0.0;
  for (const auto& p : pairs) {
    const LatentParams est = d ? (*d)(p.summary)
                               : LatentParams(project_to_domain({p.summary.begin(), p.summary.begin() + 2},
                                                                MixingKind::Linear),
                                              MixingKind::Linear);
    for (const auto& c : pr) total += mix(est, c, rc) - mix(p.truth, c, rc);
  }
  return total / (pairs.size() * pr.size());
}

}  // namespace

TEST_CASE("MAP estimate") {
  const std::vector<LatentParams> g{lin(0.0), lin(0.5), lin(1.0)};
  CHECK(map_estimate(over(g, {0.2, 0.5, 0.3})) == g[1]);
  CHECK(map_estimate(over({g[0], g[2]}, {0.5, 0.5})) == g[0]);
  CHECK(map_estimate(Posterior::from_log_weights({g[2]}, {0.0})) == g[2]);
  CHECK_THROWS_AS(map_estimate(Posterior{}), std::invalid_argument);
}

TEST_CASE("posterior mean") {
  CHECK(posterior_mean(over({lin(0.2), lin(0.8)}, {0.5, 0.5}))[0] == doctest::Approx(0.5));
  CHECK(posterior_mean(over({lin(0.0), lin(1.0)}, {0.25, 0.75}))[0] == doctest::Approx(0.75));
  CHECK(posterior_mean(Posterior::from_log_weights({lin(0.3)}, {0.0})) == lin(0.3));
  const Posterior nl = over({LatentParams({0.0, 1.0}, MixingKind::Nonlinear), LatentParams({1.0, 1.0}, MixingKind::Nonlinear)},
                            {0.25, 0.75});
  CHECK(posterior_mean(nl)[0] == doctest::Approx(0.75));
  CHECK(posterior_mean(nl)[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(posterior_mean(Posterior{}), std::invalid_argument);
}

TEST_CASE("MAP and mean differ on a skewed posterior") {
  const auto g = latent_grid(2, MixingKind::Linear, 10);
  std::vector<double> p(g.size(), 0.01);
  p[1] = 0.4;
  const double rest = (1.0 - 0.4) / (g.size() - 1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i != 1) p[i] = rest;
  }
  const auto post = over(g, p);
  CHECK(std::abs(map_estimate(post)[0] - posterior_mean(post)[0]) > 0.2);
}

TEST_CASE("posterior summary is mean then standard deviation") {
  const auto s = posterior_summary(over({lin(0.0), lin(1.0)}, {0.5, 0.5}));
  REQUIRE(s.size() == 4);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));
  CHECK(s[2] == doctest::Approx(0.5));
  CHECK(s[3] == doctest::Approx(0.5));
}

TEST_CASE("fresh debiaser returns the posterior mean") {
  const Debiaser d(2, MixingKind::Linear, 3);
  const auto post = over({lin(0.1), lin(0.4), lin(0.9)}, {0.2, 0.5, 0.3});
  const auto out = debias(d, post);
  const auto mean = posterior_mean(post);
  CHECK(out[0] == doctest::Approx(mean[0]).epsilon(1e-12));
  CHECK(debias(d, post) == out);
  const Debiaser d3(3, MixingKind::Linear, 0);
  CHECK_THROWS_AS(debias(d3, post), std::invalid_argument);
  CHECK_THROWS_AS(Debiaser(7, MixingKind::Linear, 0), std::invalid_argument);
}

TEST_CASE("debiaser outputs stay in the domain") {
  Rng rng(1);
  Debiaser d(2, MixingKind::Linear, 4);
  std::normal_distribution<double> n(0.0, 3.0);
  for (double& x : d.params()) x = n(rng);
  Debiaser dn(2, MixingKind::Nonlinear, 4);
  for (double& x : dn.params()) x = n(rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const std::vector<double> s{u(rng), u(rng), u(rng), u(rng)};
    const auto a = d(s);
    CHECK(a[0] + a[1] == doctest::Approx(1.0));
    for (double x : a.values) CHECK((x >= 0.0 && x <= 1.0));
    for (double x : dn(s).values) CHECK((x >= 0.0 && x <= 1.0));
  }
}

TEST_CASE("training on unbiased pairs stays near zero loss") {
  Rng rng(2);
  std::vector<DebiasPair> pairs = shifted_pairs(rng, 150, 0.0);
  const auto pr = probes(rng, 2, 32);
  RewardConfig rc;
  const Debiaser fresh(2, MixingKind::Linear, 0);
  CHECK(debias_loss(fresh, pairs, pr, rc) == doctest::Approx(0.0).epsilon(1e-20));
  DebiaserConfig cfg;
  cfg.epochs = 100;
  const auto d = train_debiaser(pairs, pr, rc, cfg);
  CHECK(debias_loss(d, pairs, pr, rc) <= 1e-6);
}

TEST_CASE("constant posterior-mean bias is removed") {
  Rng rng(6);
  const auto pairs = shifted_pairs(rng, 200, 0.1);
  const auto pr = probes(rng, 2, 32);
  RewardConfig rc;
  DebiaserConfig cfg;
  const auto d = train_debiaser(pairs, pr, rc, cfg);
  const double raw = std::abs(mean_reward_bias(pairs, pr, rc, nullptr));
  const double fixed = std::abs(mean_reward_bias(pairs, pr, rc, &d));
  CHECK(raw > 0.05);
  CHECK(fixed * 5.0 <= raw);
  CHECK(d.train_history().back() <= d.train_history().front());
}

TEST_CASE("holdout loss falls in epoch-averaged terms") {
  Rng rng(8);
  const auto pairs = shifted_pairs(rng, 300, 0.08);
  const auto pr = probes(rng, 2, 16);
  DebiaserConfig cfg;
  cfg.epochs = 300;
  const auto d = train_debiaser(pairs, pr, RewardConfig{}, cfg);
  const auto& h = d.holdout_history();
  REQUIRE(h.size() == 301);  // entry 0 is before any update
  std::vector<double> blocks;
  for (std::size_t b = 1; b < h.size(); b += 50) {
    blocks.push_back(std::accumulate(h.begin() + b, h.begin() + b + 50, 0.0) / 50.0);
  }
  for (std::size_t i = 1; i < blocks.size(); ++i) CHECK(blocks[i] <= blocks[i - 1]);
}

TEST_CASE("training preconditions and determinism") {
  Rng rng(9);
  const auto few = shifted_pairs(rng, 50, 0.1);
  const auto pr = probes(rng, 2, 8);
  CHECK_THROWS_AS(train_debiaser(few, pr, RewardConfig{}, DebiaserConfig{}), std::invalid_argument);
  const auto pairs = shifted_pairs(rng, 120, 0.1);
  DebiaserConfig cfg;
  cfg.epochs = 50;
  const auto a = train_debiaser(pairs, pr, RewardConfig{}, cfg);
  const auto b = train_debiaser(pairs, pr, RewardConfig{}, cfg);
  CHECK(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
  auto bad = pairs;
  bad[3].summary[0] = std::nan("");
  CHECK_THROWS(train_debiaser(bad, pr, RewardConfig{}, cfg));
}

TEST_CASE("debiaser checkpoint round trip") {
  Rng rng(10);
  const auto pairs = shifted_pairs(rng, 120, 0.05);
  const auto pr = probes(rng, 2, 8);
  DebiaserConfig cfg;
  cfg.epochs = 20;
  cfg.seed = 42;
  const auto d = train_debiaser(pairs, pr, RewardConfig{}, cfg);
  std::stringstream ss;
  d.save(ss);
  const auto back = Debiaser::load(ss);
  CHECK(back.k() == 2);
  CHECK(back.seed() == 42);
  CHECK(std::equal(d.params().begin(), d.params().end(), back.params().begin()));
  std::stringstream junk("nope");
  CHECK_THROWS_AS(Debiaser::load(junk), std::runtime_error);
}

TEST_CASE("estimator report") {
  const auto post = over({lin(0.0), lin(0.5), lin(1.0)}, {0.1, 0.6, 0.3});
  const Debiaser d(2, MixingKind::Linear, 1);
  const auto r = summarize(post, &d);
  CHECK(r.map == lin(0.5));
  CHECK(r.mean[0] == doctest::Approx(0.6));
  REQUIRE(r.debiased.has_value());
  CHECK(r.entropy == doctest::Approx(post.entropy()));
  CHECK_FALSE(summarize(post).debiased.has_value());
}
