#include <gtest/gtest.h>

#include <cmath>

#include "cade/advantage.hpp"
#include "cade/rng.hpp"

using namespace cade;

namespace {

struct RandomTraj {
  std::vector<double> r, rhat, v, lp, lm;
};

RandomTraj random_traj(Rng& rng) {
  RandomTraj t;
  const std::size_t T = 1 + rng.below(20);
  for (std::size_t i = 0; i < T; ++i) {
    t.r.push_back(rng.uniform() < 0.4 ? 1.0 : 0.0);
    t.rhat.push_back(rng.uniform(-0.2, 1.2));
    t.v.push_back(rng.uniform(-2, 5));
    t.lp.push_back(rng.uniform(-3, 0));
    t.lm.push_back(rng.uniform(-3, 0));
  }
  t.v.push_back(rng.uniform() < 0.5 ? 0.0 : rng.uniform(-2, 5));
  return t;
}

// Direct summation oracles.
double gae_oracle(const RandomTraj& t, std::size_t s, double g, double l) {
  double a = 0.0;
  for (std::size_t k = s; k < t.r.size(); ++k)
    a += std::pow(g * l, double(k - s)) * (t.r[k] + g * t.v[k + 1] - t.v[k]);
  return a;
}

double rtg_oracle(const RandomTraj& t, std::size_t s, double g) {
  double a = 0.0;
  for (std::size_t k = s; k < t.r.size(); ++k) a += std::pow(g, double(k - s)) * t.r[k];
  return a + std::pow(g, double(t.r.size() - s)) * t.v.back();
}

double vtrace_target_oracle(const RandomTraj& t, std::size_t s, double g) {
  if (s == t.r.size()) return t.v.back();
  double v = t.v[s];
  for (std::size_t k = s; k < t.r.size(); ++k) {
    double cprod = 1.0;
    for (std::size_t i = s; i < k; ++i) cprod *= std::min(1.0, std::exp(t.lp[i] - t.lm[i]));
    const double rho = std::min(1.0, std::exp(t.lp[k] - t.lm[k]));
    v += std::pow(g, double(k - s)) * cprod * rho * (t.r[k] + g * t.v[k + 1] - t.v[k]);
  }
  return v;
}

}  // namespace

TEST(Mgae, TableExample) {
  const std::vector<double> r{1, 0, 1};
  const auto a = mgae(r, r, 2.0);
  // A_1 = (0 + 1) + (1 + 0) - 2
  EXPECT_DOUBLE_EQ(a[1], 0.0);
  EXPECT_DOUBLE_EQ(a[0], 2.0 + 1.0 - 2.0);
  EXPECT_DOUBLE_EQ(a[2], 1.0 + 2.0 - 2.0);
}

TEST(Mgae, BaselineOnly) {
  const std::vector<double> z(5, 0.0);
  for (double x : mgae(z, z, 0.0)) EXPECT_EQ(x, 0.0);
  for (double x : mgae(z, z, 3.5)) EXPECT_EQ(x, -3.5);
  EXPECT_THROW(mgae(z, std::vector<double>(4), 0.0), std::invalid_argument);
}

TEST(Mgae, ShiftProperty) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_traj(rng);
    ReturnWindow w1(10), w2(10);
    const double kappa = rng.uniform(-5, 5);
    for (int e = 0; e < 1 + static_cast<int>(rng.below(15)); ++e) {
      const double ret = rng.uniform(0, 20);
      w1.push(ret);
      w2.push(ret + kappa);
    }
    const auto a1 = mgae(t.r, t.rhat, w1.mean());
    const auto a2 = mgae(t.r, t.rhat, w2.mean());
    for (std::size_t i = 0; i < a1.size(); ++i) EXPECT_NEAR(a2[i], a1[i] - kappa, 1e-12);
  }
}

TEST(Mgae, ExclusivePerfectEstimatorReconstructsReturn) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_traj(rng);
    const double ret = std::accumulate(t.r.begin(), t.r.end(), 0.0);
    for (double a : mgae(t.r, t.r, 1.5, MgaeMode::kExclusive)) EXPECT_DOUBLE_EQ(a, ret - 1.5);
  }
}

TEST(ReturnWindow, SlidingMean) {
  ReturnWindow w(3);
  EXPECT_EQ(w.mean(), 0.0);
  w.push(1);
  w.push(2);
  EXPECT_DOUBLE_EQ(w.mean(), 1.5);
  w.push(3);
  w.push(10);
  EXPECT_EQ(w.size(), 3u);
  EXPECT_DOUBLE_EQ(w.mean(), 5.0);
}

TEST(Gae, HandExample) {
  const std::vector<double> r{1, 1}, v{0.5, 0.5, 0};
  const auto a = gae(r, v, 0.9, 0.95);
  EXPECT_NEAR(a[0], 1.3775, 1e-12);
  EXPECT_NEAR(a[1], 0.5, 1e-12);
}

TEST(Gae, LimitsAndOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto t = random_traj(rng);
    const double g = rng.uniform(0.8, 1.0), l = rng.uniform(0, 1);
    const auto a0 = gae(t.r, t.v, g, 0.0);
    const auto tdv = td(t.r, t.v, g);
    for (std::size_t i = 0; i < a0.size(); ++i) EXPECT_EQ(a0[i], tdv[i]);
    const auto a = gae(t.r, t.v, g, l);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], gae_oracle(t, i, g, l), 1e-10);
    const auto a1 = gae(t.r, t.v, g, 1.0);
    for (std::size_t i = 0; i < a1.size(); ++i) EXPECT_NEAR(a1[i], rtg_oracle(t, i, g) - t.v[i], 1e-10);
    // continuity in lambda
    const auto ae = gae(t.r, t.v, g, l + 1e-9);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], ae[i], 1e-6);
  }
  const std::vector<double> r{1, 1, 1};
  const auto rtg = gae(r, std::vector<double>(4, 0.0), 1.0, 1.0);
  EXPECT_EQ(rtg, (std::vector<double>{3, 2, 1}));
}

TEST(Td, Examples) {
  EXPECT_EQ(td(std::vector<double>{0, 0}, std::vector<double>{2, 2, 2}, 1.0), (std::vector<double>{0, 0}));
  EXPECT_EQ(td(std::vector<double>{1}, std::vector<double>{0, 0}, 0.9), (std::vector<double>{1}));
  EXPECT_NEAR(td(std::vector<double>{1}, std::vector<double>{0.5, 0}, 0.9)[0], 0.5, 1e-15);
  EXPECT_THROW(td(std::vector<double>{1}, std::vector<double>{0.5}, 0.9), std::invalid_argument);
}

TEST(Reinforce, Examples) {
  const std::vector<double> r{1, 0, 1};
  EXPECT_EQ(reinforce_baseline(r, std::vector<double>{1, 1, 1, 0}, 1.0), (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(reinforce_baseline(r, std::vector<double>{2, 1, 1, 0}, 1.0), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(reinforce_baseline(r, std::vector<double>{0, 0, 0, 0}, 1.0), (std::vector<double>{2, 1, 1}));
}

TEST(Vtrace, OnPolicyMatchesGaeLambdaOne) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    auto t = random_traj(rng);
    const auto v = vtrace(t.r, t.v, 0.99, t.lp, t.lp);
    const auto a = gae(t.r, t.v, 0.99, 1.0);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(v.advantages[i], a[i], 1e-10);
  }
}

TEST(Vtrace, ClippingAndScaling) {
  const std::vector<double> r{1}, v{0.5, 0.0};
  // ratio 4 clipped to 1
  const auto a = vtrace(r, v, 0.9, std::vector<double>{std::log(0.8)}, std::vector<double>{std::log(0.2)});
  EXPECT_NEAR(a.advantages[0], 0.5, 1e-12);
  // ratio 0.5 scales delta
  const auto b = vtrace(r, v, 0.9, std::vector<double>{std::log(0.1)}, std::vector<double>{std::log(0.2)});
  EXPECT_NEAR(b.advantages[0], 0.25, 1e-12);
  EXPECT_NEAR(b.targets[0], 0.5 + 0.25, 1e-12);
}

TEST(Vtrace, MatchesDirectSummation) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const auto t = random_traj(rng);
    const double g = rng.uniform(0.8, 1.0);
    const auto v = vtrace(t.r, t.v, g, t.lp, t.lm);
    for (std::size_t s = 0; s < t.r.size(); ++s) {
      EXPECT_NEAR(v.targets[s], vtrace_target_oracle(t, s, g), 1e-10);
      const double rho = std::min(1.0, std::exp(t.lp[s] - t.lm[s]));
      EXPECT_NEAR(v.advantages[s], rho * (t.r[s] + g * vtrace_target_oracle(t, s + 1, g) - t.v[s]), 1e-10);
    }
  }
}

TEST(Normalize, Examples) {
  auto a = normalize(std::vector<double>{1, -1});
  EXPECT_NEAR(a[0], 1.0, 1e-7);
  EXPECT_NEAR(a[1], -1.0, 1e-7);
  for (double x : normalize(std::vector<double>{3, 3, 3})) EXPECT_EQ(x, 0.0);
  const auto b = normalize(std::vector<double>{0, 2, 4});
  EXPECT_NEAR(b[0], -1.2247, 1e-4);
  EXPECT_NEAR(b[1], 0.0, 1e-12);
  EXPECT_NEAR(b[2], 1.2247, 1e-4);
  EXPECT_EQ(normalize(std::vector<double>{5}), (std::vector<double>{5}));
}

TEST(Estimators, PureAndCriticTargets) {
  Rng rng(8);
  const auto t = random_traj(rng);
  AdvantageInputs in{t.r, t.rhat, t.v, t.lp, t.lm, 1.0, 0.99, 0.95};
  for (auto e : {AdvEstimator::kMgae, AdvEstimator::kTd, AdvEstimator::kGae, AdvEstimator::kGaeRtg,
                 AdvEstimator::kReinforce, AdvEstimator::kVtrace}) {
    const auto a = estimate_advantages(e, in), b = estimate_advantages(e, in);
    EXPECT_EQ(a.advantages, b.advantages);
    EXPECT_EQ(a.critic_targets.size(), uses_critic(e) ? t.r.size() : 0u);
    EXPECT_EQ(parse_adv(to_string(e)), e);
  }
  EXPECT_THROW(parse_adv("bogus"), std::invalid_argument);
  const auto gr = estimate_advantages(AdvEstimator::kGaeRtg, in);
  for (std::size_t i = 0; i < t.r.size(); ++i) EXPECT_NEAR(gr.critic_targets[i], rtg_oracle(t, i, 0.99), 1e-10);
}
