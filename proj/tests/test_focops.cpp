#include <gtest/gtest.h>

#include <cmath>

#include "cade/focops.hpp"

using namespace cade;

namespace {

// Random row-stochastic log-probabilities for a multi-branch space.
Tensor random_log_probs(const ActionSpace& space, std::size_t T, Rng& rng) {
  Tensor logits(T, static_cast<std::size_t>(space.onehot_dim()));
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = rng.normal();
  Tape t(false);
  return ag::log_softmax_branches(t.constant(logits), space.branches()).value();
}

std::vector<Action> random_actions(const ActionSpace& space, std::size_t T, Rng& rng) {
  std::vector<Action> a(T);
  for (auto& x : a) {
    for (int n : space.branches()) x.branch.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
  }
  return a;
}

}  // namespace

TEST(Lagrange, StaysInsideBounds) {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    LagrangeState s;
    s.beta_max = rng.uniform(0.0, 5.0);
    s.beta = rng.uniform(0.0, s.beta_max);
    s.lr = rng.uniform(1e-4, 1.0);
    s.budget = rng.uniform(0.0, 3.0);
    const Real jc = rng.uniform(0.0, 50.0);
    const auto n = lagrange_update(s, jc);
    EXPECT_GE(n.beta, 0.0);
    EXPECT_LE(n.beta, s.beta_max);
    const Real raw = s.beta - s.lr * (s.budget - jc);
    EXPECT_DOUBLE_EQ(n.beta, std::min(s.beta_max, std::max(0.0, raw)));
  }
}

TEST(Lagrange, MonotoneInEpisodicCost) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    LagrangeState s;
    s.beta = rng.uniform(0.0, 2.0);
    const Real a = rng.uniform(0.0, 5.0), b = a + rng.uniform(0.0, 5.0);
    EXPECT_LE(lagrange_update(s, a).beta, lagrange_update(s, b).beta);
    // Over budget raises beta (until the cap), under budget lowers it.
    if (b > s.budget) EXPECT_GE(lagrange_update(s, b).beta, s.beta);
    if (a < s.budget) EXPECT_LE(lagrange_update(s, a).beta, s.beta);
  }
}

TEST(Lagrange, RejectsNegativeCost) {
  EXPECT_THROW(lagrange_update(LagrangeState{}, -0.1), std::invalid_argument);
}

TEST(CostAdvantage, SigmoidTransformValues) {
  EXPECT_NEAR(cost_advantage_transform(1.0), 1.0 / (1.0 + std::exp(-4.0)), 1e-12);
  EXPECT_NEAR(cost_advantage_transform(1.0), 0.9820, 5e-5);
  EXPECT_NEAR(cost_advantage_transform(0.0), 0.0180, 5e-5);
  EXPECT_NEAR(cost_advantage_transform(0.5), 0.5, 1e-12);
  Real prev = -1.0;
  for (Real x = -1.0; x <= 2.0; x += 0.01) {
    const Real y = cost_advantage_transform(x);
    EXPECT_GT(y, prev);
    EXPECT_GT(y, 0.0);
    EXPECT_LT(y, 1.0);
    prev = y;
  }
}

TEST(CostAdvantage, OneStepUsesPredictedObservation) {
  ImaginationModels m;
  m.predict = [](const PatchGrid& g, const Action& a) {
    PatchGrid n = g;
    n.values[0] = a.branch[0] == 1 ? 1.0 : 0.0;
    return n;
  };
  m.cost = [](const PatchGrid& g) { return g.values[0]; };
  PatchGrid obs{2, 2, {0, 0, 0, 0}};
  Rng rng(1);
  Tensor h(1, 4);
  CostAdvantageConfig cfg;
  EXPECT_NEAR(cost_advantage(m, obs, Action{{1}}, h, cfg, rng), 0.9820, 5e-5);
  EXPECT_NEAR(cost_advantage(m, obs, Action{{0}}, h, cfg, rng), 0.0180, 5e-5);
  cfg.horizon = 2;
  EXPECT_THROW(cost_advantage(m, obs, Action{{0}}, h, cfg, rng), std::invalid_argument);
}

TEST(CostAdvantage, MultiStepDiscountsAlongPolicyRollout) {
  NetConfig nc;
  nc.obs_dim = 4;
  nc.hidden = 8;
  nc.head_units = 8;
  CadeNetworks nets(nc, 5);
  ImaginationModels m;
  m.nets = &nets;
  m.predict = [](const PatchGrid& g, const Action&) { return g; };
  m.cost = [](const PatchGrid&) { return 1.0; };
  PatchGrid obs{2, 2, {0, 0, 0, 0}};
  Rng rng(2);
  const Real c = imagined_cost(m, obs, Action{{0}}, nets.zero_hidden(), 3, 0.5, rng);
  EXPECT_NEAR(c, 1.0 + 0.5 + 0.25, 1e-12);
}

TEST(PolicyLoss, ZeroGradientAtSnapshotWithoutAdvantage) {
  ActionSpace space(std::vector<int>{3, 4});
  Rng rng(8);
  const std::size_t T = 7;
  const Tensor old = random_log_probs(space, T, rng);
  const auto acts = random_actions(space, T, rng);
  std::vector<Real> zero(T, 0.0), ac(T);
  for (auto& v : ac) v = rng.uniform();
  // Differentiate through the logits: log_softmax of old reproduces old.
  Tape t;
  auto logits = t.variable(old);
  auto lp = ag::log_softmax_branches(logits, space.branches());
  auto res = policy_loss(lp, old, acts, zero, ac, 0.0, TrustRegionConfig{}, space);
  EXPECT_NEAR(res.loss.value().item(), 0.0, 1e-12);
  EXPECT_NEAR(res.mean_kl, 0.0, 1e-12);
  t.backward(res.loss);
  const Tensor g = t.grad(logits);
  for (Real v : g.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(PolicyLoss, MatchesDirectFormula) {
  ActionSpace space(std::vector<int>{5});
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng.below(12);
    const Tensor old = random_log_probs(space, T, rng);
    Tensor cur = old;
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += 0.05 * rng.normal();
    {
      Tape t0(false);
      cur = ag::log_softmax_branches(t0.constant(cur), space.branches()).value();
    }
    const auto acts = random_actions(space, T, rng);
    std::vector<Real> ar(T), ac(T);
    for (std::size_t i = 0; i < T; ++i) {
      ar[i] = rng.normal();
      ac[i] = rng.uniform();
    }
    const Real beta = rng.uniform(0.0, 2.0);
    TrustRegionConfig cfg;
    cfg.kl_mask = 0.003;
    Real expect = 0.0, kl_sum = 0.0;
    std::size_t kept = 0, masked = 0;
    for (std::size_t i = 0; i < T; ++i) {
      Real kl = 0.0;
      for (std::size_t k = 0; k < 5; ++k) kl += std::exp(cur(i, k)) * (cur(i, k) - old(i, k));
      kl_sum += kl;
      if (kl > cfg.kl_mask) {
        ++masked;
        continue;
      }
      const auto a = static_cast<std::size_t>(acts[i].branch[0]);
      const Real ratio = std::exp(cur(i, a) - old(i, a));
      expect += kl - ratio * (ar[i] - beta * ac[i]) / cfg.alpha;
      ++kept;
    }
    if (kept) expect /= static_cast<Real>(kept);
    Tape t;
    auto res = policy_loss(t.variable(cur), old, acts, ar, ac, beta, cfg, space);
    EXPECT_NEAR(res.loss.value().item(), expect, 1e-10);
    EXPECT_NEAR(res.mean_kl, kl_sum / static_cast<Real>(T), 1e-12);
    EXPECT_EQ(res.masked, masked);
  }
}

TEST(PolicyLoss, FullyMaskedBatchHasZeroGradient) {
  ActionSpace space(std::vector<int>{4});
  Rng rng(10);
  const std::size_t T = 5;
  const Tensor old = random_log_probs(space, T, rng);
  const Tensor cur = random_log_probs(space, T, rng);  // far from old
  const auto acts = random_actions(space, T, rng);
  std::vector<Real> ar(T, 1.0), ac(T, 0.5);
  TrustRegionConfig cfg;
  cfg.kl_mask = 1e-9;
  Tape t;
  auto lp = t.variable(cur);
  auto res = policy_loss(lp, old, acts, ar, ac, 1.0, cfg, space);
  EXPECT_EQ(res.masked, T);
  EXPECT_EQ(res.loss.value().item(), 0.0);
  t.backward(res.loss);
  const Tensor g = t.grad(lp);
  for (Real v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(PolicyLoss, LargerBetaPenalizesCostlyActionsMore) {
  // Gradient of the loss w.r.t. the taken action's log-prob grows with beta
  // when its cost advantage is positive: the update pushes it down harder.
  ActionSpace space(std::vector<int>{3});
  Rng rng(11);
  const Tensor old = random_log_probs(space, 1, rng);
  std::vector<Action> acts{Action{{1}}};
  std::vector<Real> ar{0.3}, ac{0.9};
  Real prev = -1e9;
  for (Real beta : {0.0, 0.5, 1.0, 2.0}) {
    Tape t;
    auto lp = t.variable(old);
    auto res = policy_loss(lp, old, acts, ar, ac, beta, TrustRegionConfig{}, space);
    t.backward(res.loss);
    const Real g = t.grad(lp)(0, 1);
    EXPECT_GT(g, prev);
    prev = g;
  }
}

TEST(PolicyLoss, RejectsMissingSnapshot) {
  ActionSpace space(std::vector<int>{3});
  Tape t;
  auto lp = t.variable(Tensor(1, 3));
  std::vector<Real> a{0.0};
  EXPECT_THROW(policy_loss(lp, Tensor(), {Action{{0}}}, a, a, 0.0, TrustRegionConfig{}, space), std::invalid_argument);
}

TEST(TrustRegion, EarlyStopIsStrict) {
  EXPECT_FALSE(kl_early_stop(0.02, 0.02));
  EXPECT_TRUE(kl_early_stop(0.0200001, 0.02));
  EXPECT_FALSE(kl_early_stop(0.0, 0.02));
  EXPECT_THROW(kl_early_stop(-1.0, 0.02), std::invalid_argument);
}

TEST(TrustRegion, MeanKlNonNegativeAndZeroOnSelf) {
  ActionSpace space(std::vector<int>{2, 3});
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_log_probs(space, 4, rng);
    const auto b = random_log_probs(space, 4, rng);
    EXPECT_GE(mean_kl(a, b), -1e-12);
    EXPECT_NEAR(mean_kl(a, a), 0.0, 1e-12);
  }
}
