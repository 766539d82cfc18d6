#include <gtest/gtest.h>

#include "cade/safety.hpp"

using namespace cade;

namespace {

// Toy models: the predicted next observation records the action in cell 0
// and the cost estimator returns 1 exactly for `costly`.
ImaginationModels toy_models(int costly) {
  ImaginationModels m;
  m.predict = [](const PatchGrid& g, const Action& a) {
    PatchGrid n = g;
    n.values[0] = static_cast<Real>(a.branch[0]);
    return n;
  };
  m.cost = [costly](const PatchGrid& g) { return g.values[0] == costly ? 1.0 : 0.0; };
  return m;
}

Tensor uniform_logits(int n) { return Tensor(1, static_cast<std::size_t>(n)); }

}  // namespace

TEST(SafetyLayer, ModesParseAndGate) {
  for (const char* s : {"off", "train", "infer", "both"}) EXPECT_EQ(to_string(parse_safety_mode(s)), s);
  EXPECT_THROW(parse_safety_mode("always"), std::invalid_argument);
  EXPECT_FALSE(safety_in_training(SafetyMode::kOff));
  EXPECT_TRUE(safety_in_training(SafetyMode::kTrain));
  EXPECT_FALSE(safety_in_inference(SafetyMode::kTrain));
  EXPECT_TRUE(safety_in_inference(SafetyMode::kInfer));
  EXPECT_TRUE(safety_in_training(SafetyMode::kBoth) && safety_in_inference(SafetyMode::kBoth));
}

TEST(SafetyLayer, ConfigValidation) {
  SafetyConfig c;
  EXPECT_NO_THROW(c.validate());
  c.threshold = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SafetyConfig{};
  c.samples = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SafetyConfig{};
  c.activation_fraction = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SafetyLayer, SafeProposalPassesThrough) {
  ActionSpace space(std::vector<int>{5});
  auto m = toy_models(3);
  PatchGrid obs{2, 2, {0, 0, 0, 0}};
  Rng rng(1);
  for (int a = 0; a < 5; ++a) {
    if (a == 3) continue;
    SampledAction p{Action{{a}}, -1.6};
    const auto r = screen_action(m, obs, p, uniform_logits(5), Tensor(1, 4), space, SafetyConfig{}, rng);
    EXPECT_FALSE(r.overridden);
    EXPECT_EQ(r.action.branch[0], a);
    EXPECT_EQ(r.log_prob, -1.6);
  }
}

TEST(SafetyLayer, UnsafeProposalIsReplacedBySafeSample) {
  ActionSpace space(std::vector<int>{5});
  auto m = toy_models(3);
  PatchGrid obs{2, 2, {0, 0, 0, 0}};
  Rng rng(2);
  int overrides = 0;
  for (int trial = 0; trial < 200; ++trial) {
    SampledAction p{Action{{3}}, std::log(0.2)};
    const auto r = screen_action(m, obs, p, uniform_logits(5), Tensor(1, 4), space, SafetyConfig{}, rng);
    EXPECT_EQ(r.proposed_cost, 1.0);
    // With 10 uniform samples, the chance none avoids action 3 is 0.2^10.
    if (r.overridden) {
      ++overrides;
      EXPECT_NE(r.action.branch[0], 3);
      EXPECT_EQ(r.chosen_cost, 0.0);
      EXPECT_NEAR(r.log_prob, std::log(0.2), 1e-12);
    }
  }
  EXPECT_EQ(overrides, 200);
}

TEST(SafetyLayer, DisabledOrHigherThresholdNeverOverrides) {
  ActionSpace space(std::vector<int>{5});
  auto m = toy_models(3);
  PatchGrid obs{2, 2, {0, 0, 0, 0}};
  Rng rng(3);
  SampledAction p{Action{{3}}, std::log(0.2)};
  SafetyConfig off;
  off.enabled = false;
  EXPECT_FALSE(screen_action(m, obs, p, uniform_logits(5), Tensor(1, 4), space, off, rng).overridden);
  SafetyConfig lax;
  lax.threshold = 1.5;
  EXPECT_FALSE(screen_action(m, obs, p, uniform_logits(5), Tensor(1, 4), space, lax, rng).overridden);
}

TEST(SafetyLayer, AlwaysUnsafeKeepsCheapestAndTiesPreferAlternative) {
  ActionSpace space(std::vector<int>{4});
  ImaginationModels m = toy_models(-1);
  // Every action costs at least the threshold; action 2 costs the most.
  m.cost = [](const PatchGrid& g) { return g.values[0] == 2 ? 3.0 : 1.0; };
  PatchGrid obs{1, 1, {0}};
  Rng rng(4);
  // Proposal is the expensive action: replaced by a cheaper one.
  const auto r = screen_action(m, obs, SampledAction{Action{{2}}, std::log(0.25)}, uniform_logits(4), Tensor(1, 2), space,
                               SafetyConfig{}, rng);
  EXPECT_TRUE(r.overridden);
  EXPECT_NE(r.action.branch[0], 2);
  EXPECT_EQ(r.chosen_cost, 1.0);
  // Policy mass entirely on action 2: every alternative costs more or the same.
  Tensor peaked(1, 4);
  peaked[2] = 50.0;
  const auto r2 = screen_action(m, obs, SampledAction{Action{{0}}, std::log(1e-20)}, peaked, Tensor(1, 2), space,
                                SafetyConfig{}, rng);
  EXPECT_FALSE(r2.overridden);
  EXPECT_EQ(r2.action.branch[0], 0);
}

TEST(SafetyLayer, OverrideRateFallsAsThresholdRises) {
  // Property: raising the threshold can only reduce the set of states in
  // which the proposal is judged unsafe.
  ActionSpace space(std::vector<int>{5});
  ImaginationModels m;
  m.predict = [](const PatchGrid& g, const Action& a) {
    PatchGrid n = g;
    n.values[0] = g.values[0] + 0.1 * a.branch[0];
    return n;
  };
  m.cost = [](const PatchGrid& g) { return g.values[0]; };
  Rng gen(5);
  std::vector<PatchGrid> states;
  for (int i = 0; i < 300; ++i) states.push_back(PatchGrid{1, 1, {gen.uniform(0.0, 1.0)}});
  int prev = 1 << 30;
  for (Real th : {0.2, 0.5, 0.8, 1.1, 1.5}) {
    SafetyConfig cfg;
    cfg.threshold = th;
    int n = 0;
    Rng rng(6);
    for (const auto& s : states) {
      n += screen_action(m, s, SampledAction{Action{{4}}, std::log(0.2)}, uniform_logits(5), Tensor(1, 2), space, cfg, rng)
               .overridden;
    }
    EXPECT_LE(n, prev);
    prev = n;
  }
  EXPECT_EQ(prev, 0);
}
