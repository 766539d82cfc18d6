#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "cade/envs.hpp"

using namespace cade;

namespace {

Action move(int m) { return Action{{m}}; }

// Drives the agent around the ring clockwise from the top-left corner.
std::vector<int> ring_tour(const CliffConfig& cfg) {
  std::vector<int> moves;
  for (int i = 0; i < cfg.ring_side - 1; ++i) moves.push_back(CliffCircular::kRight);
  for (int i = 0; i < cfg.ring_side - 1; ++i) moves.push_back(CliffCircular::kDown);
  for (int i = 0; i < cfg.ring_side - 1; ++i) moves.push_back(CliffCircular::kLeft);
  for (int i = 0; i < cfg.ring_side - 1; ++i) moves.push_back(CliffCircular::kUp);
  return moves;
}

}  // namespace

TEST(CliffCircular, ResetIsDeterministic) {
  CliffCircular a(Level::kMedium), b(Level::kMedium);
  EXPECT_EQ(a.reset(42), b.reset(42));
  Rng rng(1);
  for (int i = 0; i < 50 && !a.done(); ++i) {
    const auto m = move(static_cast<int>(rng.below(5)));
    const auto ra = a.step(m), rb = b.step(m);
    EXPECT_EQ(ra.obs, rb.obs);
    EXPECT_EQ(ra.cost, rb.cost);
  }
}

TEST(CliffCircular, CliffCountsIncreaseWithLevel) {
  int prev = -1;
  for (auto lv : {Level::kEasy, Level::kMedium, Level::kHard}) {
    CliffCircular env(lv);
    env.reset(3);
    int n = 0;
    for (int r = 0; r < 12; ++r)
      for (int c = 0; c < 12; ++c) {
        n += env.is_cliff(r, c) && !env.is_wall(r, c);
        if (env.is_cliff(r, c)) EXPECT_FALSE(env.on_ring(r, c));
      }
    EXPECT_EQ(n, env.cliff_count());
    EXPECT_GT(n, prev);
    prev = n;
    EXPECT_FALSE(env.is_cliff(env.agent_row(), env.agent_col()));
  }
}

TEST(CliffCircular, RingHasTwentyCellsFormingACycle) {
  CliffCircular env(Level::kEasy);
  EXPECT_EQ(env.reward_units(), 20u);
  std::set<int> idx;
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c)
      if (env.on_ring(r, c)) {
        idx.insert(env.ring_index(r, c));
        int nbrs = 0;
        for (auto [dr, dc] : std::vector<std::pair<int, int>>{{-1, 0}, {1, 0}, {0, -1}, {0, 1}})
          nbrs += env.on_ring(r + dr, c + dc);
        EXPECT_EQ(nbrs, 2);
      }
  EXPECT_EQ(idx.size(), 20u);
}

TEST(CliffCircular, RewardOnFirstVisitOnly) {
  CliffCircular env(Level::kEasy);
  env.reset(1);
  env.set_cliffs({});
  EXPECT_EQ(env.step(move(CliffCircular::kRight)).reward, 1.0);
  EXPECT_EQ(env.step(move(CliffCircular::kLeft)).reward, 1.0);  // spawn cell, not yet visited
  EXPECT_EQ(env.step(move(CliffCircular::kRight)).reward, 0.0);
  EXPECT_EQ(env.step(move(CliffCircular::kNoop)).reward, 0.0);
  EXPECT_EQ(env.step(move(CliffCircular::kDown)).reward, 0.0);  // off the ring
}

TEST(CliffCircular, FullCoverageReturnsTwenty) {
  for (auto lv : {Level::kEasy, Level::kMedium, Level::kHard}) {
    CliffCircular env(lv);
    env.reset(9);
    double ret = 0.0;
    StepResult last;
    for (int m : ring_tour(env.config())) {
      last = env.step(move(m));
      ret += last.reward;
      EXPECT_GE(last.reward, 0.0);
    }
    EXPECT_EQ(ret, 20.0);
    EXPECT_TRUE(last.terminal);
    EXPECT_EQ(last.kind, TerminalKind::kComplete);
  }
}

TEST(CliffCircular, NeighbourCostAndCliffTermination) {
  CliffCircular env(Level::kEasy);
  env.reset(1);
  env.set_cliffs({{2, 3}, {2, 4}, {4, 4}});
  env.set_agent(3, 3);
  // neighbours of (3,3): (2,3), (2,4), (4,4) -> 3/8
  EXPECT_DOUBLE_EQ(env.cost_here(), 3.0 / 8.0);
  env.set_cliffs({{2, 3}, {4, 4}});
  EXPECT_DOUBLE_EQ(env.cost_here(), 0.25);
  const auto r = env.step(move(CliffCircular::kUp));
  EXPECT_TRUE(r.terminal);
  EXPECT_EQ(r.kind, TerminalKind::kSevere);
  EXPECT_EQ(r.cost, 1.0);
  EXPECT_THROW(env.step(move(0)), std::logic_error);
}

TEST(CliffCircular, WallsBoundAThreeWideCorridor) {
  CliffCircular env(Level::kEasy);
  env.reset(2);
  env.set_cliffs({});
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) {
      // Independent distance: nearest ring cell by brute force.
      int d = 100;
      for (int rr = 0; rr < 12; ++rr)
        for (int cc = 0; cc < 12; ++cc)
          if (env.on_ring(rr, cc)) d = std::min(d, std::max(std::abs(rr - r), std::abs(cc - c)));
      EXPECT_EQ(env.is_wall(r, c), d > 1) << r << "," << c;
      EXPECT_EQ(env.is_cliff(r, c), d > 1);
    }
  // Walls are visible from the track but outside its cost neighbourhood.
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c)
      if (env.on_ring(r, c)) {
        env.set_agent(r, c);
        EXPECT_EQ(env.cost_here(), 0.0);
        const auto g = env.observe();
        EXPECT_GT(std::count(g.values.begin(), g.values.end(), 1.0), 0);
      }
  CliffConfig open;
  open.wall_margin = -1;
  CliffCircular bare(Level::kEasy, open);
  bare.reset(2);
  bare.set_cliffs({});
  EXPECT_FALSE(bare.is_cliff(0, 0));
}

TEST(CliffCircular, EdgeMovesClampAndBadActionsThrow) {
  CliffConfig cfg;
  cfg.wall_margin = -1;
  CliffCircular env(Level::kEasy, cfg);
  env.reset(1);
  env.set_cliffs({});
  env.set_agent(0, 0);
  env.step(move(CliffCircular::kUp));
  EXPECT_EQ(env.agent_row(), 0);
  env.step(move(CliffCircular::kLeft));
  EXPECT_EQ(env.agent_col(), 0);
  EXPECT_THROW(env.step(move(5)), std::out_of_range);
}

TEST(CliffCircular, CostIsAFunctionOfTheObservation) {
  CliffCircular env(Level::kHard);
  Rng rng(77);
  int checked = 0;
  std::uint64_t seed = 0;
  env.reset(seed);
  while (checked < 20000) {
    if (env.done()) env.reset(++seed);
    const auto r = env.step(move(static_cast<int>(rng.below(5))));
    ASSERT_EQ(CliffCircular::cost_from_observation(r.obs), r.cost);
    ++checked;
  }
}

TEST(CliffCircular, VisitedSetMonotone) {
  CliffCircular env(Level::kMedium);
  Rng rng(5);
  for (int e = 0; e < 50; ++e) {
    env.reset(e);
    std::size_t prev = 0;
    double ret = 0;
    while (!env.done()) {
      const auto before = env.visited();
      const auto r = env.step(move(static_cast<int>(rng.below(5))));
      for (std::size_t i = 0; i < before.size(); ++i)
        if (before[i]) EXPECT_TRUE(env.visited()[i]);
      EXPECT_EQ(r.reward, true_marginal_gain(prev, env.visited_count()));
      prev = env.visited_count();
      ret += r.reward;
      if (!r.terminal) EXPECT_FALSE(env.is_cliff(env.agent_row(), env.agent_col()));
    }
    EXPECT_LE(ret, 20.0);
  }
}

TEST(Submodularity, ExhaustiveSmallInstances) {
  // Every pair S1 subset-of S2 over 6 units and every candidate unit set of size <= 2.
  const int n = 6;
  for (int s2 = 0; s2 < (1 << n); ++s2) {
    for (int s1 = s2;; s1 = (s1 - 1) & s2) {
      std::vector<bool> v1(n), v2(n);
      for (int i = 0; i < n; ++i) {
        v1[i] = s1 >> i & 1;
        v2[i] = s2 >> i & 1;
      }
      for (int a = 0; a < n; ++a)
        for (int b = a; b < n; ++b) {
          const std::vector<int> units{a, b};
          EXPECT_GE(coverage_gain(units, v1), coverage_gain(units, v2));
          EXPECT_GE(coverage_gain(units, v2), 0.0);
        }
      if (s1 == 0) break;
    }
  }
}

TEST(PlanarRiver, ResetDeterministicAndSpawnOnRiver) {
  for (auto lv : {Level::kEasy, Level::kMedium, Level::kHard}) {
    PlanarRiver a(lv), b(lv);
    EXPECT_EQ(a.reset(5), b.reset(5));
    EXPECT_LT(a.spline().nearest({a.pose().x, a.pose().y}).distance, a.config().width / 2);
    EXPECT_GT(a.visited_count(), 0u);
    EXPECT_GT(a.spline().min_separation(48), 2 * a.config().width);
  }
}

TEST(PlanarRiver, NoopKeepsPoseAndGivesNoReward) {
  PlanarRiver env(Level::kMedium);
  env.reset(3);
  const auto p = env.pose();
  const auto r = env.step(Action{{1, 1, 1, 1}});
  EXPECT_EQ(env.pose().x, p.x);
  EXPECT_EQ(env.pose().y, p.y);
  EXPECT_EQ(env.pose().z, p.z);
  EXPECT_EQ(env.pose().yaw, p.yaw);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_THROW(env.step(Action{{1, 3, 1, 1}}), std::out_of_range);
}

TEST(PlanarRiver, YawFlipIsMinorTermination) {
  PlanarRiver env(Level::kEasy);
  env.reset(3);
  auto p = env.pose();
  p.yaw = wrap_angle(p.yaw + M_PI);
  env.set_pose(p);
  const auto r = env.step(Action{{1, 1, 1, 1}});
  EXPECT_TRUE(r.terminal);
  EXPECT_EQ(r.kind, TerminalKind::kMinor);
  EXPECT_EQ(r.cost, 0.5);
}

TEST(PlanarRiver, LeavingTheRiverIsSevere) {
  PlanarRiver env(Level::kEasy);
  env.reset(3);
  StepResult r;
  for (int i = 0; i < 100 && !env.done(); ++i) r = env.step(Action{{1, 1, 1, 2}});  // strafe left
  EXPECT_EQ(r.kind, TerminalKind::kSevere);
  EXPECT_EQ(r.cost, 1.0);
  EXPECT_GT(env.spline().nearest({env.pose().x, env.pose().y}).distance, env.config().d_max);
  env.reset(3);
  for (int i = 0; i < 100 && !env.done(); ++i) r = env.step(Action{{2, 1, 1, 1}});  // climb
  EXPECT_EQ(r.kind, TerminalKind::kSevere);
  EXPECT_GT(env.pose().z, env.config().z_max);
}

TEST(PlanarRiver, StraightRiverViewIsSymmetric) {
  RiverConfig cfg;
  PlanarRiver env(Level::kEasy, cfg);
  std::vector<Vec2> ctrl;
  for (int i = -1; i <= 12; ++i) ctrl.push_back({10.0 * i, 0.0});
  env.set_spline(RiverSpline(ctrl, cfg.segments));
  env.set_pose({30.0, 0.0, 6.0, 0.0});
  const auto g = env.render();
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(g.at(r, c), g.at(r, 15 - c));
  EXPECT_EQ(g.at(15, 7), 1.0);
  EXPECT_EQ(g.at(15, 8), 1.0);
  EXPECT_EQ(g.at(0, 0), 0.0);
  // Far over dry land: nothing.
  env.set_pose({30.0, 500.0, 6.0, M_PI / 2});
  for (double v : env.render().values) EXPECT_EQ(v, 0.0);
}

TEST(PlanarRiver, PatchThresholdIsStrictMajority) {
  std::vector<std::uint8_t> img(16 * 16, 0);
  for (int k = 0; k < 33; ++k) img[(k / 8) * 16 + k % 8] = 1;  // 33 of the top-left 8x8 block
  for (int k = 0; k < 32; ++k) img[(k / 8) * 16 + 8 + k % 8] = 1;
  const auto g = PlanarRiver::patchify(img, 16, 2);
  EXPECT_EQ(g.at(0, 0), 1.0);
  EXPECT_EQ(g.at(0, 1), 0.0);
}

TEST(PlanarRiver, RenderIsPoseContinuous) {
  PlanarRiver env(Level::kHard);
  env.reset(11);
  auto p = env.pose();
  const auto a = env.render(p);
  p.x += 1e-10;
  p.yaw += 1e-10;
  EXPECT_EQ(a, env.render(p));
}

TEST(PlanarRiver, BandCost) {
  PlanarRiver env(Level::kEasy);
  EXPECT_EQ(env.band_cost(0.3), 0.0);
  EXPECT_EQ(env.band_cost(0.15), 0.0);
  EXPECT_DOUBLE_EQ(env.band_cost(0.0), 1.0);
  EXPECT_DOUBLE_EQ(env.band_cost(1.0), 1.0);
  EXPECT_NEAR(env.band_cost(0.075), 0.5, 1e-12);
}

TEST(PlanarRiver, RewardBoundedAndVisitedMonotone) {
  PlanarRiver env(Level::kMedium);
  Rng rng(2);
  for (int e = 0; e < 10; ++e) {
    env.reset(e);
    std::size_t prev = env.visited_count();
    double ret = 0;
    while (!env.done()) {
      const auto r = env.step(Action{{int(rng.below(3)), int(rng.below(3)), 2, int(rng.below(3))}});
      EXPECT_EQ(r.reward, true_marginal_gain(prev, env.visited_count()));
      prev = env.visited_count();
      ret += r.reward;
      EXPECT_GE(r.cost, 0.0);
      EXPECT_LE(r.cost, 1.0);
    }
    EXPECT_LE(ret, 40.0);
  }
}
