#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "cade/homography.hpp"

using namespace cade;

namespace {

// Direct linear transform: null vector of the 8x9 homogeneous system via SVD.
Tensor dlt_oracle(const std::vector<double>& off, std::size_t rows, std::size_t cols) {
  const double r = rows - 1.0, c = cols - 1.0;
  const double src[4][2] = {{0, 0}, {r, 0}, {r, c}, {0, c}};
  Eigen::Matrix<double, 8, 9> M;
  for (int k = 0; k < 4; ++k) {
    const double u = src[k][0], v = src[k][1];
    const double up = u + off[2 * k], vp = v + off[2 * k + 1];
    M.row(2 * k) << u, v, 1, 0, 0, 0, -up * u, -up * v, -up;
    M.row(2 * k + 1) << 0, 0, 0, u, v, 1, -vp * u, -vp * v, -vp;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeFullV);
  Eigen::VectorXd h = svd.matrixV().col(8);
  h /= h(8);
  Tensor out(3, 3);
  for (int i = 0; i < 9; ++i) out[i] = h(i);
  return out;
}

// Reference shift by integer cells with 0.5 fill.
Tensor shifted(const Tensor& g, int du, int dv) {
  Tensor out(g.rows(), g.cols(), 0.5);
  for (int i = 0; i < static_cast<int>(g.rows()); ++i)
    for (int j = 0; j < static_cast<int>(g.cols()); ++j) {
      const int si = i - du, sj = j - dv;
      if (si >= 0 && sj >= 0 && si < static_cast<int>(g.rows()) && sj < static_cast<int>(g.cols()))
        out(i, j) = g(si, sj);
    }
  return out;
}

Tensor random_binary(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t(r, c);
  for (auto& x : t.values()) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return t;
}

std::vector<double> translation_offsets(double du, double dv) { return {du, dv, du, dv, du, dv, du, dv}; }

}  // namespace

TEST(Homography, ZeroOffsetsGiveIdentity) {
  const auto h = solve_homography(std::vector<double>(8, 0.0), 16, 16);
  EXPECT_EQ(h, Tensor(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
}

TEST(Homography, ColumnTranslation) {
  // (du, dv) = (0, 2) on every corner shifts v by 2.
  const auto h = solve_homography(translation_offsets(0, 2), 5, 5);
  const auto ref = dlt_oracle(translation_offsets(0, 2), 5, 5);
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(h[i], ref[i], 1e-10);
  EXPECT_NEAR(h(0, 2), 0.0, 1e-12);
  EXPECT_NEAR(h(1, 2), 2.0, 1e-12);
  EXPECT_NEAR(h(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(h(2, 0), 0.0, 1e-12);
}

TEST(Homography, SingleCornerMatchesDlt) {
  const std::vector<double> off{0, 0, 0, 0, 1, 1, 0, 0};
  const auto h = solve_homography(off, 5, 5);
  const auto ref = dlt_oracle(off, 5, 5);
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(h[i], ref[i], 1e-8);
}

TEST(Homography, RandomOffsetsMatchDltAndMapCorners) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = trial % 2 ? 16 : 5;
    std::vector<double> off(8);
    for (auto& o : off) o = rng.uniform(-1.5, 1.5);
    const auto h = solve_homography(off, n, n);
    const auto ref = dlt_oracle(off, n, n);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(h[i], ref[i], 1e-8);
    const auto src = corner_points(n, n);
    for (int k = 0; k < 4; ++k) {
      double u, v;
      ASSERT_TRUE(apply_homography(h, src[k][0], src[k][1], u, v));
      EXPECT_NEAR(u, src[k][0] + off[2 * k], 1e-6);
      EXPECT_NEAR(v, src[k][1] + off[2 * k + 1], 1e-6);
    }
  }
}

TEST(Homography, DegenerateQuadrilateralThrowsWithCondition) {
  // Collapse three corners onto a line.
  const std::vector<double> off{0, 0, -4, 0, -4, -4, 0, -4};
  try {
    solve_homography(off, 5, 5);
    FAIL() << "expected HomographyError";
  } catch (const HomographyError& e) {
    EXPECT_GT(e.condition(), 1e12);
  }
}

TEST(Homography, AnalyticBackwardMatchesFiniteDifference) {
  Rng rng(3);
  Tensor w(3, 3);
  for (auto& x : w.values()) x = rng.normal();
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p(1, 8);
    for (auto& x : p.values()) x = rng.uniform(-1, 1);
    const auto f = [&](ag::Tape& t, ag::Var x) {
      return ag::sum(ag::mul(solve_homography(x, 16, 16), t.constant(w)));
    };
    EXPECT_LT(ag::grad_check(f, p, 1e-6), 1e-6);
    // The finite-difference fallback agrees with the analytic rule.
    ag::Tape ta, tf;
    auto xa = ta.variable(p), xf = tf.variable(p);
    ta.backward(ag::sum(ag::mul(solve_homography(xa, 16, 16), ta.constant(w))));
    tf.backward(ag::sum(ag::mul(solve_homography(xf, 16, 16, SolveBackward::kFiniteDifference), tf.constant(w))));
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(ta.grad(xa)[i], tf.grad(xf)[i], 1e-4);
  }
}

TEST(Warp, IdentityIsExact) {
  Rng rng(1);
  Tensor g(16, 16);
  for (auto& x : g.values()) x = rng.uniform();
  EXPECT_EQ(warp(g, solve_homography(std::vector<double>(8, 0.0), 16, 16)), g);
}

TEST(Warp, IntegerTranslationShiftsCells) {
  Rng rng(2);
  const auto g = random_binary(5, 5, rng);
  for (auto [du, dv] : std::vector<std::pair<int, int>>{{0, 1}, {1, 0}, {0, -1}, {-1, 0}, {2, -1}}) {
    const auto h = solve_homography(translation_offsets(du, dv), 5, 5);
    const auto out = warp(g, h);
    const auto ref = shifted(g, du, dv);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(out[i], ref[i], 1e-9) << du << "," << dv;
  }
}

TEST(Warp, LargeTranslationIsAllVacant) {
  Rng rng(2);
  const auto g = random_binary(5, 5, rng);
  const auto out = warp(g, solve_homography(translation_offsets(40, -40), 5, 5));
  for (double x : out.values()) EXPECT_DOUBLE_EQ(x, 0.5);
}

TEST(Warp, KnownMaskMatchesTranslation) {
  const auto mask = warp_known_mask(5, 5, solve_homography(translation_offsets(0, 1), 5, 5));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(mask[i * 5 + j], j >= 1);
}

TEST(Warp, CompositionConsistency) {
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    // Smooth source so bilinear resampling error stays small.
    Tensor g(16, 16);
    const double a = rng.uniform(0.1, 0.4), b = rng.uniform(0.1, 0.4), ph = rng.uniform(0, 6.28);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) g(i, j) = 0.5 + 0.5 * std::sin(a * i + b * j + ph);
    std::vector<double> o1(8), o2(8);
    for (auto& o : o1) o = rng.uniform(-1, 1);
    for (auto& o : o2) o = rng.uniform(-1, 1);
    const auto h1 = solve_homography(o1, 16, 16), h2 = solve_homography(o2, 16, 16);
    Tensor h21(3, 3);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 3; ++k) h21(r, c) += h2(r, k) * h1(k, c);
    const auto twice = warp(warp(g, h1), h2);
    const auto once = warp(g, h21);
    // In-bounds: destination cells whose composite preimage and intermediate
    // bilinear footprint stay inside the source.
    const auto m2 = warp_known_mask(16, 16, h2);
    const auto m21 = warp_known_mask(16, 16, h21);
    const auto m1 = warp_known_mask(16, 16, h1);
    double err = 0.0;
    int n = 0;
    const auto h2inv = homography_inverse(h2);
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        if (!m2[i * 16 + j] || !m21[i * 16 + j]) continue;
        double u, v;
        apply_homography(h2inv, i, j, u, v);
        bool inside = true;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const int ii = std::min(15, static_cast<int>(std::floor(u)) + di);
            const int jj = std::min(15, static_cast<int>(std::floor(v)) + dj);
            if (ii < 0 || jj < 0 || !m1[ii * 16 + jj]) inside = false;
          }
        if (!inside) continue;
        err += std::abs(twice(i, j) - once(i, j));
        ++n;
      }
    if (n > 0) worst = std::max(worst, err / n);
  }
  EXPECT_LT(worst, 0.02);
}

TEST(Warp, GradientMatchesFiniteDifference) {
  Rng rng(7);
  Tensor g(6, 6);
  for (auto& x : g.values()) x = rng.uniform();
  Tensor target(6, 6);
  for (auto& x : target.values()) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor p(1, 8);
    for (auto& x : p.values()) x = rng.uniform(-0.8, 0.8);
    const auto f = [&](ag::Tape& t, ag::Var x) {
      return jaccard_loss(warp(t.constant(g), solve_homography(x, 6, 6)), target);
    };
    EXPECT_LT(ag::grad_check(f, p, 1e-6), 1e-5);
    const auto fg = [&](ag::Tape& t, ag::Var x) {
      return jaccard_loss(warp(x, t.constant(solve_homography(p.values(), 6, 6))), target);
    };
    EXPECT_LT(ag::grad_check(fg, g, 1e-6), 1e-6);
  }
}

TEST(Jaccard, Examples) {
  Rng rng(4);
  auto t = random_binary(16, 16, rng);
  t[0] = 1.0;
  EXPECT_DOUBLE_EQ(jaccard_loss(t.values(), t.values()), 0.0);
  Tensor inv(16, 16);
  for (std::size_t i = 0; i < t.size(); ++i) inv[i] = 1.0 - t[i];
  EXPECT_DOUBLE_EQ(jaccard_loss(inv.values(), t.values()), 1.0);
  Tensor truth(16, 16);
  for (std::size_t i = 0; i < 64; ++i) truth[i * 4] = 1.0;
  const Tensor half(16, 16, 0.5);
  EXPECT_NEAR(jaccard_loss(half.values(), truth.values()), 1.0 - 64.0 / (256.0 + 64.0), 1e-15);
  EXPECT_NEAR(jaccard_loss(half.values(), truth.values()), 0.8, 1e-15);
  const Tensor zero(4, 4);
  EXPECT_DOUBLE_EQ(jaccard_loss(zero.values(), zero.values()), 0.0);
  EXPECT_THROW(jaccard_loss(zero.values(), half.values()), std::invalid_argument);
}

TEST(Jaccard, RangeProperty) {
  Rng rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> p(n), g(n);
    for (auto& x : p) x = rng.uniform() < 0.2 ? std::round(rng.uniform()) : rng.uniform();
    for (auto& x : g) x = rng.uniform() < 0.7 ? std::round(rng.uniform()) : rng.uniform();
    const double l = jaccard_loss(p, g);
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
  }
}

TEST(Sdm, ZeroNetworkPredictsIdentity) {
  Rng rng(1);
  Mlp net("sdm", 25 + 5, {64, 64}, 8, 0.01, rng);
  for (auto& l : net.layers().back().weight().value.values()) l = 0.0;
  const auto obs = PatchGrid::from_tensor(random_binary(5, 5, rng));
  EXPECT_EQ(sdm_predict(obs, Action{{3}}, net, ActionSpace({5})), obs);
}

TEST(Sdm, ParameterGradientMatchesFiniteDifference) {
  Rng rng(12);
  ActionSpace space({3, 3, 3, 3});
  Mlp net("sdm", 36 + 12, {8}, 8, 0.3, rng);
  std::vector<Tensor> obs, next;
  Tensor inputs(3, 48);
  for (int b = 0; b < 3; ++b) {
    Tensor o(6, 6), n(6, 6);
    for (auto& x : o.values()) x = rng.uniform() < 0.5;
    for (auto& x : n.values()) x = rng.uniform() < 0.5;
    obs.push_back(o);
    next.push_back(n);
    const auto oh = space.onehot(space.decode(b * 7));
    for (int k = 0; k < 36; ++k) inputs(b, k) = o[k];
    for (int k = 0; k < 12; ++k) inputs(b, 36 + k) = oh[k];
  }
  auto params = net.params();
  zero_grads(params);
  auto loss = [&]() {
    ag::Tape t(false);
    return sdm_batch_loss(t, net, inputs, obs, next).value().item();
  };
  {
    ag::Tape t;
    t.backward(sdm_batch_loss(t, net, inputs, obs, next));
  }
  for (auto* p : params) {
    for (std::size_t k = 0; k < p->value.size(); k += 5) {
      const double x0 = p->value[k];
      p->value[k] = x0 + 1e-6;
      const double fp = loss();
      p->value[k] = x0 - 1e-6;
      const double fm = loss();
      p->value[k] = x0;
      const double fd = (fp - fm) / 2e-6;
      EXPECT_LT(std::abs(p->grad[k] - fd) / std::max(1e-3, std::abs(fd)), 1e-3) << p->name << k;
    }
  }
}

TEST(Pgm, RoundTripQuantized) {
  PatchGrid g(3, 4, {0, 1, 0.5, 0.2, 1, 1, 0, 0, 0.3, 0.7, 0.9, 0.1});
  std::stringstream ss;
  write_pgm(ss, g);
  const auto back = read_pgm(ss);
  ASSERT_EQ(back.rows, 3u);
  ASSERT_EQ(back.cols, 4u);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(back.values[i], g.values[i], 0.5 / 255 + 1e-12);
  EXPECT_EQ(back.values[1], 1.0);
  std::stringstream bad("P5 1 1 255 0");
  EXPECT_THROW(read_pgm(bad), std::runtime_error);
}
