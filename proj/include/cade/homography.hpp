// Patch-grid geometry for the semantic dynamics model: four-corner homography
// solve, inverse-mapping bilinear warp, and the soft Jaccard loss.
//
// Coordinates: u = row index, v = column index, origin at the top-left cell,
// cell centers at integer coordinates. Corner offsets are (du, dv) pairs in
// the fixed corner order (0,0), (r-1,0), (r-1,c-1), (0,c-1), i.e. top-left,
// bottom-left, bottom-right, top-right.
#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "cade/autograd.hpp"
#include "cade/nets.hpp"

namespace cade {

class HomographyError : public std::runtime_error {
 public:
  HomographyError(const std::string& what, double condition)
      : std::runtime_error(what), condition_(condition) {}
  double condition() const { return condition_; }

 private:
  double condition_;
};

// Row-major rows x cols grid of cell values in [0,1].
struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> values;

  PatchGrid() = default;
  PatchGrid(std::size_t r, std::size_t c, Real fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
  PatchGrid(std::size_t r, std::size_t c, std::vector<Real> v) : rows(r), cols(c), values(std::move(v)) {
    if (values.size() != rows * cols) throw std::invalid_argument("PatchGrid: value count mismatch");
  }

  Real& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  Real at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t size() const { return values.size(); }

  Tensor tensor() const { return Tensor(rows, cols, values); }
  static PatchGrid from_tensor(const Tensor& t) { return PatchGrid(t.rows(), t.cols(), t.vec()); }
  bool operator==(const PatchGrid&) const = default;
};

inline constexpr Real kVacantFill = 0.5;

// x^CF: fixed corner coordinates as [4,2] (u, v) rows.
inline std::array<std::array<Real, 2>, 4> corner_points(std::size_t rows, std::size_t cols) {
  const Real r = static_cast<Real>(rows) - 1.0;
  const Real c = static_cast<Real>(cols) - 1.0;
  return {{{0.0, 0.0}, {r, 0.0}, {r, c}, {0.0, c}}};
}

namespace detail {

using Mat8 = std::array<std::array<Real, 8>, 8>;
using Vec8 = std::array<Real, 8>;

// LU with partial pivoting. Returns false when a pivot vanishes.
struct Lu8 {
  Mat8 lu{};
  std::array<int, 8> piv{};
  bool ok = true;

  explicit Lu8(const Mat8& a) : lu(a) {
    for (int i = 0; i < 8; ++i) piv[i] = i;
    Real scale = 0.0;
    for (const auto& row : a)
      for (Real x : row) scale = std::max(scale, std::abs(x));
    const Real tiny = 1e-13 * std::max(scale, 1.0);
    for (int k = 0; k < 8; ++k) {
      int p = k;
      for (int i = k + 1; i < 8; ++i)
        if (std::abs(lu[i][k]) > std::abs(lu[p][k])) p = i;
      if (std::abs(lu[p][k]) <= tiny) {
        ok = false;
        return;
      }
      std::swap(lu[k], lu[p]);
      std::swap(piv[k], piv[p]);
      for (int i = k + 1; i < 8; ++i) {
        lu[i][k] /= lu[k][k];
        for (int j = k + 1; j < 8; ++j) lu[i][j] -= lu[i][k] * lu[k][j];
      }
    }
  }

  Vec8 solve(const Vec8& b) const {
    Vec8 x{};
    for (int i = 0; i < 8; ++i) x[i] = b[piv[i]];
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < i; ++j) x[i] -= lu[i][j] * x[j];
    for (int i = 7; i >= 0; --i) {
      for (int j = i + 1; j < 8; ++j) x[i] -= lu[i][j] * x[j];
      x[i] /= lu[i][i];
    }
    return x;
  }

  // Solves A^T y = b.
  Vec8 solve_transposed(const Vec8& b) const {
    Vec8 z = b;
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < i; ++j) z[i] -= lu[j][i] * z[j];
      z[i] /= lu[i][i];
    }
    for (int i = 7; i >= 0; --i)
      for (int j = i + 1; j < 8; ++j) z[i] -= lu[j][i] * z[j];
    Vec8 y{};
    for (int i = 0; i < 8; ++i) y[piv[i]] = z[i];
    return y;
  }
};

inline Real norm1(const Mat8& a) {
  Real best = 0.0;
  for (int j = 0; j < 8; ++j) {
    Real s = 0.0;
    for (int i = 0; i < 8; ++i) s += std::abs(a[i][j]);
    best = std::max(best, s);
  }
  return best;
}

// 1-norm condition number from the explicit inverse.
inline Real condition_1(const Mat8& a, const Lu8& lu) {
  if (!lu.ok) return std::numeric_limits<Real>::infinity();
  Mat8 inv{};
  for (int j = 0; j < 8; ++j) {
    Vec8 e{};
    e[j] = 1.0;
    const auto col = lu.solve(e);
    for (int i = 0; i < 8; ++i) inv[i][j] = col[i];
  }
  return norm1(a) * norm1(inv);
}

struct HomographySystem {
  Mat8 a{};
  Vec8 b{};
};

// Rows 2k, 2k+1 encode u'(h31 u + h32 v + 1) = h11 u + h12 v + h13 and the
// same for v', with h33 = 1 and unknowns ordered h11..h32.
inline HomographySystem build_system(std::span<const Real> offsets, std::size_t rows, std::size_t cols) {
  const auto src = corner_points(rows, cols);
  HomographySystem s;
  for (int k = 0; k < 4; ++k) {
    const Real u = src[k][0], v = src[k][1];
    const Real up = u + offsets[2 * k], vp = v + offsets[2 * k + 1];
    s.a[2 * k] = {u, v, 1.0, 0.0, 0.0, 0.0, -u * up, -v * up};
    s.a[2 * k + 1] = {0.0, 0.0, 0.0, u, v, 1.0, -u * vp, -v * vp};
    s.b[2 * k] = up;
    s.b[2 * k + 1] = vp;
  }
  return s;
}

inline Real det3(const Tensor& m) {
  return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
         m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
         m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
}

inline constexpr Real kMaxCondition = 1e12;
inline constexpr Real kMinDet = 1e-9;

struct SolveResult {
  Tensor h;  // [3,3]
  Vec8 x{};
  HomographySystem sys;
};

inline SolveResult solve_checked(std::span<const Real> offsets, std::size_t rows, std::size_t cols) {
  if (offsets.size() != 8) {
    throw std::invalid_argument("solve_homography: expected 8 corner offsets, got " +
                                std::to_string(offsets.size()));
  }
  if (rows < 2 || cols < 2) throw std::invalid_argument("solve_homography: grid must be at least 2x2");
  for (Real o : offsets) {
    if (!std::isfinite(o)) throw HomographyError("solve_homography: non-finite corner offset", 0.0);
  }
  SolveResult r;
  r.sys = build_system(offsets, rows, cols);
  Lu8 lu(r.sys.a);
  const Real cond = condition_1(r.sys.a, lu);
  if (!lu.ok || !(cond < kMaxCondition)) {
    throw HomographyError("solve_homography: degenerate corner quadrilateral (condition estimate " +
                              std::to_string(cond) + ")",
                          cond);
  }
  r.x = lu.solve(r.sys.b);
  r.h = Tensor(3, 3, {r.x[0], r.x[1], r.x[2], r.x[3], r.x[4], r.x[5], r.x[6], r.x[7], 1.0});
  const Real d = det3(r.h);
  if (!(std::abs(d) > kMinDet) || !r.h.all_finite()) {
    throw HomographyError("solve_homography: singular homography (det " + std::to_string(d) + ")", cond);
  }
  return r;
}

inline Tensor invert3(const Tensor& m) {
  const Real d = det3(m);
  if (!(std::abs(d) > kMinDet)) {
    throw HomographyError("homography not invertible (det " + std::to_string(d) + ")", 0.0);
  }
  Tensor inv(3, 3);
  inv(0, 0) = (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) / d;
  inv(0, 1) = (m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2)) / d;
  inv(0, 2) = (m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1)) / d;
  inv(1, 0) = (m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2)) / d;
  inv(1, 1) = (m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0)) / d;
  inv(1, 2) = (m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2)) / d;
  inv(2, 0) = (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0)) / d;
  inv(2, 1) = (m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1)) / d;
  inv(2, 2) = (m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)) / d;
  return inv;
}

}  // namespace detail

// H mapping each fixed corner to corner + offset; offsets hold 8 values
// (du, dv per corner).
inline Tensor solve_homography(std::span<const Real> offsets, std::size_t rows, std::size_t cols) {
  return detail::solve_checked(offsets, rows, cols).h;
}

inline Tensor homography_inverse(const Tensor& h) {
  if (h.rows() != 3 || h.cols() != 3) throw std::invalid_argument("homography must be 3x3");
  return detail::invert3(h);
}

// Applies H to (u, v); returns false when the point maps to infinity.
inline bool apply_homography(const Tensor& h, Real u, Real v, Real& uo, Real& vo) {
  const Real q = h(2, 0) * u + h(2, 1) * v + h(2, 2);
  if (!(std::abs(q) > 1e-12)) return false;
  uo = (h(0, 0) * u + h(0, 1) * v + h(0, 2)) / q;
  vo = (h(1, 0) * u + h(1, 1) * v + h(1, 2)) / q;
  return true;
}

enum class SolveBackward { kAnalytic, kFiniteDifference };

// Differentiable solve: offsets is a Var holding 8 values; output is [3,3].
inline Var solve_homography(Var offsets, std::size_t rows, std::size_t cols,
                            SolveBackward mode = SolveBackward::kAnalytic) {
  auto& t = ag::detail::tape_of("solve_homography", offsets);
  const auto res = detail::solve_checked(offsets.value().values(), rows, cols);
  const auto io = offsets.id();
  const auto src = corner_points(rows, cols);
  return t.record("solve_homography", res.h, {offsets}, [=](ag::Tape& tp, const Tensor& g) {
    Tensor* go = tp.grad_slot(io);
    if (go == nullptr) return;
    detail::Vec8 gx{};
    for (int i = 0; i < 8; ++i) gx[i] = g[i];  // h33 is fixed
    if (mode == SolveBackward::kAnalytic) {
      // x = A^-1 b: dL/db = A^-T gx, dL/dA = -lambda x^T. Offsets enter b
      // directly and the last two columns of A through -u u', -v u' etc.
      detail::Lu8 lu(res.sys.a);
      const auto lambda = lu.solve_transposed(gx);
      for (int k = 0; k < 4; ++k) {
        const Real f = 1.0 + res.x[6] * src[k][0] + res.x[7] * src[k][1];
        (*go)[2 * k] += lambda[2 * k] * f;
        (*go)[2 * k + 1] += lambda[2 * k + 1] * f;
      }
    } else {
      const Real eps = 1e-6;
      const auto base = tp.value(io).vec();
      for (int i = 0; i < 8; ++i) {
        auto p = base;
        p[i] += eps;
        const auto xp = detail::solve_checked(p, rows, cols).x;
        Real d = 0.0;
        for (int j = 0; j < 8; ++j) d += gx[j] * (xp[j] - res.x[j]) / eps;
        (*go)[i] += d;
      }
    }
  });
}

namespace detail {

struct Sample {
  Real value = kVacantFill;
  Real du = 0.0, dv = 0.0;  // d value / d(u, v)
  bool mapped = false;      // finite preimage
  bool known = false;       // preimage inside the source grid
  int i0 = 0, j0 = 0;
  Real fu = 0.0, fv = 0.0;
  Real u = 0.0, v = 0.0, q = 1.0;
};

inline Sample bilinear(const Tensor& grid, const Tensor& hinv, std::size_t di, std::size_t dj) {
  Sample s;
  const Real x0 = static_cast<Real>(di), x1 = static_cast<Real>(dj);
  const Real p0 = hinv(0, 0) * x0 + hinv(0, 1) * x1 + hinv(0, 2);
  const Real p1 = hinv(1, 0) * x0 + hinv(1, 1) * x1 + hinv(1, 2);
  const Real q = hinv(2, 0) * x0 + hinv(2, 1) * x1 + hinv(2, 2);
  // Points mapped from behind the projection center have no preimage.
  if (!(q > 1e-9)) return s;
  s.mapped = true;
  s.q = q;
  s.u = p0 / q;
  s.v = p1 / q;
  const auto R = static_cast<Real>(grid.rows()), C = static_cast<Real>(grid.cols());
  if (!(s.u > -1.0 && s.u < R && s.v > -1.0 && s.v < C)) return s;
  const Real eps = 1e-9;
  s.known = s.u >= -eps && s.u <= R - 1.0 + eps && s.v >= -eps && s.v <= C - 1.0 + eps;
  const Real fi = std::floor(s.u), fj = std::floor(s.v);
  s.i0 = static_cast<int>(fi);
  s.j0 = static_cast<int>(fj);
  s.fu = s.u - fi;
  s.fv = s.v - fj;
  auto cell = [&](int i, int j) {
    if (i < 0 || j < 0 || i >= static_cast<int>(grid.rows()) || j >= static_cast<int>(grid.cols())) {
      return kVacantFill;
    }
    return grid(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  };
  const Real a = cell(s.i0, s.j0), b = cell(s.i0, s.j0 + 1);
  const Real c = cell(s.i0 + 1, s.j0), d = cell(s.i0 + 1, s.j0 + 1);
  s.value = (1.0 - s.fu) * ((1.0 - s.fv) * a + s.fv * b) + s.fu * ((1.0 - s.fv) * c + s.fv * d);
  s.du = (1.0 - s.fv) * (c - a) + s.fv * (d - b);
  s.dv = (1.0 - s.fu) * (b - a) + s.fu * (d - c);
  return s;
}

}  // namespace detail

// Inverse-mapping warp: destination cell (i,j) samples the source at
// H^-1 (i,j) bilinearly, with cells outside the source reading as 0.5.
inline Tensor warp(const Tensor& grid, const Tensor& h) {
  const auto hinv = homography_inverse(h);
  Tensor out(grid.rows(), grid.cols());
  for (std::size_t i = 0; i < grid.rows(); ++i)
    for (std::size_t j = 0; j < grid.cols(); ++j) out(i, j) = detail::bilinear(grid, hinv, i, j).value;
  return out;
}

inline PatchGrid warp(const PatchGrid& grid, const Tensor& h) {
  return PatchGrid::from_tensor(warp(grid.tensor(), h));
}

// 1 where the destination cell's preimage lies inside the source grid.
inline std::vector<bool> warp_known_mask(std::size_t rows, std::size_t cols, const Tensor& h) {
  const auto hinv = homography_inverse(h);
  const Tensor dummy(rows, cols);
  std::vector<bool> mask(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) mask[i * cols + j] = detail::bilinear(dummy, hinv, i, j).known;
  return mask;
}

// Differentiable in both the grid [r,c] and H [3,3].
inline Var warp(Var grid, Var h) {
  auto& t = ag::detail::same_tape("warp", grid, h);
  if (h.rows() != 3 || h.cols() != 3) throw ag::Error("warp: homography must be [3,3], got " + h.value().shape_str());
  const Tensor hinv = homography_inverse(h.value());
  const Tensor out = warp(grid.value(), h.value());
  const auto ig = grid.id(), ih = h.id();
  return t.record("warp", out, {grid, h}, [=](ag::Tape& tp, const Tensor& g) {
    Tensor* gg = tp.grad_slot(ig);
    Tensor* gh = tp.grad_slot(ih);
    const auto& src = tp.value(ig);
    const std::size_t R = src.rows(), C = src.cols();
    Tensor ghinv(3, 3);
    for (std::size_t i = 0; i < R; ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        const Real go = g(i, j);
        if (go == 0.0) continue;
        const auto s = detail::bilinear(src, hinv, i, j);
        if (!s.mapped) continue;
        if (gg != nullptr && (s.u > -1.0 && s.u < R && s.v > -1.0 && s.v < C)) {
          const Real w[4] = {(1 - s.fu) * (1 - s.fv), (1 - s.fu) * s.fv, s.fu * (1 - s.fv), s.fu * s.fv};
          const int di[4] = {0, 0, 1, 1}, dj[4] = {0, 1, 0, 1};
          for (int k = 0; k < 4; ++k) {
            const int ii = s.i0 + di[k], jj = s.j0 + dj[k];
            if (ii >= 0 && jj >= 0 && ii < static_cast<int>(R) && jj < static_cast<int>(C)) {
              (*gg)(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)) += go * w[k];
            }
          }
        }
        if (gh != nullptr) {
          // u = p0/q, v = p1/q with p = Hinv (i, j, 1)
          const Real gu = go * s.du, gv = go * s.dv;
          const Real gp0 = gu / s.q, gp1 = gv / s.q, gq = -(gu * s.u + gv * s.v) / s.q;
          const Real x[3] = {static_cast<Real>(i), static_cast<Real>(j), 1.0};
          for (int k = 0; k < 3; ++k) {
            ghinv(0, k) += gp0 * x[k];
            ghinv(1, k) += gp1 * x[k];
            ghinv(2, k) += gq * x[k];
          }
        }
      }
    }
    if (gh != nullptr) {
      // d(H^-1) = -H^-1 dH H^-1  =>  dL/dH = -H^-T G H^-T
      Tensor tmp(3, 3);
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          for (int k = 0; k < 3; ++k) tmp(a, b) += hinv(k, a) * ghinv(k, b);
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          Real s = 0.0;
          for (int k = 0; k < 3; ++k) s += tmp(a, k) * hinv(b, k);
          (*gh)(a, b) -= s;
        }
    }
  });
}

// 1 - sum(pg) / (sum(p) + sum(g) - sum(pg)); 0 when both grids are all zero.
inline Real jaccard_loss(std::span<const Real> pred, std::span<const Real> truth) {
  if (pred.size() != truth.size()) {
    throw std::invalid_argument("jaccard_loss: dimension mismatch " + std::to_string(pred.size()) +
                                " vs " + std::to_string(truth.size()));
  }
  Real sp = 0.0, sg = 0.0, spg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sp += pred[i];
    sg += truth[i];
    spg += pred[i] * truth[i];
  }
  const Real uni = sp + sg - spg;
  if (uni <= 0.0) return 0.0;
  return 1.0 - spg / uni;
}

inline Real jaccard_loss(const PatchGrid& pred, const PatchGrid& truth) {
  if (pred.rows != truth.rows || pred.cols != truth.cols) {
    throw std::invalid_argument("jaccard_loss: grid " + std::to_string(pred.rows) + "x" +
                                std::to_string(pred.cols) + " vs " + std::to_string(truth.rows) +
                                "x" + std::to_string(truth.cols));
  }
  return jaccard_loss(pred.values, truth.values);
}

inline Var jaccard_loss(Var pred, const Tensor& truth) {
  auto& t = ag::detail::tape_of("jaccard_loss", pred);
  if (pred.value().size() != truth.size()) {
    throw std::invalid_argument("jaccard_loss: dimension mismatch " + pred.value().shape_str() +
                                " vs " + truth.shape_str());
  }
  const auto& p = pred.value();
  Real sp = 0.0, sg = 0.0, spg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sg += truth[i];
    spg += p[i] * truth[i];
  }
  const Real uni = sp + sg - spg;
  const Real loss = uni <= 0.0 ? 0.0 : 1.0 - spg / uni;
  const auto ip = pred.id();
  return t.record("jaccard_loss", Tensor::scalar(loss), {pred}, [=](ag::Tape& tp, const Tensor& g) {
    Tensor* gp = tp.grad_slot(ip);
    if (gp == nullptr || uni <= 0.0) return;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      // d(I/U)/dp_i = (g_i U - I (1 - g_i)) / U^2
      (*gp)[i] -= g[0] * (truth[i] * uni - spg * (1.0 - truth[i])) / (uni * uni);
    }
  });
}

// Intersection over union after thresholding both grids at 0.5, restricted
// to cells where mask is true (all cells when mask is empty). Empty union
// counts as perfect agreement.
inline Real binary_iou(std::span<const Real> pred, std::span<const Real> truth,
                       const std::vector<bool>& mask = {}) {
  if (pred.size() != truth.size()) throw std::invalid_argument("binary_iou: dimension mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const bool p = pred[i] > 0.5, g = truth[i] > 0.5;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<Real>(inter) / static_cast<Real>(uni);
}

// Corner offsets the dynamics network predicts for (obs, action).
inline std::vector<Real> sdm_offsets(const Mlp& net, std::span<const Real> obs, const ActionSpace& space,
                                     const Action& a) {
  if (net.in_dim() != obs.size() + static_cast<std::size_t>(space.onehot_dim())) {
    throw std::invalid_argument("sdm: network input " + std::to_string(net.in_dim()) +
                                " != observation " + std::to_string(obs.size()) + " + action " +
                                std::to_string(space.onehot_dim()));
  }
  if (net.out_dim() != 8) throw std::invalid_argument("sdm: network must output 8 corner offsets");
  std::vector<Real> in(obs.begin(), obs.end());
  const auto oh = space.onehot(a);
  in.insert(in.end(), oh.begin(), oh.end());
  ag::Tape t(false);
  return net.forward(t, t.constant(Tensor::row(std::move(in)))).value().vec();
}

inline PatchGrid sdm_predict(const PatchGrid& obs, const Action& a, const Mlp& net, const ActionSpace& space) {
  const auto off = sdm_offsets(net, obs.values, space, a);
  return warp(obs, solve_homography(off, obs.rows, obs.cols));
}

// Differentiable batch loss: mean Jaccard loss of warp(obs_b, H(net(obs_b, a_b)))
// against next_b. inputs [B, obs+onehot]; obs/next hold B grids of rows x cols.
inline Var sdm_batch_loss(ag::Tape& t, const Mlp& net, const Tensor& inputs, const std::vector<Tensor>& obs,
                          const std::vector<Tensor>& next, SolveBackward mode = SolveBackward::kAnalytic) {
  if (obs.size() != inputs.rows() || next.size() != inputs.rows() || obs.empty()) {
    throw std::invalid_argument("sdm_batch_loss: batch size mismatch");
  }
  auto offsets = net.forward(t, t.constant(inputs));
  std::vector<Var> losses;
  losses.reserve(obs.size());
  for (std::size_t b = 0; b < obs.size(); ++b) {
    auto h = solve_homography(ag::row(offsets, b), obs[b].rows(), obs[b].cols(), mode);
    auto pred = warp(t.constant(obs[b]), h);
    losses.push_back(jaccard_loss(pred, next[b]));
  }
  return ag::mean(ag::concat_rows(losses));
}

// Plain-text PGM (P2, maxval 255), cell value = round(255 * v). Lossy at the
// 1/255 level.
inline void write_pgm(std::ostream& os, const PatchGrid& g) {
  os << "P2\n" << g.cols << ' ' << g.rows << "\n255\n";
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols; ++c) {
      const Real v = std::clamp(g.at(r, c), 0.0, 1.0);
      os << (c ? " " : "") << static_cast<int>(std::lround(255.0 * v));
    }
    os << '\n';
  }
}

inline PatchGrid read_pgm(std::istream& is) {
  std::string magic;
  auto next_token = [&]() {
    std::string tok;
    while (is >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
    throw std::runtime_error("pgm: unexpected end of input");
  };
  magic = next_token();
  if (magic != "P2") throw std::runtime_error("pgm: expected P2, got '" + magic + "'");
  const auto cols = std::stoul(next_token());
  const auto rows = std::stoul(next_token());
  const auto maxval = std::stoi(next_token());
  if (maxval <= 0) throw std::runtime_error("pgm: bad maxval");
  PatchGrid g(rows, cols);
  for (auto& v : g.values) v = std::stoi(next_token()) / static_cast<Real>(maxval);
  return g;
}

inline void write_pgm(const std::string& path, const PatchGrid& g) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  write_pgm(f, g);
}

inline PatchGrid read_pgm(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return read_pgm(f);
}

}  // namespace cade
