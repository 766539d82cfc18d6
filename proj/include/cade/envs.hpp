// Constrained submodular environments: CliffCircular (grid world with an
// invisible ring track) and PlanarRiver (pinhole camera over a spline river).
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cade/homography.hpp"
#include "cade/nets.hpp"
#include "cade/rng.hpp"

namespace cade {

enum class Level { kEasy, kMedium, kHard };

inline std::string to_string(Level l) {
  switch (l) {
    case Level::kEasy: return "easy";
    case Level::kMedium: return "medium";
    case Level::kHard: return "hard";
  }
  return "?";
}

inline Level parse_level(const std::string& s) {
  if (s == "easy") return Level::kEasy;
  if (s == "medium") return Level::kMedium;
  if (s == "hard") return Level::kHard;
  throw std::invalid_argument("unknown level '" + s + "' (expected easy, medium, hard)");
}

// complete: every reward-bearing cell/segment has been visited.
enum class TerminalKind { kNone, kMinor, kSevere, kTimeout, kComplete };

inline std::string to_string(TerminalKind k) {
  switch (k) {
    case TerminalKind::kNone: return "none";
    case TerminalKind::kMinor: return "minor";
    case TerminalKind::kSevere: return "severe";
    case TerminalKind::kTimeout: return "timeout";
    case TerminalKind::kComplete: return "complete";
  }
  return "?";
}

struct StepResult {
  PatchGrid obs;
  Real reward = 0.0;
  Real cost = 0.0;
  bool terminal = false;
  TerminalKind kind = TerminalKind::kNone;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual Level level() const = 0;
  virtual const ActionSpace& action_space() const = 0;
  virtual std::size_t obs_rows() const = 0;
  virtual std::size_t obs_cols() const = 0;
  virtual PatchGrid reset(std::uint64_t seed) = 0;
  virtual StepResult step(const Action& a) = 0;
  // Number of reward-bearing units (ring cells / spline segments): the
  // largest possible episode return.
  virtual std::size_t reward_units() const = 0;
  virtual std::size_t visited_count() const = 0;
  virtual bool done() const = 0;
  std::size_t obs_dim() const { return obs_rows() * obs_cols(); }
};

// Marginal gain of covering `units` given the visited flags: the number of
// units not yet visited (a coverage function, hence monotone submodular).
inline Real coverage_gain(std::span<const int> units, const std::vector<bool>& visited) {
  std::vector<int> fresh;
  for (int u : units) {
    if (u < 0 || static_cast<std::size_t>(u) >= visited.size()) throw std::out_of_range("coverage_gain: unit out of range");
    if (!visited[static_cast<std::size_t>(u)] && std::find(fresh.begin(), fresh.end(), u) == fresh.end()) {
      fresh.push_back(u);
    }
  }
  return static_cast<Real>(fresh.size());
}

// Environment reward of a transition: growth of the visited set.
inline Real true_marginal_gain(std::size_t visited_before, std::size_t visited_after) {
  if (visited_after < visited_before) throw std::invalid_argument("visited set shrank within an episode");
  return static_cast<Real>(visited_after - visited_before);
}

// ---------------------------------------------------------------------------
// CliffCircular

struct CliffConfig {
  int rows = 12;
  int cols = 12;
  int view = 5;
  int ring_top = 3;   // ring = perimeter of the square [ring_top, ring_top+ring_side-1]^2
  int ring_side = 6;  // 4*(6-1) = 20 cells
  // Cells farther than wall_margin (Chebyshev) from the ring are permanent
  // cliffs, leaving a corridor around the track; negative disables walls.
  int wall_margin = 1;
  std::array<int, 3> cliffs = {2, 4, 6};  // random cliffs on free off-ring cells
  int max_steps = 500;
  bool random_spawn = false;  // false: top-left ring corner
};

class CliffCircular : public Environment {
 public:
  enum Move { kNoop = 0, kUp = 1, kRight = 2, kDown = 3, kLeft = 4 };

  explicit CliffCircular(Level level, CliffConfig cfg = {}) : cfg_(cfg), level_(level), space_({5}) {
    if (cfg_.view % 2 == 0 || cfg_.view < 3) throw std::invalid_argument("cliff view must be odd and >= 3");
    if (cfg_.ring_side < 2 || cfg_.ring_top < 0 || cfg_.ring_top + cfg_.ring_side > std::min(cfg_.rows, cfg_.cols)) {
      throw std::invalid_argument("cliff ring does not fit on the board");
    }
    for (int r = 0; r < cfg_.rows; ++r)
      for (int c = 0; c < cfg_.cols; ++c)
        if (on_ring(r, c)) ring_index_[r * cfg_.cols + c] = 0;
    // Number ring cells clockwise from the top-left corner.
    int idx = 0;
    const int a = cfg_.ring_top, b = cfg_.ring_top + cfg_.ring_side - 1;
    for (int c = a; c < b; ++c) ring_index_[a * cfg_.cols + c] = idx++;
    for (int r = a; r < b; ++r) ring_index_[r * cfg_.cols + b] = idx++;
    for (int c = b; c > a; --c) ring_index_[b * cfg_.cols + c] = idx++;
    for (int r = b; r > a; --r) ring_index_[r * cfg_.cols + a] = idx++;
    wall_.assign(static_cast<std::size_t>(cfg_.rows * cfg_.cols), false);
    int free_cells = 0;
    for (int r = 0; r < cfg_.rows; ++r) {
      for (int c = 0; c < cfg_.cols; ++c) {
        if (on_ring(r, c)) continue;
        const bool wall = cfg_.wall_margin >= 0 && ring_distance(r, c) > cfg_.wall_margin;
        wall_[static_cast<std::size_t>(r * cfg_.cols + c)] = wall;
        if (!wall) free_cells++;
      }
    }
    if (cliff_count() > free_cells) throw std::invalid_argument("too many cliffs for the corridor");
  }

  std::string name() const override { return "cliff-circular"; }
  Level level() const override { return level_; }
  const ActionSpace& action_space() const override { return space_; }
  std::size_t obs_rows() const override { return static_cast<std::size_t>(cfg_.view); }
  std::size_t obs_cols() const override { return static_cast<std::size_t>(cfg_.view); }
  std::size_t reward_units() const override { return ring_index_.size(); }
  std::size_t visited_count() const override { return visited_n_; }
  bool done() const override { return done_; }

  const CliffConfig& config() const { return cfg_; }
  int cliff_count() const { return cfg_.cliffs[static_cast<std::size_t>(level_)]; }
  bool is_wall(int r, int c) const { return in_board(r, c) && wall_[static_cast<std::size_t>(r * cfg_.cols + c)]; }
  // Chebyshev distance from a cell to the nearest ring cell.
  int ring_distance(int r, int c) const {
    const int a = cfg_.ring_top, b = cfg_.ring_top + cfg_.ring_side - 1;
    const int out = std::max({a - r, r - b, a - c, c - b, 0});
    if (out > 0) return out;
    return std::min({r - a, b - r, c - a, b - c});
  }
  int agent_row() const { return ar_; }
  int agent_col() const { return ac_; }
  int steps() const { return steps_; }
  bool is_cliff(int r, int c) const { return in_board(r, c) && cliff_[r * cfg_.cols + c]; }
  bool on_ring(int r, int c) const {
    const int a = cfg_.ring_top, b = cfg_.ring_top + cfg_.ring_side - 1;
    if (r < a || r > b || c < a || c > b) return false;
    return r == a || r == b || c == a || c == b;
  }
  // Ring index of a cell, or -1.
  int ring_index(int r, int c) const {
    const auto it = ring_index_.find(r * cfg_.cols + c);
    return it == ring_index_.end() ? -1 : it->second;
  }
  const std::vector<bool>& visited() const { return visited_; }

  PatchGrid reset(std::uint64_t seed) override {
    Rng rng(seed);
    cliff_ = wall_;
    visited_.assign(ring_index_.size(), false);
    visited_n_ = 0;
    steps_ = 0;
    done_ = false;
    if (cfg_.random_spawn) {
      const auto k = static_cast<int>(rng.below(ring_index_.size()));
      for (const auto& [cell, idx] : ring_index_) {
        if (idx == k) {
          ar_ = cell / cfg_.cols;
          ac_ = cell % cfg_.cols;
        }
      }
    } else {
      ar_ = ac_ = cfg_.ring_top;
    }
    std::vector<int> candidates;
    for (int r = 0; r < cfg_.rows; ++r)
      for (int c = 0; c < cfg_.cols; ++c)
        if (!on_ring(r, c) && !is_wall(r, c)) candidates.push_back(r * cfg_.cols + c);
    // Partial Fisher-Yates draw of the cliff cells.
    for (int i = 0; i < cliff_count(); ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(candidates.size() - static_cast<std::size_t>(i));
      std::swap(candidates[static_cast<std::size_t>(i)], candidates[j]);
      cliff_[static_cast<std::size_t>(candidates[static_cast<std::size_t>(i)])] = true;
    }
    return observe();
  }

  // Cliff cells among the 8 neighbours / 8; 1 on a cliff.
  Real cost_here() const {
    if (is_cliff(ar_, ac_)) return 1.0;
    int n = 0;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc)
        if ((dr || dc) && is_cliff(ar_ + dr, ac_ + dc)) ++n;
    return n / 8.0;
  }

  // The same cost recomputed from an emitted observation alone.
  static Real cost_from_observation(const PatchGrid& obs) {
    const std::size_t cr = obs.rows / 2, cc = obs.cols / 2;
    if (obs.at(cr, cc) > 0.5) return 1.0;
    int n = 0;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc)
        if ((dr || dc) && obs.at(cr + dr, cc + dc) > 0.5) ++n;
    return n / 8.0;
  }

  StepResult step(const Action& a) override {
    if (done_) throw std::logic_error("cliff-circular: step after terminal; call reset");
    space_.validate(a);
    static constexpr int dr[5] = {0, -1, 0, 1, 0};
    static constexpr int dc[5] = {0, 0, 1, 0, -1};
    const int m = a.branch[0];
    ar_ = std::clamp(ar_ + dr[m], 0, cfg_.rows - 1);
    ac_ = std::clamp(ac_ + dc[m], 0, cfg_.cols - 1);
    ++steps_;
    StepResult res;
    const int ri = ring_index(ar_, ac_);
    if (ri >= 0 && !visited_[static_cast<std::size_t>(ri)]) {
      visited_[static_cast<std::size_t>(ri)] = true;
      ++visited_n_;
      res.reward = 1.0;
    }
    res.obs = observe();
    res.cost = cost_here();
    if (is_cliff(ar_, ac_)) {
      res.kind = TerminalKind::kSevere;
    } else if (visited_n_ == ring_index_.size()) {
      res.kind = TerminalKind::kComplete;
    } else if (steps_ >= cfg_.max_steps) {
      res.kind = TerminalKind::kTimeout;
    }
    res.terminal = res.kind != TerminalKind::kNone;
    done_ = res.terminal;
    return res;
  }

  // Egocentric view; off-board cells read as non-cliff.
  PatchGrid observe() const {
    const int h = cfg_.view / 2;
    PatchGrid g(obs_rows(), obs_cols());
    for (int i = 0; i < cfg_.view; ++i)
      for (int j = 0; j < cfg_.view; ++j) g.at(i, j) = is_cliff(ar_ - h + i, ac_ - h + j) ? 1.0 : 0.0;
    return g;
  }

  // Places the agent directly (tests and toy setups).
  void set_agent(int r, int c) {
    if (!in_board(r, c)) throw std::out_of_range("agent cell off board");
    ar_ = r;
    ac_ = c;
  }
  // Replaces the random cliffs; walls stay.
  void set_cliffs(const std::vector<std::pair<int, int>>& cells) {
    cliff_ = wall_;
    for (auto [r, c] : cells) {
      if (!in_board(r, c) || on_ring(r, c)) throw std::invalid_argument("cliff must be an off-ring board cell");
      cliff_[static_cast<std::size_t>(r * cfg_.cols + c)] = true;
    }
  }

 private:
  bool in_board(int r, int c) const { return r >= 0 && c >= 0 && r < cfg_.rows && c < cfg_.cols; }

  CliffConfig cfg_;
  Level level_;
  ActionSpace space_;
  std::unordered_map<int, int> ring_index_;
  std::vector<bool> wall_;
  std::vector<bool> cliff_;
  std::vector<bool> visited_;
  std::size_t visited_n_ = 0;
  int ar_ = 0, ac_ = 0;
  int steps_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// PlanarRiver

struct Vec2 {
  Real x = 0.0, y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(Real s, Vec2 a) { return {s * a.x, s * a.y}; }
inline Real dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline Real norm(Vec2 a) { return std::sqrt(dot(a, a)); }

inline Real wrap_angle(Real a) {
  if (a >= -M_PI && a < M_PI) return a;
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

inline Real point_segment_distance(Vec2 p, Vec2 a, Vec2 b, Real* t_out = nullptr) {
  const Vec2 ab = b - a;
  const Real len2 = dot(ab, ab);
  Real t = len2 > 0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
  if (t_out) *t_out = t;
  return norm(p - (a + t * ab));
}

struct RiverConfig {
  int segments = 40;
  Real segment_length = 3.0;
  Real width = 6.0;     // river width w; water within w/2 of the centreline
  Real d_max = 6.0;     // horizontal distance to the centreline before a severe reset
  Real z_min = 2.0, z_max = 12.0;
  Real step_translation = 0.5;
  Real step_yaw_deg = 15.0;
  Real step_vertical = 0.5;
  Real pitch_deg = -30.0;
  Real fov_deg = 90.0;
  int image = 128;
  int patches = 16;
  Real yaw_limit_deg = 90.0;
  Real phi_lo = 0.15, phi_hi = 0.75;
  int max_steps = 500;
  std::array<int, 3> bends = {1, 2, 4};
};

struct Pose {
  Real x = 0.0, y = 0.0, z = 6.0, yaw = 0.0;
};

// Densely sampled centreline with a uniform-grid index for distance queries.
class RiverSpline {
 public:
  RiverSpline() = default;

  // Centripetal-free (uniform) Catmull-Rom through control points, resampled
  // into `segments` pieces of equal arc length.
  RiverSpline(const std::vector<Vec2>& ctrl, int segments, int sub = 8) {
    if (ctrl.size() < 4) throw std::invalid_argument("river spline needs >= 4 control points");
    std::vector<Vec2> dense;
    for (std::size_t i = 1; i + 2 < ctrl.size(); ++i) {
      const Vec2 p0 = ctrl[i - 1], p1 = ctrl[i], p2 = ctrl[i + 1], p3 = ctrl[i + 2];
      for (int s = 0; s < 64; ++s) {
        const Real t = s / 64.0, t2 = t * t, t3 = t2 * t;
        dense.push_back(0.5 * ((2.0 * t3 - 3.0 * t2 + 1.0) * 2.0 * p1 + (t3 - 2.0 * t2 + t) * (p2 - p0) +
                               (-2.0 * t3 + 3.0 * t2) * 2.0 * p2 + (t3 - t2) * (p3 - p1)));
      }
    }
    dense.push_back(ctrl[ctrl.size() - 2]);
    std::vector<Real> arc(dense.size(), 0.0);
    for (std::size_t i = 1; i < dense.size(); ++i) arc[i] = arc[i - 1] + norm(dense[i] - dense[i - 1]);
    const int npts = segments * sub;
    pts_.reserve(static_cast<std::size_t>(npts) + 1);
    std::size_t k = 0;
    for (int i = 0; i <= npts; ++i) {
      const Real s = arc.back() * i / npts;
      while (k + 2 < arc.size() && arc[k + 1] < s) ++k;
      const Real span = arc[k + 1] - arc[k];
      const Real f = span > 0 ? std::clamp((s - arc[k]) / span, 0.0, 1.0) : 0.0;
      pts_.push_back(dense[k] + f * (dense[k + 1] - dense[k]));
    }
    segments_ = segments;
    sub_ = sub;
    length_ = arc.back();
    build_index();
  }

  int segments() const { return segments_; }
  Real length() const { return length_; }
  const std::vector<Vec2>& points() const { return pts_; }

  struct Nearest {
    Real distance = std::numeric_limits<Real>::infinity();
    int piece = -1;
    Real t = 0.0;
  };

  Nearest nearest(Vec2 p) const {
    Nearest best;
    for (std::size_t i = 0; i + 1 < pts_.size(); ++i) consider(p, static_cast<int>(i), best);
    return best;
  }

  // True when p is within r of the centreline (r <= index cell size).
  bool within(Vec2 p, Real r) const {
    const auto [cx, cy] = cell_of(p);
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy) {
        const auto it = grid_.find(key(cx + dx, cy + dy));
        if (it == grid_.end()) continue;
        for (int piece : it->second) {
          if (point_segment_distance(p, pts_[piece], pts_[piece + 1]) <= r) return true;
        }
      }
    return false;
  }

  // Segment ids (0..segments-1) with some point within r of p.
  std::vector<int> segments_within(Vec2 p, Real r) const {
    std::vector<int> out;
    for (std::size_t i = 0; i + 1 < pts_.size(); ++i) {
      if (point_segment_distance(p, pts_[i], pts_[i + 1]) <= r) {
        const int s = static_cast<int>(i) / sub_;
        if (out.empty() || out.back() != s) out.push_back(s);
      }
    }
    return out;
  }

  Vec2 tangent(int piece) const {
    const Vec2 d = pts_[static_cast<std::size_t>(piece) + 1] - pts_[static_cast<std::size_t>(piece)];
    const Real n = norm(d);
    return n > 0 ? (1.0 / n) * d : Vec2{1.0, 0.0};
  }
  Vec2 point_at(int piece, Real t) const {
    return pts_[piece] + t * (pts_[piece + 1] - pts_[piece]);
  }
  int pieces() const { return static_cast<int>(pts_.size()) - 1; }

  // Minimum distance between pieces at least `gap` pieces apart.
  Real min_separation(int gap) const {
    Real best = std::numeric_limits<Real>::infinity();
    for (int i = 0; i < pieces(); ++i)
      for (int j = i + gap; j < pieces(); ++j) {
        best = std::min(best, point_segment_distance(pts_[i], pts_[j], pts_[j + 1]));
      }
    return best;
  }

  Real cell_size = 3.5;

 private:
  void consider(Vec2 p, int i, Nearest& best) const {
    Real t;
    const Real d = point_segment_distance(p, pts_[i], pts_[i + 1], &t);
    if (d < best.distance) best = {d, i, t};
  }

  static std::int64_t key(std::int64_t x, std::int64_t y) { return (x << 32) ^ (y & 0xffffffff); }
  std::pair<std::int64_t, std::int64_t> cell_of(Vec2 p) const {
    return {static_cast<std::int64_t>(std::floor(p.x / cell_size)),
            static_cast<std::int64_t>(std::floor(p.y / cell_size))};
  }

  void build_index() {
    grid_.clear();
    for (int i = 0; i + 1 < static_cast<int>(pts_.size()); ++i) {
      const Vec2 a = pts_[i], b = pts_[i + 1];
      const auto [ax, ay] = cell_of(a);
      const auto [bx, by] = cell_of(b);
      for (auto x = std::min(ax, bx); x <= std::max(ax, bx); ++x)
        for (auto y = std::min(ay, by); y <= std::max(ay, by); ++y) grid_[key(x, y)].push_back(i);
    }
  }

  std::vector<Vec2> pts_;
  int segments_ = 0;
  int sub_ = 1;
  Real length_ = 0.0;
  std::unordered_map<std::int64_t, std::vector<int>> grid_;
};

// Control points for a river with `bends` turns, each 45-80 degrees either way.
inline std::vector<Vec2> river_control_points(const RiverConfig& cfg, int bends, Rng& rng) {
  const Real total = cfg.segments * cfg.segment_length;
  const int n = 12;
  const Real step = total / (n - 1);
  std::vector<int> bend_at;
  for (int b = 0; b < bends; ++b) bend_at.push_back(1 + static_cast<int>((b + 0.5) * (n - 2) / std::max(bends, 1)));
  std::vector<Vec2> ctrl;
  Vec2 p{0.0, 0.0};
  Real heading = 0.0;
  ctrl.push_back(p - step * Vec2{1.0, 0.0});
  for (int i = 0; i < n; ++i) {
    ctrl.push_back(p);
    if (std::find(bend_at.begin(), bend_at.end(), i) != bend_at.end()) {
      const Real turn = rng.uniform(45.0, 80.0) * M_PI / 180.0;
      heading += rng.uniform() < 0.5 ? turn : -turn;
    } else {
      heading += rng.uniform(-5.0, 5.0) * M_PI / 180.0;
    }
    p = p + step * Vec2{std::cos(heading), std::sin(heading)};
  }
  ctrl.push_back(p);
  return ctrl;
}

class PlanarRiver : public Environment {
 public:
  explicit PlanarRiver(Level level, RiverConfig cfg = {}) : cfg_(cfg), level_(level), space_({3, 3, 3, 3}) {
    if (cfg_.image % cfg_.patches != 0) throw std::invalid_argument("river image size must be a multiple of the patch count");
    if (cfg_.z_min >= cfg_.z_max) throw std::invalid_argument("river z range empty");
    if (!(cfg_.phi_lo > 0 && cfg_.phi_lo < cfg_.phi_hi && cfg_.phi_hi < 1)) {
      throw std::invalid_argument("river water-fraction band must satisfy 0 < lo < hi < 1");
    }
  }

  std::string name() const override { return "planar-river"; }
  Level level() const override { return level_; }
  const ActionSpace& action_space() const override { return space_; }
  std::size_t obs_rows() const override { return static_cast<std::size_t>(cfg_.patches); }
  std::size_t obs_cols() const override { return static_cast<std::size_t>(cfg_.patches); }
  std::size_t reward_units() const override { return static_cast<std::size_t>(cfg_.segments); }
  std::size_t visited_count() const override { return visited_n_; }
  bool done() const override { return done_; }

  const RiverConfig& config() const { return cfg_; }
  const RiverSpline& spline() const { return spline_; }
  const Pose& pose() const { return pose_; }
  int steps() const { return steps_; }
  const std::vector<bool>& visited() const { return visited_; }

  void set_spline(RiverSpline s) { spline_ = std::move(s); }
  void set_pose(const Pose& p) { pose_ = p; }

  PatchGrid reset(std::uint64_t seed) override {
    Rng rng(seed);
    const int bends = cfg_.bends[static_cast<std::size_t>(level_)];
    for (int attempt = 0;; ++attempt) {
      RiverSpline s(river_control_points(cfg_, bends, rng), cfg_.segments);
      // Reject rivers whose distant parts come within two widths of each other.
      if (s.min_separation(static_cast<int>(std::ceil(3.0 * cfg_.width / (s.length() / s.pieces())))) > 2.0 * cfg_.width) {
        spline_ = std::move(s);
        break;
      }
      if (attempt > 1000) throw std::runtime_error("planar-river: could not generate a simple spline");
    }
    const int piece = static_cast<int>(rng.below(static_cast<std::uint64_t>(spline_.pieces() / 2)));
    const Vec2 c = spline_.point_at(piece, rng.uniform());
    const Vec2 tan = spline_.tangent(piece);
    const Vec2 normal{-tan.y, tan.x};
    const Vec2 p = c + rng.uniform(-1.0, 1.0) * normal;
    pose_.x = p.x;
    pose_.y = p.y;
    pose_.z = rng.uniform(4.0, 8.0);
    pose_.yaw = std::atan2(tan.y, tan.x) + rng.uniform(-15.0, 15.0) * M_PI / 180.0;
    visited_.assign(static_cast<std::size_t>(cfg_.segments), false);
    visited_n_ = 0;
    steps_ = 0;
    done_ = false;
    for (int s : spline_.segments_within({pose_.x, pose_.y}, cfg_.width / 2)) mark(s);
    return render();
  }

  StepResult step(const Action& a) override {
    if (done_) throw std::logic_error("planar-river: step after terminal; call reset");
    space_.validate(a);
    const Real dz = (a.branch[0] - 1) * cfg_.step_vertical;
    const Real dyaw = (a.branch[1] - 1) * cfg_.step_yaw_deg * M_PI / 180.0;
    const Real fwd = (a.branch[2] - 1) * cfg_.step_translation;
    const Real strafe = (a.branch[3] - 1) * cfg_.step_translation;  // +1: to the left
    pose_.z += dz;
    pose_.yaw = wrap_angle(pose_.yaw + dyaw);
    pose_.x += fwd * std::cos(pose_.yaw) - strafe * std::sin(pose_.yaw);
    pose_.y += fwd * std::sin(pose_.yaw) + strafe * std::cos(pose_.yaw);
    ++steps_;

    StepResult res;
    const Vec2 g{pose_.x, pose_.y};
    std::vector<int> covered = spline_.segments_within(g, cfg_.width / 2);
    res.reward = coverage_gain(covered, visited_);
    for (int s : covered) mark(s);
    res.obs = render();

    const auto nr = spline_.nearest(g);
    const Vec2 t = spline_.tangent(nr.piece);
    const Real dev = std::abs(wrap_angle(pose_.yaw - std::atan2(t.y, t.x)));
    if (nr.distance > cfg_.d_max || pose_.z < cfg_.z_min || pose_.z > cfg_.z_max) {
      res.kind = TerminalKind::kSevere;
      res.cost = 1.0;
    } else if (dev > cfg_.yaw_limit_deg * M_PI / 180.0) {
      res.kind = TerminalKind::kMinor;
      res.cost = 0.5;
    } else {
      res.cost = band_cost(water_fraction(res.obs));
      if (visited_n_ == visited_.size()) {
        res.kind = TerminalKind::kComplete;
      } else if (steps_ >= cfg_.max_steps) {
        res.kind = TerminalKind::kTimeout;
      }
    }
    res.terminal = res.kind != TerminalKind::kNone;
    done_ = res.terminal;
    return res;
  }

  static Real water_fraction(const PatchGrid& g) {
    Real n = 0;
    for (Real v : g.values) n += v > 0.5 ? 1.0 : 0.0;
    return n / static_cast<Real>(g.size());
  }

  Real band_cost(Real phi) const {
    if (phi < cfg_.phi_lo) return (cfg_.phi_lo - phi) / cfg_.phi_lo;
    if (phi > cfg_.phi_hi) return (phi - cfg_.phi_hi) / (1.0 - cfg_.phi_hi);
    return 0.0;
  }

  // Full-resolution binary water image (row-major image x image).
  std::vector<std::uint8_t> render_image() const { return render_image(pose_); }

  std::vector<std::uint8_t> render_image(const Pose& p) const {
    const int n = cfg_.image;
    std::vector<std::uint8_t> img(static_cast<std::size_t>(n * n), 0);
    const Real pitch = cfg_.pitch_deg * M_PI / 180.0;
    const Real f[3] = {std::cos(p.yaw) * std::cos(pitch), std::sin(p.yaw) * std::cos(pitch), std::sin(pitch)};
    const Real r[3] = {std::sin(p.yaw), -std::cos(p.yaw), 0.0};
    // up = right x forward
    const Real u[3] = {r[1] * f[2] - r[2] * f[1], r[2] * f[0] - r[0] * f[2], r[0] * f[1] - r[1] * f[0]};
    const Real tan_half = std::tan(cfg_.fov_deg * M_PI / 360.0);
    const Real half_w = cfg_.width / 2;
    for (int i = 0; i < n; ++i) {
      const Real yn = (2.0 * (i + 0.5) / n - 1.0) * tan_half;
      for (int j = 0; j < n; ++j) {
        const Real xn = (2.0 * (j + 0.5) / n - 1.0) * tan_half;
        const Real dz = f[2] + xn * r[2] - yn * u[2];
        if (dz >= 0.0) continue;  // at or above the horizon
        const Real dx = f[0] + xn * r[0] - yn * u[0];
        const Real dy = f[1] + xn * r[1] - yn * u[1];
        const Real t = -p.z / dz;
        if (spline_.within({p.x + t * dx, p.y + t * dy}, half_w)) img[static_cast<std::size_t>(i * n + j)] = 1;
      }
    }
    return img;
  }

  // Patch is water when strictly more than half of its pixels are water.
  static PatchGrid patchify(const std::vector<std::uint8_t>& img, int image, int patches) {
    const int b = image / patches;
    PatchGrid g(static_cast<std::size_t>(patches), static_cast<std::size_t>(patches));
    for (int pi = 0; pi < patches; ++pi)
      for (int pj = 0; pj < patches; ++pj) {
        int cnt = 0;
        for (int i = 0; i < b; ++i)
          for (int j = 0; j < b; ++j) cnt += img[static_cast<std::size_t>((pi * b + i) * image + pj * b + j)];
        g.at(pi, pj) = 2 * cnt > b * b ? 1.0 : 0.0;
      }
    return g;
  }

  PatchGrid render() const { return patchify(render_image(), cfg_.image, cfg_.patches); }
  PatchGrid render(const Pose& p) const { return patchify(render_image(p), cfg_.image, cfg_.patches); }

 private:
  void mark(int s) {
    if (!visited_[static_cast<std::size_t>(s)]) {
      visited_[static_cast<std::size_t>(s)] = true;
      ++visited_n_;
    }
  }

  RiverConfig cfg_;
  Level level_;
  ActionSpace space_;
  RiverSpline spline_;
  Pose pose_;
  std::vector<bool> visited_;
  std::size_t visited_n_ = 0;
  int steps_ = 0;
  bool done_ = true;
};

struct EnvConfig {
  std::string name = "cliff-circular";
  CliffConfig cliff;
  RiverConfig river;
};

inline std::unique_ptr<Environment> make_env(const EnvConfig& cfg, Level level) {
  if (cfg.name == "cliff-circular") return std::make_unique<CliffCircular>(level, cfg.cliff);
  if (cfg.name == "planar-river") return std::make_unique<PlanarRiver>(level, cfg.river);
  throw std::invalid_argument("unknown env '" + cfg.name + "' (expected cliff-circular, planar-river)");
}

// One CSV per episode (t, action, reward, cost, terminal_kind) and, when
// enabled, obs_<t>.pgm files next to it (t = 0 is the reset observation).
class EpisodeLog {
 public:
  EpisodeLog(const std::filesystem::path& dir, int episode, bool dump_obs)
      : dir_(dir), dump_obs_(dump_obs), episode_(episode) {
    std::filesystem::create_directories(dir_);
    csv_.open(dir_ / ("episode_" + std::to_string(episode) + ".csv"));
    if (!csv_) throw std::runtime_error("cannot write episode log in " + dir_.string());
    csv_ << "t,action,reward,cost,terminal_kind\n";
  }

  void reset_obs(const PatchGrid& obs) { dump(0, obs); }

  void record(int t, const ActionSpace& space, const Action& a, const StepResult& r) {
    csv_ << t << ',' << space.to_string(a) << ',' << r.reward << ',' << r.cost << ',' << to_string(r.kind) << '\n';
    dump(t + 1, r.obs);
  }

 private:
  void dump(int t, const PatchGrid& obs) {
    if (!dump_obs_) return;
    write_pgm((dir_ / ("episode_" + std::to_string(episode_) + "_obs_" + std::to_string(t) + ".pgm")).string(), obs);
  }

  std::filesystem::path dir_;
  bool dump_obs_;
  int episode_;
  std::ofstream csv_;
};

}  // namespace cade
