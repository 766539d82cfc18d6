// Dynamics-model benchmark: collect transitions, train SDM / SDM-MLP /
// Baseline in one-step prediction, evaluate recursive multi-step rollouts.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cade/config.hpp"
#include "cade/envs.hpp"
#include "cade/homography.hpp"
#include "cade/nets.hpp"
#include "cade/rng.hpp"

#ifndef CADE_SOURCE_HASH
#define CADE_SOURCE_HASH "unknown"
#endif

namespace cade {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Transition {
  PatchGrid obs;
  Action action;
  PatchGrid next;
};

using TransitionEpisode = std::vector<Transition>;

struct TransitionDataset {
  std::string env;
  Level level = Level::kMedium;
  std::size_t rows = 0, cols = 0;
  ActionSpace space{std::vector<int>{1}};
  std::vector<TransitionEpisode> train, test;

  static std::size_t count(const std::vector<TransitionEpisode>& eps) {
    std::size_t n = 0;
    for (const auto& e : eps) n += e.size();
    return n;
  }
  std::size_t train_size() const { return count(train); }
  std::size_t test_size() const { return count(test); }
};

// Every value of every action branch must occur in `eps`.
inline void check_action_coverage(const std::vector<TransitionEpisode>& eps, const ActionSpace& space) {
  std::vector<std::vector<bool>> seen;
  for (int n : space.branches()) seen.emplace_back(static_cast<std::size_t>(n), false);
  for (const auto& ep : eps)
    for (const auto& tr : ep)
      for (std::size_t b = 0; b < seen.size(); ++b) seen[b][static_cast<std::size_t>(tr.action.branch[b])] = true;
  std::string missing;
  for (std::size_t b = 0; b < seen.size(); ++b)
    for (std::size_t v = 0; v < seen[b].size(); ++v)
      if (!seen[b][v]) missing += (missing.empty() ? "" : ", ") + ("branch " + std::to_string(b) + " value " + std::to_string(v));
  if (!missing.empty()) throw DatasetError("action coverage incomplete; never triggered: " + missing);
}

namespace detail {

inline Action uniform_action(const ActionSpace& space, Rng& rng) {
  Action a;
  for (int n : space.branches()) a.branch.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
  return a;
}

// Keeps the agent alive long enough to produce varied data.
inline Action explorer_action(const Environment& env, Rng& rng) {
  if (const auto* cliff = dynamic_cast<const CliffCircular*>(&env)) {
    static constexpr int dr[5] = {0, -1, 0, 1, 0};
    static constexpr int dc[5] = {0, 0, 1, 0, -1};
    std::vector<int> safe;
    for (int m = 0; m < 5; ++m)
      if (!cliff->is_cliff(cliff->agent_row() + dr[m], cliff->agent_col() + dc[m])) safe.push_back(m);
    if (safe.empty()) return uniform_action(env.action_space(), rng);
    return Action{{safe[rng.below(safe.size())]}};
  }
  if (const auto* river = dynamic_cast<const PlanarRiver*>(&env)) {
    const Pose& p = river->pose();
    const auto nr = river->spline().nearest({p.x, p.y});
    const Vec2 t = river->spline().tangent(nr.piece);
    const Vec2 c = river->spline().point_at(nr.piece, nr.t);
    auto pick = [&](bool lo, bool hi) {
      if (lo) return 0;
      if (hi) return 2;
      return static_cast<int>(rng.below(3));
    };
    const Real mid = 0.5 * (river->config().z_min + river->config().z_max);
    const Real dyaw = wrap_angle(std::atan2(t.y, t.x) - p.yaw);
    const Real lateral = -(c.x - p.x) * std::sin(p.yaw) + (c.y - p.y) * std::cos(p.yaw);
    Action a;
    a.branch = {pick(p.z > mid + 2.0, p.z < mid - 2.0), pick(dyaw < -0.2, dyaw > 0.2),
                rng.uniform() < 0.7 ? 2 : static_cast<int>(rng.below(3)), pick(lateral < -1.0, lateral > 1.0)};
    return a;
  }
  return uniform_action(env.action_space(), rng);
}

}  // namespace detail

// Episodes fill the train split first, then the test split; the episode that
// crosses a split size is cut there.
inline TransitionDataset collect_dataset(const EnvConfig& env_cfg, Level level, const DynConfig& cfg,
                                         std::uint64_t seed) {
  auto env = make_env(env_cfg, level);
  TransitionDataset ds;
  ds.env = env->name();
  ds.level = level;
  ds.rows = env->obs_rows();
  ds.cols = env->obs_cols();
  ds.space = env->action_space();
  Rng rng(derive_seed(seed, "dyn-policy"));
  const auto train_n = static_cast<std::size_t>(cfg.train_transitions);
  const auto test_n = static_cast<std::size_t>(cfg.test_transitions);
  std::size_t episode = 0;
  while (ds.test_size() < test_n) {
    auto& split = ds.train_size() < train_n ? ds.train : ds.test;
    const std::size_t room = &split == &ds.train ? train_n - ds.train_size() : test_n - ds.test_size();
    PatchGrid obs = env->reset(derive_seed(seed, "dyn-env-" + std::to_string(episode++)));
    TransitionEpisode ep;
    for (int t = 0; t < cfg.episode_cap && ep.size() < room; ++t) {
      const Action a = rng.uniform() < cfg.explore ? detail::uniform_action(ds.space, rng)
                                                   : detail::explorer_action(*env, rng);
      auto res = env->step(a);
      ep.push_back({obs, a, res.obs});
      obs = std::move(res.obs);
      if (res.terminal) break;
    }
    split.push_back(std::move(ep));
    if (episode > 100000) throw DatasetError("collection made no progress");
  }
  check_action_coverage(ds.train, ds.space);
  return ds;
}

class DynModel {
 public:
  DynModel() = default;
  DynModel(DynModelKind kind, std::size_t rows, std::size_t cols, const ActionSpace& space, std::uint64_t seed)
      : kind_(kind), rows_(rows), cols_(cols), space_(space) {
    Rng rng(seed);
    const std::size_t in = rows * cols + static_cast<std::size_t>(space.onehot_dim());
    if (kind == DynModelKind::kSdm) net_ = Mlp("sdm", in, {64, 64}, 8, 0.01, rng);
    if (kind == DynModelKind::kSdmMlp) net_ = Mlp("sdm_mlp", in, {64, 64}, rows * cols, 1.0, rng);
  }

  DynModelKind kind() const { return kind_; }
  const ActionSpace& space() const { return space_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  Tensor input_row(const PatchGrid& obs, const Action& a) const {
    std::vector<Real> in(obs.values);
    const auto oh = space_.onehot(a);
    in.insert(in.end(), oh.begin(), oh.end());
    return Tensor::row(std::move(in));
  }

  // Prediction plus the cells it actually derives from observed data (for a
  // warp, cells whose preimage lies inside the known part of the source).
  struct Prediction {
    PatchGrid grid;
    std::vector<bool> known;
  };

  Prediction predict(const PatchGrid& obs, const std::vector<bool>& known, const Action& a) const {
    switch (kind_) {
      case DynModelKind::kBaseline: return {obs, known};
      case DynModelKind::kSdmMlp: {
        ag::Tape t(false);
        auto out = ag::sigmoid(net_.forward(t, t.constant(input_row(obs, a))));
        return {PatchGrid(rows_, cols_, out.value().vec()), std::vector<bool>(obs.size(), true)};
      }
      case DynModelKind::kSdm: {
        const auto h = solve_homography(sdm_offsets(net_, obs.values, space_, a), rows_, cols_);
        Prediction p{warp(obs, h), {}};
        PatchGrid ind(rows_, cols_);
        for (std::size_t i = 0; i < ind.size(); ++i) ind.values[i] = known[i] ? 1.0 : 0.0;
        const auto wi = warp(ind, h);
        p.known.resize(ind.size());
        for (std::size_t i = 0; i < ind.size(); ++i) p.known[i] = wi.values[i] > 1.0 - 1e-9;
        return p;
      }
    }
    throw std::logic_error("unknown dynamics model");
  }

  PatchGrid predict(const PatchGrid& obs, const Action& a) const {
    return predict(obs, std::vector<bool>(obs.size(), true), a).grid;
  }

 private:
  DynModelKind kind_ = DynModelKind::kBaseline;
  std::size_t rows_ = 0, cols_ = 0;
  ActionSpace space_{std::vector<int>{1}};
  Mlp net_;
};

struct DynTrainResult {
  DynModel model;
  std::vector<Real> epoch_losses;  // mean minibatch loss per epoch; empty for Baseline
  double seconds = 0.0;
};

inline DynTrainResult train_dyn(DynModelKind kind, const TransitionDataset& ds, const DynConfig& cfg,
                                std::uint64_t seed, SolveBackward backward = SolveBackward::kAnalytic) {
  std::vector<const Transition*> rows;
  for (const auto& ep : ds.train)
    for (const auto& tr : ep) rows.push_back(&tr);
  if (rows.empty()) throw DatasetError("train_dyn: empty training split");
  const auto start = std::chrono::steady_clock::now();
  DynTrainResult res;
  res.model = DynModel(kind, ds.rows, ds.cols, ds.space, derive_seed(seed, "dyn-init-" + to_string(kind)));
  if (kind != DynModelKind::kBaseline) {
    Rng rng(derive_seed(seed, "dyn-shuffle-" + to_string(kind)));
    AdamState opt;
    opt.options.lr = cfg.lr;
    auto params = res.model.net().params();
    const std::size_t in = res.model.net().in_dim();
    const auto bs = static_cast<std::size_t>(cfg.batch);
    std::vector<std::size_t> order(rows.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      Real sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::size_t n = std::min(bs, order.size() - s);
        Tensor inputs(n, in);
        std::vector<Tensor> obs, next;
        Tensor targets(n, ds.rows * ds.cols);
        for (std::size_t b = 0; b < n; ++b) {
          const auto& tr = *rows[order[s + b]];
          const auto row = res.model.input_row(tr.obs, tr.action);
          std::copy(row.values().begin(), row.values().end(), inputs.data() + b * in);
          if (kind == DynModelKind::kSdm) {
            obs.push_back(tr.obs.tensor());
            next.push_back(tr.next.tensor());
          } else {
            std::copy(tr.next.values.begin(), tr.next.values.end(), targets.data() + b * targets.cols());
          }
        }
        ag::Tape t;
        Var loss = kind == DynModelKind::kSdm
                       ? sdm_batch_loss(t, res.model.net(), inputs, obs, next, backward)
                       : ag::bce_with_logits(res.model.net().forward(t, t.constant(inputs)), targets);
        zero_grads(params);
        t.backward(loss);
        adam_step(params, opt);
        sum += loss.value().item();
        ++batches;
      }
      res.epoch_losses.push_back(sum / static_cast<Real>(batches));
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

struct DynStepMetrics {
  int step = 0;
  Real iou_mean = 0, iou_std = 0;
  Real l1_mean = 0, l1_std = 0;
  Real known_iou_mean = 0, known_iou_std = 0;  // IoU over cells derived from observed data
  std::size_t windows = 0;
};

struct DynEvalResult {
  DynModelKind kind = DynModelKind::kBaseline;
  std::vector<DynStepMetrics> steps;
  std::size_t skipped_episodes = 0;  // shorter than the horizon
};

inline Real mean_l1(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("mean_l1: dimension mismatch");
  Real s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<Real>(a.size());
}

// Recursive prediction from every start index with `horizon` real actions
// ahead; step h compares the h-th own prediction against the real obs.
inline DynEvalResult rollout_eval(const DynModel& model, const std::vector<TransitionEpisode>& episodes, int horizon) {
  if (horizon < 1) throw std::invalid_argument("rollout_eval: horizon must be >= 1");
  const auto H = static_cast<std::size_t>(horizon);
  std::vector<std::vector<Real>> iou(H), l1(H), kiou(H);
  DynEvalResult res;
  res.kind = model.kind();
  for (const auto& ep : episodes) {
    if (ep.size() < H) {
      ++res.skipped_episodes;
      continue;
    }
    for (std::size_t s = 0; s + H <= ep.size(); ++s) {
      PatchGrid cur = ep[s].obs;
      std::vector<bool> known(cur.size(), true);
      for (std::size_t h = 0; h < H; ++h) {
        auto p = model.predict(cur, known, ep[s + h].action);
        const auto& truth = ep[s + h].next.values;
        iou[h].push_back(binary_iou(p.grid.values, truth));
        kiou[h].push_back(binary_iou(p.grid.values, truth, p.known));
        l1[h].push_back(mean_l1(p.grid.values, truth));
        cur = std::move(p.grid);
        known = std::move(p.known);
      }
    }
  }
  auto stats = [](const std::vector<Real>& v, Real& mean, Real& sd) {
    mean = sd = 0.0;
    if (v.empty()) return;
    for (Real x : v) mean += x;
    mean /= static_cast<Real>(v.size());
    for (Real x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<Real>(v.size()));
  };
  for (std::size_t h = 0; h < H; ++h) {
    DynStepMetrics m;
    m.step = static_cast<int>(h + 1);
    m.windows = iou[h].size();
    stats(iou[h], m.iou_mean, m.iou_std);
    stats(l1[h], m.l1_mean, m.l1_std);
    stats(kiou[h], m.known_iou_mean, m.known_iou_std);
    res.steps.push_back(m);
  }
  return res;
}

inline constexpr const char* kDynMetricsHeader =
    "model,step,iou_mean,iou_std,l1_mean,l1_std,known_iou_mean,known_iou_std,windows";

inline void write_dyn_metrics(std::ostream& os, const std::vector<DynEvalResult>& results) {
  char buf[64];
  auto num = [&](Real v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  os << kDynMetricsHeader << '\n';
  for (const auto& r : results)
    for (const auto& m : r.steps)
      os << to_string(r.kind) << ',' << m.step << ',' << num(m.iou_mean) << ',' << num(m.iou_std) << ','
         << num(m.l1_mean) << ',' << num(m.l1_std) << ',' << num(m.known_iou_mean) << ','
         << num(m.known_iou_std) << ',' << m.windows << '\n';
}

struct DynBenchResult {
  TransitionDataset dataset;
  std::vector<DynTrainResult> trained;
  std::vector<DynEvalResult> evals;
};

inline DynBenchResult run_dyn_bench(const Config& cfg, std::uint64_t seed) {
  DynBenchResult out;
  out.dataset = collect_dataset(cfg.env, cfg.level, cfg.dyn, seed);
  for (auto kind : cfg.dyn.models) {
    out.trained.push_back(train_dyn(kind, out.dataset, cfg.dyn, seed, cfg.solve_backward));
    out.evals.push_back(rollout_eval(out.trained.back().model, out.dataset.test, cfg.dyn.horizon));
  }
  return out;
}

inline std::string tool_run_id(const Config& cfg, const std::string& tool, std::uint64_t seed) {
  if (!cfg.run_id.empty()) return cfg.seeds.size() > 1 ? cfg.run_id + "-s" + std::to_string(seed) : cfg.run_id;
  return tool + "-" + cfg.env.name + "-" + to_string(cfg.level) + "-s" + std::to_string(seed);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

// <out_dir>/<run_id>/{config.json, dyn_metrics.csv, metrics.csv (per-epoch
// training loss), manifest.json}.
inline std::filesystem::path write_dyn_bench(const Config& cfg, std::uint64_t seed, const DynBenchResult& r) {
  const auto dir = std::filesystem::path(cfg.out_dir) / tool_run_id(cfg, "dyn", seed);
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::ostringstream dm;
  write_dyn_metrics(dm, r.evals);
  write_text(dir / "dyn_metrics.csv", dm.str());
  std::ostringstream m;
  m << "model,epoch,loss\n";
  char buf[64];
  for (const auto& t : r.trained)
    for (std::size_t e = 0; e < t.epoch_losses.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%.9g", t.epoch_losses[e]);
      m << to_string(t.model.kind()) << ',' << e + 1 << ',' << buf << '\n';
    }
  write_text(dir / "metrics.csv", m.str());
  Json manifest;
  manifest["run_id"] = dir.filename().string();
  manifest["seed"] = seed;
  manifest["source_hash"] = CADE_SOURCE_HASH;
  manifest["train_transitions"] = r.dataset.train_size();
  manifest["test_transitions"] = r.dataset.test_size();
  Json models = Json::array();
  for (std::size_t i = 0; i < r.trained.size(); ++i) {
    models.push_back({{"model", to_string(r.trained[i].model.kind())},
                      {"train_seconds", r.trained[i].seconds},
                      {"skipped_test_episodes", r.evals[i].skipped_episodes}});
  }
  manifest["models"] = models;
  manifest["config"] = to_json(cfg);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return dir;
}

// <out_dir>/<run_id>/{config.json, metrics.csv (split,episode,t,action),
// <split>/ep_<k>/obs_<t>.pgm} with t = 0 the first observation.
inline std::filesystem::path write_dataset(const Config& cfg, std::uint64_t seed, const TransitionDataset& ds) {
  const auto dir = std::filesystem::path(cfg.out_dir) / tool_run_id(cfg, "collect", seed);
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::ostringstream m;
  m << "split,episode,t,action\n";
  for (const auto& [name, split] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}}) {
    for (std::size_t e = 0; e < split->size(); ++e) {
      const auto& ep = (*split)[e];
      const auto ed = dir / name / ("ep_" + std::to_string(e));
      std::filesystem::create_directories(ed);
      for (std::size_t t = 0; t < ep.size(); ++t) {
        if (t == 0) write_pgm((ed / "obs_0.pgm").string(), ep[0].obs);
        write_pgm((ed / ("obs_" + std::to_string(t + 1) + ".pgm")).string(), ep[t].next);
        m << name << ',' << e << ',' << t << ',' << ds.space.to_string(ep[t].action) << '\n';
      }
    }
  }
  write_text(dir / "metrics.csv", m.str());
  return dir;
}

}  // namespace cade
