// Training loop: on-policy episodes through the recurrent actor, then, per
// episode, Lagrange step, dynamics/cost model fits, advantages, estimator fit
// and the constrained actor update. Also the evaluation protocol.
#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cade/advantage.hpp"
#include "cade/checkpoint.hpp"
#include "cade/config.hpp"
#include "cade/envs.hpp"
#include "cade/focops.hpp"
#include "cade/homography.hpp"
#include "cade/nets.hpp"
#include "cade/rng.hpp"
#include "cade/safety.hpp"

#ifndef CADE_SOURCE_HASH
#define CADE_SOURCE_HASH "unknown"
#endif

namespace cade {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpisodeData {
  std::vector<PatchGrid> obs;  // T+1, obs[0] from reset
  std::vector<Action> actions;
  std::vector<Real> rewards, costs, log_probs;
  std::vector<Real> estimates;  // r_hat(h_t, a_t), or V(h_t) for critic methods
  Tensor old_log_probs;         // [T, onehot] branch log-probabilities at rollout
  Tensor hiddens;               // [T, H] trunk state that produced a_t
  Tensor trunk_inputs;          // [T, obs + onehot]
  Real bootstrap = 0.0;         // V after the last step (timeouts only)
  TerminalKind end = TerminalKind::kNone;
  int overrides = 0;

  std::size_t length() const { return actions.size(); }
  Real total_reward() const { return std::accumulate(rewards.begin(), rewards.end(), 0.0); }
  Real total_cost() const { return std::accumulate(costs.begin(), costs.end(), 0.0); }
};

inline NetConfig net_config_for(const Config& cfg, const Environment& env) {
  NetConfig nc;
  nc.obs_dim = env.obs_dim();
  nc.actions = env.action_space();
  nc.hidden = cfg.hidden;
  nc.head_units = cfg.head_units;
  nc.reward_takes_action = !uses_critic(cfg.adv);
  return nc;
}

struct RolloutOptions {
  bool greedy = false;
  bool critic = false;
  const SafetyConfig* safety = nullptr;  // null: no screening
  EpisodeLog* log = nullptr;
};

// One episode with the current networks. Hidden states and log-probabilities
// are recorded so the update can reuse them.
inline EpisodeData run_episode(Environment& env, const CadeNetworks& nets, std::uint64_t env_seed, Rng& policy_rng,
                               Rng& safety_rng, const RolloutOptions& opt) {
  EpisodeData ep;
  const auto& space = nets.actions();
  const std::size_t A = static_cast<std::size_t>(space.onehot_dim());
  const std::size_t H = nets.config().hidden;
  ep.obs.push_back(env.reset(env_seed));
  if (opt.log) opt.log->reset_obs(ep.obs.back());
  std::optional<ImaginationModels> models;
  if (opt.safety) models = default_imagination(nets);
  std::vector<Real> lp_rows, h_rows, in_rows;
  Tensor h = nets.zero_hidden();
  Action prev;
  while (true) {
    const Tensor input = nets.trunk_input(ep.obs.back().values, prev);
    h = nets.trunk_step(ep.obs.back().values, prev, h);
    const Tensor logits = nets.actor_logits(h);
    auto chosen = opt.greedy ? greedy_action(logits.values(), space) : sample_action(logits.values(), space, policy_rng);
    if (opt.safety) {
      auto s = screen_action(*models, ep.obs.back(), chosen, logits, h, space, *opt.safety, safety_rng);
      if (s.overridden) ++ep.overrides;
      chosen.action = s.action;
      chosen.log_prob = s.log_prob;
    }
    const auto lp = branch_log_probs(logits.values(), space);
    lp_rows.insert(lp_rows.end(), lp.begin(), lp.end());
    h_rows.insert(h_rows.end(), h.values().begin(), h.values().end());
    in_rows.insert(in_rows.end(), input.values().begin(), input.values().end());
    ep.estimates.push_back(opt.critic ? nets.reward_estimate(h, Action{}) : nets.reward_estimate(h, chosen.action));
    auto r = env.step(chosen.action);
    if (opt.log) opt.log->record(static_cast<int>(ep.actions.size()), space, chosen.action, r);
    ep.actions.push_back(chosen.action);
    ep.log_probs.push_back(chosen.log_prob);
    ep.rewards.push_back(r.reward);
    ep.costs.push_back(r.cost);
    ep.obs.push_back(std::move(r.obs));
    prev = chosen.action;
    if (r.terminal) {
      ep.end = r.kind;
      break;
    }
  }
  const std::size_t T = ep.actions.size();
  ep.old_log_probs = Tensor(T, A, std::move(lp_rows));
  ep.hiddens = Tensor(T, H, std::move(h_rows));
  ep.trunk_inputs = Tensor(T, nets.config().obs_dim + A, std::move(in_rows));
  if (opt.critic && ep.end == TerminalKind::kTimeout) {
    const Tensor hT = nets.trunk_step(ep.obs.back().values, prev, h);
    ep.bootstrap = nets.reward_estimate(hT, Action{});
  }
  return ep;
}

struct IterationMetrics {
  long iteration = 0;
  Real ep_reward = 0.0, ep_cost = 0.0, beta = 0.0, kl = 0.0;
  Real loss_pi = 0.0, loss_r = 0.0, loss_c = 0.0, loss_sdm = 0.0, override_rate = 0.0;
  long env_steps = 0;  // cumulative
};

inline const char* kMetricsHeader = "iteration,ep_reward,ep_cost,beta,kl,loss_pi,loss_r,loss_c,loss_sdm,override_rate,env_steps";

inline std::string fmt_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_row(const IterationMetrics& m) {
  std::string s = std::to_string(m.iteration);
  for (Real v : {m.ep_reward, m.ep_cost, m.beta, m.kl, m.loss_pi, m.loss_r, m.loss_c, m.loss_sdm, m.override_rate})
    s += "," + fmt_real(v);
  return s + "," + std::to_string(m.env_steps);
}

inline Json metrics_json(const IterationMetrics& m) {
  return Json{{"iteration", m.iteration}, {"ep_reward", m.ep_reward}, {"ep_cost", m.ep_cost},
              {"beta", m.beta},           {"kl", m.kl},               {"loss_pi", m.loss_pi},
              {"loss_r", m.loss_r},       {"loss_c", m.loss_c},       {"loss_sdm", m.loss_sdm},
              {"override_rate", m.override_rate}, {"env_steps", m.env_steps}};
}

class Trainer {
 public:
  using StageHook = std::function<void(std::string_view)>;

  Trainer(const Config& cfg, std::uint64_t seed)
      : cfg_(cfg),
        seed_(seed),
        env_(make_env(cfg.env, cfg.level)),
        nets_(net_config_for(cfg, *env_), derive_seed(seed, "init")),
        env_rng_(derive_seed(seed, "env")),
        policy_rng_(derive_seed(seed, "policy")),
        safety_rng_(derive_seed(seed, "safety")),
        imagine_rng_(derive_seed(seed, "imagine")),
        window_(static_cast<std::size_t>(cfg.window)),
        lagrange_(cfg.lagrange) {
    safety_ = cfg.safety;
    safety_.threshold = cfg.resolved_safety_threshold();
    safety_.validate();
    auto opt = [&](Real lr) {
      AdamState s;
      s.options.lr = lr;
      s.options.clip_norm = cfg.clip_norm;
      return s;
    };
    actor_opt_ = opt(cfg.actor_lr);
    reward_opt_ = opt(cfg.reward_lr);
    cost_opt_ = opt(cfg.cost_lr);
    sdm_opt_ = opt(cfg.sdm_lr);
  }

  void set_stage_hook(StageHook h) { hook_ = std::move(h); }
  void set_episode_log_dir(std::filesystem::path dir) { episode_dir_ = std::move(dir); }

  const Config& config() const { return cfg_; }
  CadeNetworks& nets() { return nets_; }
  const CadeNetworks& nets() const { return nets_; }
  const LagrangeState& lagrange() const { return lagrange_; }
  const ReturnWindow& window() const { return window_; }
  long env_steps() const { return env_steps_; }
  long iterations() const { return iteration_; }
  bool finished() const { return env_steps_ >= cfg_.steps; }

  bool safety_active() const {
    return safety_in_training(cfg_.safety_mode) &&
           static_cast<Real>(env_steps_) >= safety_.activation_fraction * static_cast<Real>(cfg_.steps);
  }

  // One iteration: collect episodes_per_iter episodes, then run each stage
  // over the buffer episode by episode. Reward advantages are normalized
  // jointly over the buffer.
  IterationMetrics iterate() {
    std::vector<EpisodeData> eps;
    RolloutOptions ro;
    ro.critic = uses_critic(cfg_.adv);
    ro.safety = safety_active() ? &safety_ : nullptr;
    stage("collect");
    for (int k = 0; k < cfg_.episodes_per_iter; ++k) {
      std::unique_ptr<EpisodeLog> log;
      if (!episode_dir_.empty()) log = std::make_unique<EpisodeLog>(episode_dir_, episode_count_, cfg_.dump_obs);
      ro.log = log.get();
      eps.push_back(run_episode(*env_, nets_, env_rng_.bits(), policy_rng_, safety_rng_, ro));
      ++episode_count_;
      env_steps_ += static_cast<long>(eps.back().length());
    }
    const Real n = static_cast<Real>(eps.size());
    const bool constrained = cfg_.constraint == Constraint::kLagrangian;
    IterationMetrics m;
    m.iteration = ++iteration_;

    stage("lagrange");
    if (constrained)
      for (const auto& ep : eps) lagrange_ = lagrange_update(lagrange_, ep.total_cost());

    stage("sdm");
    for (const auto& ep : eps) m.loss_sdm += fit_sdm(ep) / n;
    stage("cost_estimator");
    for (const auto& ep : eps) m.loss_c += fit_cost(ep) / n;

    stage("reward_advantage");
    std::vector<AdvantageOutput> advs;
    std::vector<Real> flat;
    for (const auto& ep : eps) {
      advs.push_back(reward_advantage(ep));
      window_.push(ep.total_reward());
      flat.insert(flat.end(), advs.back().advantages.begin(), advs.back().advantages.end());
    }
    if (cfg_.normalize_reward_adv) {
      flat = normalize(flat);
      std::size_t off = 0;
      for (auto& a : advs) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), a.advantages.size(), a.advantages.begin());
        off += a.advantages.size();
      }
    }

    stage("cost_advantage");
    std::vector<std::vector<Real>> a_c;
    for (const auto& ep : eps) a_c.push_back(cost_advantages(ep, constrained));

    stage("reward_estimator");
    for (std::size_t e = 0; e < eps.size(); ++e)
      m.loss_r += fit_reward(eps[e], uses_critic(cfg_.adv) ? advs[e].critic_targets : eps[e].rewards) / n;

    stage("actor");
    auto params = nets_.policy_params();
    bool stopped = false;
    for (int epoch = 0; epoch < cfg_.actor_epochs && !stopped; ++epoch) {
      for (std::size_t e = 0; e < eps.size(); ++e) {
        const auto& ep = eps[e];
        Tape tape;
        auto lp = log_probs(tape, ep);
        auto res = policy_loss(lp, ep.old_log_probs, ep.actions, advs[e].advantages, a_c[e], lagrange_.beta, cfg_.trust,
                               nets_.actions());
        if (epoch == 0) m.loss_pi += res.loss.value().item() / n;
        zero_grads(params);
        tape.backward(res.loss);
        adam_step(params, actor_opt_);
      }
      m.kl = buffer_kl(eps);
      stopped = kl_early_stop(m.kl, cfg_.trust.kl_stop);
    }

    std::size_t steps = 0;
    int overrides = 0;
    for (const auto& ep : eps) {
      m.ep_reward += ep.total_reward() / n;
      m.ep_cost += ep.total_cost() / n;
      steps += ep.length();
      overrides += ep.overrides;
    }
    m.beta = lagrange_.beta;
    m.override_rate = steps ? static_cast<Real>(overrides) / static_cast<Real>(steps) : 0.0;
    m.env_steps = env_steps_;
    return m;
  }

 private:
  void stage(std::string_view s) {
    if (hook_) hook_(s);
  }

  template <typename F>
  Real minibatches(std::size_t n, F&& f) {
    Real total = 0.0;
    std::size_t batches = 0;
    const std::size_t B = static_cast<std::size_t>(cfg_.batch);
    for (std::size_t lo = 0; lo < n; lo += B, ++batches) total += f(lo, std::min(n, lo + B));
    return batches ? total / static_cast<Real>(batches) : 0.0;
  }

  Real fit_sdm(const EpisodeData& ep) {
    auto params = nets_.sdm().params();
    const auto& space = nets_.actions();
    return minibatches(ep.length(), [&](std::size_t lo, std::size_t hi) {
      std::vector<Real> rows;
      std::vector<Tensor> obs, next;
      for (std::size_t t = lo; t < hi; ++t) {
        rows.insert(rows.end(), ep.obs[t].values.begin(), ep.obs[t].values.end());
        const auto oh = space.onehot(ep.actions[t]);
        rows.insert(rows.end(), oh.begin(), oh.end());
        obs.push_back(ep.obs[t].tensor());
        next.push_back(ep.obs[t + 1].tensor());
      }
      Tape tape;
      const Tensor inputs(hi - lo, nets_.sdm().in_dim(), std::move(rows));
      auto loss = sdm_batch_loss(tape, nets_.sdm(), inputs, obs, next, cfg_.solve_backward);
      zero_grads(params);
      tape.backward(loss);
      adam_step(params, sdm_opt_);
      return loss.value().item();
    });
  }

  Real fit_cost(const EpisodeData& ep) {
    auto params = nets_.cost().params();
    return minibatches(ep.length(), [&](std::size_t lo, std::size_t hi) {
      std::vector<Real> rows;
      Tensor target(hi - lo, 1);
      for (std::size_t t = lo; t < hi; ++t) {
        rows.insert(rows.end(), ep.obs[t + 1].values.begin(), ep.obs[t + 1].values.end());
        target[t - lo] = ep.costs[t];
      }
      Tape tape;
      auto x = tape.constant(Tensor(hi - lo, nets_.cost().in_dim(), std::move(rows)));
      auto loss = mse_loss(nets_.cost().forward(tape, x), target);
      zero_grads(params);
      tape.backward(loss);
      adam_step(params, cost_opt_);
      return loss.value().item();
    });
  }

  // Reward estimator (MGAE) or critic, on detached rollout hidden states.
  Real fit_reward(const EpisodeData& ep, const std::vector<Real>& targets) {
    auto params = nets_.reward().params();
    const auto& space = nets_.actions();
    const std::size_t H = nets_.config().hidden;
    const bool with_action = nets_.config().reward_takes_action;
    const std::size_t in = nets_.reward().in_dim();
    return minibatches(ep.length(), [&](std::size_t lo, std::size_t hi) {
      std::vector<Real> rows;
      Tensor target(hi - lo, 1);
      for (std::size_t t = lo; t < hi; ++t) {
        const Real* hrow = ep.hiddens.data() + t * H;
        rows.insert(rows.end(), hrow, hrow + H);
        if (with_action) {
          const auto oh = space.onehot(ep.actions[t]);
          rows.insert(rows.end(), oh.begin(), oh.end());
        }
        target[t - lo] = targets[t];
      }
      Tape tape;
      auto x = tape.constant(Tensor(hi - lo, in, std::move(rows)));
      auto loss = mse_loss(nets_.reward().forward(tape, x), target);
      zero_grads(params);
      tape.backward(loss);
      adam_step(params, reward_opt_);
      return loss.value().item();
    });
  }

  // Baseline is the window mean before this episode's return is added.
  AdvantageOutput reward_advantage(const EpisodeData& ep) const {
    AdvantageInputs in;
    in.rewards = ep.rewards;
    in.estimated = ep.estimates;
    std::vector<Real> values;
    if (uses_critic(cfg_.adv)) {
      values = ep.estimates;
      values.push_back(ep.bootstrap);
      in.values = values;
    }
    in.log_pi = ep.log_probs;
    in.log_mu = ep.log_probs;
    in.baseline = window_.mean();
    in.gamma = cfg_.gamma;
    in.lambda = cfg_.lambda;
    in.mgae_mode = cfg_.mgae_mode;
    return estimate_advantages(cfg_.adv, in);
  }

  std::vector<Real> cost_advantages(const EpisodeData& ep, bool constrained) {
    std::vector<Real> a_c(ep.length(), 0.0);
    if (!constrained) return a_c;
    const auto models = default_imagination(nets_);
    const std::size_t H = nets_.config().hidden;
    for (std::size_t t = 0; t < ep.length(); ++t) {
      Tensor h(1, H);
      std::copy_n(ep.hiddens.data() + t * H, H, h.data());
      a_c[t] = cost_advantage(models, ep.obs[t], ep.actions[t], h, cfg_.cost_adv, imagine_rng_);
    }
    return a_c;
  }

  Var log_probs(Tape& tape, const EpisodeData& ep) const {
    auto hs = nets_.trunk().unroll(tape, tape.constant(ep.trunk_inputs), tape.constant(nets_.zero_hidden()));
    return ag::log_softmax_branches(nets_.actor().forward(tape, hs), nets_.actions().branches());
  }

  // Step-weighted mean KL(pi_theta || pi_k) over the buffer.
  Real buffer_kl(const std::vector<EpisodeData>& eps) const {
    Real s = 0.0;
    std::size_t steps = 0;
    for (const auto& ep : eps) {
      Tape probe(false);
      s += mean_kl(log_probs(probe, ep).value(), ep.old_log_probs) * static_cast<Real>(ep.length());
      steps += ep.length();
    }
    return steps ? s / static_cast<Real>(steps) : 0.0;
  }

  Config cfg_;
  std::uint64_t seed_;
  std::unique_ptr<Environment> env_;
  CadeNetworks nets_;
  Rng env_rng_, policy_rng_, safety_rng_, imagine_rng_;
  ReturnWindow window_;
  LagrangeState lagrange_;
  SafetyConfig safety_;
  AdamState actor_opt_, reward_opt_, cost_opt_, sdm_opt_;
  StageHook hook_;
  std::filesystem::path episode_dir_;
  long env_steps_ = 0;
  long iteration_ = 0;
  int episode_count_ = 0;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline void save_networks(const std::filesystem::path& path, CadeNetworks& nets) {
  const auto p = nets.all_params();
  std::vector<const Parameter*> cp(p.begin(), p.end());
  save_checkpoint(path.string(), cp);
}

inline void load_networks(const std::filesystem::path& path, CadeNetworks& nets) {
  auto p = nets.all_params();
  load_checkpoint(path.string(), p);
}

struct RunResult {
  std::filesystem::path dir;
  std::vector<IterationMetrics> metrics;
};

// Full run for one seed: <out_dir>/<run_id>/{config.json, metrics.csv,
// manifest.json, checkpoints/}.
inline RunResult train_run(const Config& cfg, std::uint64_t seed, const Trainer::StageHook& hook = {},
                           std::ostream* progress = nullptr) {
  RunResult res;
  res.dir = std::filesystem::path(cfg.out_dir) / default_run_id(cfg, seed);
  std::filesystem::create_directories(res.dir / "checkpoints");
  const std::string started = utc_timestamp();
  {
    std::ofstream(res.dir / "config.json") << to_json(cfg).dump(2) << '\n';
  }
  Trainer tr(cfg, seed);
  if (hook) tr.set_stage_hook(hook);
  if (cfg.dump_obs) tr.set_episode_log_dir(res.dir / "episodes");
  std::ofstream csv(res.dir / "metrics.csv");
  if (!csv) throw std::runtime_error("cannot write " + (res.dir / "metrics.csv").string());
  csv << kMetricsHeader << '\n';
  save_networks(res.dir / "checkpoints" / "iter_0.bin", tr.nets());
  while (!tr.finished()) {
    IterationMetrics m;
    try {
      m = tr.iterate();
    } catch (const ag::Error& e) {
      const auto diag = res.dir / "diagnostic.bin";
      save_networks(diag, tr.nets());
      std::ofstream(res.dir / "diagnostic.txt") << "iteration " << tr.iterations() + 1 << " env_steps " << tr.env_steps()
                                                << "\n" << e.what() << '\n';
      throw TrainingError("training diverged at iteration " + std::to_string(tr.iterations() + 1) + ": " + e.what() +
                          " (state saved to " + diag.string() + ")");
    }
    csv << metrics_row(m) << '\n';
    res.metrics.push_back(m);
    if (cfg.checkpoint_every > 0 && m.iteration % cfg.checkpoint_every == 0) {
      save_networks(res.dir / "checkpoints" / ("iter_" + std::to_string(m.iteration) + ".bin"), tr.nets());
    }
    if (progress && m.iteration % 200 == 0) {
      *progress << res.dir.filename().string() << " iter " << m.iteration << " steps " << m.env_steps << " reward "
                << fmt_real(m.ep_reward) << " cost " << fmt_real(m.ep_cost) << " beta " << fmt_real(m.beta) << std::endl;
    }
  }
  save_networks(res.dir / "checkpoints" / "final.bin", tr.nets());
  Json manifest;
  manifest["run_id"] = res.dir.filename().string();
  manifest["seed"] = seed;
  manifest["source_hash"] = CADE_SOURCE_HASH;
  manifest["started_at"] = started;
  manifest["finished_at"] = utc_timestamp();
  manifest["iterations"] = tr.iterations();
  manifest["env_steps"] = tr.env_steps();
  manifest["final_beta"] = tr.lagrange().beta;
  manifest["checkpoint"] = "checkpoints/final.bin";
  manifest["config"] = to_json(cfg);
  Json rows = Json::array();
  for (const auto& m : res.metrics) rows.push_back(metrics_json(m));
  manifest["metrics"] = rows;
  std::ofstream(res.dir / "manifest.json") << manifest.dump(2) << '\n';
  return res;
}

struct EvalEpisode {
  Level level = Level::kMedium;
  int episode = 0;
  Real reward = 0.0, cost = 0.0;
  int steps = 0, overrides = 0;
  TerminalKind end = TerminalKind::kNone;
};

struct EvalSummary {
  Level level = Level::kMedium;
  int episodes = 0;
  Real reward_mean = 0.0, reward_std = 0.0, cost_mean = 0.0, cost_std = 0.0, override_rate = 0.0;
};

// Rolls out `nets` on every configured level. Episode seeds come from a
// stream separate from training, so evaluation never reuses training layouts.
inline std::vector<EvalEpisode> evaluate(const Config& cfg, const CadeNetworks& nets, std::uint64_t seed,
                                         bool with_safety) {
  std::vector<EvalEpisode> out;
  SafetyConfig safety = cfg.safety;
  safety.threshold = cfg.resolved_safety_threshold();
  RolloutOptions ro;
  ro.greedy = cfg.eval.greedy;
  ro.critic = !nets.config().reward_takes_action;
  ro.safety = with_safety ? &safety : nullptr;
  for (Level level : cfg.eval.levels) {
    auto env = make_env(cfg.env, level);
    Rng env_rng(derive_seed(seed, "eval-env-" + to_string(level)));
    Rng policy_rng(derive_seed(seed, "eval-policy-" + to_string(level)));
    Rng safety_rng(derive_seed(seed, "eval-safety-" + to_string(level)));
    for (int e = 0; e < cfg.eval.episodes; ++e) {
      auto ep = run_episode(*env, nets, env_rng.bits(), policy_rng, safety_rng, ro);
      out.push_back({level, e, ep.total_reward(), ep.total_cost(), static_cast<int>(ep.length()), ep.overrides, ep.end});
    }
  }
  return out;
}

inline std::vector<EvalSummary> summarize(const std::vector<EvalEpisode>& eps) {
  std::vector<EvalSummary> out;
  for (Level level : {Level::kEasy, Level::kMedium, Level::kHard}) {
    std::vector<Real> r, c;
    long steps = 0, ov = 0;
    for (const auto& e : eps) {
      if (e.level != level) continue;
      r.push_back(e.reward);
      c.push_back(e.cost);
      steps += e.steps;
      ov += e.overrides;
    }
    if (r.empty()) continue;
    auto stats = [](const std::vector<Real>& v, Real& mean, Real& sd) {
      mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<Real>(v.size());
      Real s = 0.0;
      for (Real x : v) s += (x - mean) * (x - mean);
      sd = std::sqrt(s / static_cast<Real>(v.size()));
    };
    EvalSummary s;
    s.level = level;
    s.episodes = static_cast<int>(r.size());
    stats(r, s.reward_mean, s.reward_std);
    stats(c, s.cost_mean, s.cost_std);
    s.override_rate = steps ? static_cast<Real>(ov) / static_cast<Real>(steps) : 0.0;
    out.push_back(s);
  }
  return out;
}

inline void write_eval_episodes(const std::filesystem::path& path, const std::vector<EvalEpisode>& eps) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "level,episode,reward,cost,steps,overrides,terminal\n";
  for (const auto& e : eps) {
    f << to_string(e.level) << ',' << e.episode << ',' << fmt_real(e.reward) << ',' << fmt_real(e.cost) << ',' << e.steps
      << ',' << e.overrides << ',' << to_string(e.end) << '\n';
  }
}

inline void write_eval_summary(const std::filesystem::path& path, const std::vector<EvalEpisode>& eps) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "level,episodes,reward_mean,reward_std,cost_mean,cost_std,override_rate\n";
  for (const auto& s : summarize(eps)) {
    f << to_string(s.level) << ',' << s.episodes << ',' << fmt_real(s.reward_mean) << ',' << fmt_real(s.reward_std) << ','
      << fmt_real(s.cost_mean) << ',' << fmt_real(s.cost_std) << ',' << fmt_real(s.override_rate) << '\n';
  }
}

struct EvalRunResult {
  std::filesystem::path dir;
  std::vector<EvalEpisode> episodes;
};

// Evaluates a checkpoint into <out_dir>/<run_id>/eval (eval-safety when the
// safety layer screens actions): episodes.csv, metrics.csv, manifest.json.
inline EvalRunResult eval_run(const Config& cfg, std::uint64_t seed, const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
  auto env = make_env(cfg.env, cfg.level);
  CadeNetworks nets(net_config_for(cfg, *env), derive_seed(seed, "init"));
  load_networks(checkpoint, nets);
  const bool with_safety = safety_in_inference(cfg.safety_mode);
  EvalRunResult res;
  res.dir = std::filesystem::path(cfg.out_dir) / default_run_id(cfg, seed) / (with_safety ? "eval-safety" : "eval");
  std::filesystem::create_directories(res.dir);
  const std::string started = utc_timestamp();
  res.episodes = evaluate(cfg, nets, seed, with_safety);
  write_eval_episodes(res.dir / "episodes.csv", res.episodes);
  write_eval_summary(res.dir / "metrics.csv", res.episodes);
  Json manifest;
  manifest["run_id"] = default_run_id(cfg, seed);
  manifest["seed"] = seed;
  manifest["source_hash"] = CADE_SOURCE_HASH;
  manifest["started_at"] = started;
  manifest["finished_at"] = utc_timestamp();
  manifest["checkpoint"] = std::filesystem::absolute(checkpoint).string();
  manifest["safety_layer"] = with_safety;
  manifest["config"] = to_json(cfg);
  std::ofstream(res.dir / "manifest.json") << manifest.dump(2) << '\n';
  return res;
}

}  // namespace cade
