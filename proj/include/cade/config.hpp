// Run configuration: one nested JSON document. Defaults < config file <
// command-line overrides; unknown keys are rejected with their dotted path.
#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cade/advantage.hpp"
#include "cade/envs.hpp"
#include "cade/focops.hpp"
#include "cade/homography.hpp"
#include "cade/safety.hpp"

namespace cade {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Constraint { kNone, kLagrangian };

inline std::string to_string(Constraint c) { return c == Constraint::kNone ? "none" : "lagrangian"; }
inline Constraint parse_constraint(const std::string& s) {
  if (s == "none") return Constraint::kNone;
  if (s == "lagrangian") return Constraint::kLagrangian;
  throw std::invalid_argument("unknown constraint '" + s + "' (expected none, lagrangian)");
}

enum class DynModelKind { kSdm, kSdmMlp, kBaseline };

inline std::string to_string(DynModelKind k) {
  switch (k) {
    case DynModelKind::kSdm: return "sdm";
    case DynModelKind::kSdmMlp: return "sdm-mlp";
    case DynModelKind::kBaseline: return "baseline";
  }
  return "?";
}
inline DynModelKind parse_dyn_model(const std::string& s) {
  for (auto k : {DynModelKind::kSdm, DynModelKind::kSdmMlp, DynModelKind::kBaseline})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown dynamics model '" + s + "' (expected sdm, sdm-mlp, baseline)");
}

struct DynConfig {
  std::vector<DynModelKind> models = {DynModelKind::kSdm, DynModelKind::kSdmMlp, DynModelKind::kBaseline};
  int train_transitions = 1720;
  int test_transitions = 492;
  int epochs = 30;
  int batch = 64;
  Real lr = 1e-3;
  int horizon = 10;
  Real explore = 0.3;  // probability of a uniformly random joint action
  int episode_cap = 100;  // collection episodes are cut after this many steps
};

struct EvalConfig {
  int episodes = 30;
  std::vector<Level> levels = {Level::kEasy, Level::kMedium, Level::kHard};
  bool greedy = false;
};

struct Config {
  EnvConfig env;
  Level level = Level::kMedium;
  std::vector<std::uint64_t> seeds = {1};
  long steps = 150000;
  int episodes_per_iter = 8;

  AdvEstimator adv = AdvEstimator::kMgae;
  MgaeMode mgae_mode = MgaeMode::kInclusive;
  int window = 10;
  Real gamma = 0.99;
  Real lambda = 0.95;
  bool normalize_reward_adv = true;

  Constraint constraint = Constraint::kNone;
  LagrangeState lagrange;
  TrustRegionConfig trust;
  int actor_epochs = 10;
  CostAdvantageConfig cost_adv;

  SafetyMode safety_mode = SafetyMode::kOff;
  SafetyConfig safety;
  std::optional<Real> safety_threshold;  // unset: 1 for cliff-circular, 0.5 for planar-river

  std::size_t hidden = 128;
  std::size_t head_units = 64;
  Real actor_lr = 3e-4, reward_lr = 1e-3, cost_lr = 1e-3, sdm_lr = 1e-3;
  Real clip_norm = 10.0;
  int batch = 64;
  SolveBackward solve_backward = SolveBackward::kAnalytic;

  EvalConfig eval;
  DynConfig dyn;

  int checkpoint_every = 0;  // iterations; 0 = initial and final only
  bool dump_obs = false;
  std::string out_dir = "runs";
  std::string run_id;  // empty: derived from env, level, estimator and seed

  Real resolved_safety_threshold() const {
    if (safety_threshold) return *safety_threshold;
    return env.name == "planar-river" ? 0.5 : 1.0;
  }
};

namespace detail {

template <typename T>
Json array_json(const std::vector<T>& v) {
  Json a = Json::array();
  for (const auto& x : v) a.push_back(x);
  return a;
}

}  // namespace detail

inline Json to_json(const Config& c) {
  Json j;
  const auto& cl = c.env.cliff;
  const auto& rv = c.env.river;
  j["env"] = {
      {"name", c.env.name},
      {"level", to_string(c.level)},
      {"cliff",
       {{"rows", cl.rows},
        {"cols", cl.cols},
        {"view", cl.view},
        {"ring_top", cl.ring_top},
        {"ring_side", cl.ring_side},
        {"wall_margin", cl.wall_margin},
        {"cliffs", {cl.cliffs[0], cl.cliffs[1], cl.cliffs[2]}},
        {"max_steps", cl.max_steps},
        {"random_spawn", cl.random_spawn}}},
      {"river",
       {{"segments", rv.segments},
        {"segment_length", rv.segment_length},
        {"width", rv.width},
        {"d_max", rv.d_max},
        {"z_min", rv.z_min},
        {"z_max", rv.z_max},
        {"step_translation", rv.step_translation},
        {"step_yaw_deg", rv.step_yaw_deg},
        {"step_vertical", rv.step_vertical},
        {"pitch_deg", rv.pitch_deg},
        {"fov_deg", rv.fov_deg},
        {"image", rv.image},
        {"patches", rv.patches},
        {"yaw_limit_deg", rv.yaw_limit_deg},
        {"phi_lo", rv.phi_lo},
        {"phi_hi", rv.phi_hi},
        {"max_steps", rv.max_steps},
        {"bends", {rv.bends[0], rv.bends[1], rv.bends[2]}}}}};
  j["seeds"] = detail::array_json(c.seeds);
  j["steps"] = c.steps;
  j["episodes_per_iter"] = c.episodes_per_iter;
  j["adv"] = {{"estimator", to_string(c.adv)},
              {"mgae_mode", c.mgae_mode == MgaeMode::kInclusive ? "inclusive" : "exclusive"},
              {"window", c.window},
              {"gamma", c.gamma},
              {"lambda", c.lambda},
              {"normalize", c.normalize_reward_adv}};
  j["constraint"] = to_string(c.constraint);
  j["lagrange"] = {{"lr", c.lagrange.lr},
                   {"budget", c.lagrange.budget},
                   {"beta_max", c.lagrange.beta_max},
                   {"beta_init", c.lagrange.beta}};
  j["trust"] = {{"kl_mask", c.trust.kl_mask},
                {"kl_stop", c.trust.kl_stop},
                {"alpha", c.trust.alpha},
                {"actor_epochs", c.actor_epochs}};
  j["cost_adv"] = {{"horizon", c.cost_adv.horizon}, {"gamma", c.cost_adv.gamma}, {"k", c.cost_adv.k}, {"c_b", c.cost_adv.c_b}};
  j["safety"] = {{"mode", to_string(c.safety_mode)},
                 {"samples", c.safety.samples},
                 {"horizon", c.safety.horizon},
                 {"threshold", c.safety_threshold ? Json(*c.safety_threshold) : Json(nullptr)},
                 {"activation_fraction", c.safety.activation_fraction}};
  j["nets"] = {{"hidden", c.hidden}, {"head_units", c.head_units}};
  j["optim"] = {{"actor_lr", c.actor_lr}, {"reward_lr", c.reward_lr}, {"cost_lr", c.cost_lr},
                {"sdm_lr", c.sdm_lr},     {"clip_norm", c.clip_norm}, {"batch", c.batch},
                {"solve_backward", c.solve_backward == SolveBackward::kAnalytic ? "analytic" : "finite-difference"}};
  Json levels = Json::array();
  for (auto l : c.eval.levels) levels.push_back(to_string(l));
  j["eval"] = {{"episodes", c.eval.episodes}, {"levels", levels}, {"greedy", c.eval.greedy}};
  Json models = Json::array();
  for (auto m : c.dyn.models) models.push_back(to_string(m));
  j["dyn"] = {{"models", models},
              {"train_transitions", c.dyn.train_transitions},
              {"test_transitions", c.dyn.test_transitions},
              {"epochs", c.dyn.epochs},
              {"batch", c.dyn.batch},
              {"lr", c.dyn.lr},
              {"horizon", c.dyn.horizon},
              {"explore", c.dyn.explore},
              {"episode_cap", c.dyn.episode_cap}};
  j["checkpoint_every"] = c.checkpoint_every;
  j["dump_obs"] = c.dump_obs;
  j["out_dir"] = c.out_dir;
  j["run_id"] = c.run_id;
  return j;
}

namespace detail {

// Overlays `patch` onto `base`, rejecting keys absent from `base`. Nullable
// leaves (null in base) accept any scalar.
inline void merge_strict(Json& base, const Json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      if (!slot.is_null() && !it.value().is_null()) {
        const bool num_ok = slot.is_number() && it.value().is_number();
        if (!num_ok && slot.type() != it.value().type()) {
          throw ConfigError("config key '" + key + "' has the wrong type (expected " + std::string(slot.type_name()) +
                            ", got " + it.value().type_name() + ")");
        }
      }
      slot = it.value();
    }
  }
}

template <typename T>
T get(const Json& j, const std::string& section, const std::string& key) {
  const std::string name = section.empty() ? key : section + "." + key;
  const Json& node = section.empty() ? j : j.at(section);
  try {
    return node.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + name + "': " + e.what());
  }
}

inline void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config key '" + key + "' " + what);
}

template <typename F>
auto parse_enum(F f, const std::string& value, const std::string& key) {
  try {
    return f(value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

}  // namespace detail

inline Config from_json(const Json& patch) {
  Json j = to_json(Config{});
  detail::merge_strict(j, patch, "");
  Config c;
  using detail::get;
  using detail::parse_enum;
  using detail::require;
  const Json& e = j["env"];
  c.env.name = e["name"].get<std::string>();
  require(c.env.name == "cliff-circular" || c.env.name == "planar-river", "env.name",
          "must be one of cliff-circular, planar-river (got '" + c.env.name + "')");
  c.level = parse_enum(parse_level, e["level"].get<std::string>(), "env.level");
  const Json& cl = e["cliff"];
  c.env.cliff.rows = cl["rows"].get<int>();
  c.env.cliff.cols = cl["cols"].get<int>();
  c.env.cliff.view = cl["view"].get<int>();
  c.env.cliff.ring_top = cl["ring_top"].get<int>();
  c.env.cliff.ring_side = cl["ring_side"].get<int>();
  c.env.cliff.wall_margin = cl["wall_margin"].get<int>();
  require(cl["cliffs"].is_array() && cl["cliffs"].size() == 3, "env.cliff.cliffs", "must list 3 counts");
  for (int i = 0; i < 3; ++i) c.env.cliff.cliffs[i] = cl["cliffs"][i].get<int>();
  require(c.env.cliff.cliffs[0] < c.env.cliff.cliffs[1] && c.env.cliff.cliffs[1] < c.env.cliff.cliffs[2],
          "env.cliff.cliffs", "must be strictly increasing");
  c.env.cliff.max_steps = cl["max_steps"].get<int>();
  c.env.cliff.random_spawn = cl["random_spawn"].get<bool>();
  const Json& rv = e["river"];
  auto& r = c.env.river;
  r.segments = rv["segments"].get<int>();
  r.segment_length = rv["segment_length"].get<Real>();
  r.width = rv["width"].get<Real>();
  r.d_max = rv["d_max"].get<Real>();
  r.z_min = rv["z_min"].get<Real>();
  r.z_max = rv["z_max"].get<Real>();
  r.step_translation = rv["step_translation"].get<Real>();
  r.step_yaw_deg = rv["step_yaw_deg"].get<Real>();
  r.step_vertical = rv["step_vertical"].get<Real>();
  r.pitch_deg = rv["pitch_deg"].get<Real>();
  r.fov_deg = rv["fov_deg"].get<Real>();
  r.image = rv["image"].get<int>();
  r.patches = rv["patches"].get<int>();
  r.yaw_limit_deg = rv["yaw_limit_deg"].get<Real>();
  r.phi_lo = rv["phi_lo"].get<Real>();
  r.phi_hi = rv["phi_hi"].get<Real>();
  r.max_steps = rv["max_steps"].get<int>();
  require(rv["bends"].is_array() && rv["bends"].size() == 3, "env.river.bends", "must list 3 counts");
  for (int i = 0; i < 3; ++i) r.bends[i] = rv["bends"][i].get<int>();
  require(r.segments >= 4, "env.river.segments", "must be >= 4");
  require(r.width > 0 && r.d_max > 0, "env.river.width", "and d_max must be > 0");
  require(r.image > 0 && r.patches > 0 && r.image % r.patches == 0, "env.river.image", "must be a positive multiple of patches");

  require(j["seeds"].is_array() && !j["seeds"].empty(), "seeds", "must be a non-empty list");
  c.seeds.clear();
  for (const auto& s : j["seeds"]) {
    require(s.is_number_integer() && s.get<long long>() >= 0, "seeds", "must hold non-negative integers");
    c.seeds.push_back(s.get<std::uint64_t>());
  }
  c.steps = get<long>(j, "", "steps");
  require(c.steps >= 0, "steps", "must be >= 0");
  c.episodes_per_iter = get<int>(j, "", "episodes_per_iter");
  require(c.episodes_per_iter >= 1, "episodes_per_iter", "must be >= 1");

  c.adv = parse_enum(parse_adv, get<std::string>(j, "adv", "estimator"), "adv.estimator");
  const auto mode = get<std::string>(j, "adv", "mgae_mode");
  require(mode == "inclusive" || mode == "exclusive", "adv.mgae_mode", "must be inclusive or exclusive");
  c.mgae_mode = mode == "inclusive" ? MgaeMode::kInclusive : MgaeMode::kExclusive;
  c.window = get<int>(j, "adv", "window");
  require(c.window >= 1, "adv.window", "must be >= 1");
  c.gamma = get<Real>(j, "adv", "gamma");
  require(c.gamma > 0 && c.gamma <= 1, "adv.gamma", "must lie in (0,1]");
  c.lambda = get<Real>(j, "adv", "lambda");
  require(c.lambda >= 0 && c.lambda <= 1, "adv.lambda", "must lie in [0,1]");
  c.normalize_reward_adv = get<bool>(j, "adv", "normalize");

  c.constraint = parse_enum(parse_constraint, get<std::string>(j, "", "constraint"), "constraint");
  c.lagrange.lr = get<Real>(j, "lagrange", "lr");
  c.lagrange.budget = get<Real>(j, "lagrange", "budget");
  c.lagrange.beta_max = get<Real>(j, "lagrange", "beta_max");
  c.lagrange.beta = get<Real>(j, "lagrange", "beta_init");
  require(c.lagrange.lr > 0, "lagrange.lr", "must be > 0");
  require(c.lagrange.budget >= 0, "lagrange.budget", "must be >= 0");
  require(c.lagrange.beta_max >= 0, "lagrange.beta_max", "must be >= 0");
  require(c.lagrange.beta >= 0 && c.lagrange.beta <= c.lagrange.beta_max, "lagrange.beta_init", "must lie in [0, beta_max]");
  c.trust.kl_mask = get<Real>(j, "trust", "kl_mask");
  c.trust.kl_stop = get<Real>(j, "trust", "kl_stop");
  c.trust.alpha = get<Real>(j, "trust", "alpha");
  c.actor_epochs = get<int>(j, "trust", "actor_epochs");
  require(c.trust.kl_mask > 0, "trust.kl_mask", "must be > 0");
  require(c.trust.kl_stop > 0, "trust.kl_stop", "must be > 0");
  require(c.trust.alpha > 0, "trust.alpha", "must be > 0");
  require(c.actor_epochs >= 1, "trust.actor_epochs", "must be >= 1");
  c.cost_adv.horizon = get<int>(j, "cost_adv", "horizon");
  c.cost_adv.gamma = get<Real>(j, "cost_adv", "gamma");
  c.cost_adv.k = get<Real>(j, "cost_adv", "k");
  c.cost_adv.c_b = get<Real>(j, "cost_adv", "c_b");
  require(c.cost_adv.horizon >= 1, "cost_adv.horizon", "must be >= 1");

  c.safety_mode = parse_enum(parse_safety_mode, get<std::string>(j, "safety", "mode"), "safety.mode");
  c.safety.samples = get<int>(j, "safety", "samples");
  c.safety.horizon = get<int>(j, "safety", "horizon");
  c.safety.activation_fraction = get<Real>(j, "safety", "activation_fraction");
  if (!j["safety"]["threshold"].is_null()) {
    c.safety_threshold = get<Real>(j, "safety", "threshold");
    require(*c.safety_threshold > 0, "safety.threshold", "must be > 0");
  }
  c.safety.threshold = c.resolved_safety_threshold();
  try {
    c.safety.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  c.hidden = get<std::size_t>(j, "nets", "hidden");
  c.head_units = get<std::size_t>(j, "nets", "head_units");
  require(c.hidden >= 1 && c.head_units >= 1, "nets.hidden", "and nets.head_units must be >= 1");
  c.actor_lr = get<Real>(j, "optim", "actor_lr");
  c.reward_lr = get<Real>(j, "optim", "reward_lr");
  c.cost_lr = get<Real>(j, "optim", "cost_lr");
  c.sdm_lr = get<Real>(j, "optim", "sdm_lr");
  c.clip_norm = get<Real>(j, "optim", "clip_norm");
  c.batch = get<int>(j, "optim", "batch");
  require(c.actor_lr > 0 && c.reward_lr > 0 && c.cost_lr > 0 && c.sdm_lr > 0, "optim.*_lr", "must be > 0");
  require(c.batch >= 1, "optim.batch", "must be >= 1");
  const auto sb = get<std::string>(j, "optim", "solve_backward");
  require(sb == "analytic" || sb == "finite-difference", "optim.solve_backward", "must be analytic or finite-difference");
  c.solve_backward = sb == "analytic" ? SolveBackward::kAnalytic : SolveBackward::kFiniteDifference;

  c.eval.episodes = get<int>(j, "eval", "episodes");
  require(c.eval.episodes >= 1, "eval.episodes", "must be >= 1");
  c.eval.levels.clear();
  for (const auto& l : j["eval"]["levels"]) c.eval.levels.push_back(parse_enum(parse_level, l.get<std::string>(), "eval.levels"));
  require(!c.eval.levels.empty(), "eval.levels", "must not be empty");
  c.eval.greedy = get<bool>(j, "eval", "greedy");

  c.dyn.models.clear();
  for (const auto& m : j["dyn"]["models"]) c.dyn.models.push_back(parse_enum(parse_dyn_model, m.get<std::string>(), "dyn.models"));
  require(!c.dyn.models.empty(), "dyn.models", "must not be empty");
  c.dyn.train_transitions = get<int>(j, "dyn", "train_transitions");
  c.dyn.test_transitions = get<int>(j, "dyn", "test_transitions");
  c.dyn.epochs = get<int>(j, "dyn", "epochs");
  c.dyn.batch = get<int>(j, "dyn", "batch");
  c.dyn.lr = get<Real>(j, "dyn", "lr");
  c.dyn.horizon = get<int>(j, "dyn", "horizon");
  c.dyn.explore = get<Real>(j, "dyn", "explore");
  c.dyn.episode_cap = get<int>(j, "dyn", "episode_cap");
  require(c.dyn.episode_cap >= 1, "dyn.episode_cap", "must be >= 1");
  require(c.dyn.train_transitions >= 1 && c.dyn.test_transitions >= 1, "dyn.*_transitions", "must be >= 1");
  require(c.dyn.epochs >= 0 && c.dyn.batch >= 1 && c.dyn.lr > 0 && c.dyn.horizon >= 1, "dyn", "has an out-of-range value");
  require(c.dyn.explore >= 0 && c.dyn.explore <= 1, "dyn.explore", "must lie in [0,1]");

  c.checkpoint_every = get<int>(j, "", "checkpoint_every");
  require(c.checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
  c.dump_obs = get<bool>(j, "", "dump_obs");
  c.out_dir = get<std::string>(j, "", "out_dir");
  c.run_id = get<std::string>(j, "", "run_id");
  return c;
}

inline Config load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  Json j;
  try {
    j = Json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

// Applies key=value with a dotted key; the value is parsed as JSON when
// possible and taken as a string otherwise.
[[nodiscard]] inline Config apply_override(const Config& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  Json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest = rest.substr(p + 1)) parts.push_back(rest.substr(0, p));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  Json full = to_json(c);
  detail::merge_strict(full, patch, "");
  return from_json(full);
}

inline std::string default_run_id(const Config& c, std::uint64_t seed) {
  if (!c.run_id.empty()) return c.seeds.size() > 1 ? c.run_id + "-s" + std::to_string(seed) : c.run_id;
  std::string id = c.env.name + "-" + to_string(c.level) + "-" + to_string(c.adv);
  if (c.constraint == Constraint::kLagrangian) id += "-lagrangian";
  if (safety_in_training(c.safety_mode)) id += "-safety";
  return id + "-s" + std::to_string(seed);
}

}  // namespace cade
