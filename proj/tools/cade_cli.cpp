#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cade/dynbench.hpp"
#include "cade/trainer.hpp"

using namespace cade;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config_file;
  std::vector<std::string> sets;
  bool print_config = false;
  std::string env, level, adv, safety, constraint, out_dir, run_id, models, checkpoint;
  std::vector<std::uint64_t> seeds;
  long steps = -1;
};

// File values first, then named flags and --set assignments; a key given two
// different values on the command line is an error.
Config resolve(const Options& o) {
  Config cfg = o.config_file.empty() ? Config{} : load_config_file(o.config_file);
  std::vector<std::pair<std::string, std::string>> assigns;
  auto named = [&](const std::string& key, const std::string& v) {
    if (!v.empty()) assigns.emplace_back(key, v);
  };
  named("env.name", o.env);
  named("env.level", o.level);
  named("adv.estimator", o.adv);
  named("safety.mode", o.safety);
  named("constraint", o.constraint);
  named("out_dir", o.out_dir);
  named("run_id", o.run_id);
  if (o.steps >= 0) assigns.emplace_back("steps", std::to_string(o.steps));
  if (!o.seeds.empty()) {
    Json s = o.seeds;
    assigns.emplace_back("seeds", s.dump());
  }
  if (!o.models.empty()) {
    Json m = Json::array();
    std::stringstream ss(o.models);
    for (std::string item; std::getline(ss, item, ',');) m.push_back(item);
    assigns.emplace_back("dyn.models", m.dump());
  }
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set '" + s + "' must look like key=value");
    assigns.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  std::map<std::string, std::string> seen;
  for (const auto& [k, v] : assigns) {
    const auto [it, fresh] = seen.emplace(k, v);
    if (!fresh && it->second != v) {
      throw ConfigError("conflicting values for '" + k + "': '" + it->second + "' and '" + v + "'");
    }
    cfg = apply_override(cfg, k + "=" + v);
  }
  return cfg;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("-c,--config", o.config_file, "JSON config file");
  app->add_option("--set", o.sets, "override a config key, e.g. --set adv.gamma=0.95")->take_all();
  app->add_flag("--print-config", o.print_config, "print the resolved config and exit");
  app->add_option("--env", o.env, "cliff-circular | planar-river");
  app->add_option("--level", o.level, "easy | medium | hard");
  app->add_option("--adv", o.adv, "mgae | td | gae | gae-rtg | reinforce | vtrace");
  app->add_option("--safety", o.safety, "safety layer: off | train | infer | both");
  app->add_option("--constraint", o.constraint, "none | lagrangian");
  app->add_option("--seed", o.seeds, "seed(s); one run per seed")->take_all();
  app->add_option("--steps", o.steps, "environment step budget");
  app->add_option("--out-dir", o.out_dir, "artifact root");
  app->add_option("--run-id", o.run_id, "run directory name");
}

int run(const std::string& cmd, const Options& o, const Config& cfg) {
  for (std::uint64_t seed : cfg.seeds) {
    if (cmd == "train") {
      const auto r = train_run(cfg, seed, {}, &std::cerr);
      const auto& last = r.metrics.empty() ? IterationMetrics{} : r.metrics.back();
      std::cout << r.dir.string() << " iterations " << r.metrics.size() << " env_steps " << last.env_steps
                << " final_reward " << fmt_real(last.ep_reward) << " final_cost " << fmt_real(last.ep_cost) << '\n';
    } else if (cmd == "eval") {
      const auto ckpt = o.checkpoint.empty()
                            ? std::filesystem::path(cfg.out_dir) / default_run_id(cfg, seed) / "checkpoints" / "final.bin"
                            : std::filesystem::path(o.checkpoint);
      const auto r = eval_run(cfg, seed, ckpt);
      std::cout << r.dir.string() << '\n';
      for (const auto& s : summarize(r.episodes)) {
        std::cout << "  " << to_string(s.level) << " reward " << fmt_real(s.reward_mean) << " +- "
                  << fmt_real(s.reward_std) << " cost " << fmt_real(s.cost_mean) << " +- " << fmt_real(s.cost_std)
                  << " override_rate " << fmt_real(s.override_rate) << '\n';
      }
    } else if (cmd == "dyn-bench") {
      const auto r = run_dyn_bench(cfg, seed);
      const auto dir = write_dyn_bench(cfg, seed, r);
      std::cout << dir.string() << '\n';
      for (const auto& e : r.evals) {
        std::cout << "  " << to_string(e.kind) << " iou@1 " << fmt_real(e.steps.front().iou_mean) << " iou@"
                  << e.steps.back().step << ' ' << fmt_real(e.steps.back().iou_mean) << '\n';
      }
    } else if (cmd == "collect") {
      const auto ds = collect_dataset(cfg.env, cfg.level, cfg.dyn, seed);
      const auto dir = write_dataset(cfg, seed, ds);
      std::cout << dir.string() << " train " << ds.train_size() << " test " << ds.test_size() << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CADE: safe RL with marginal-gain advantages and semantic dynamics models"};
  app.require_subcommand(0, 1);
  Options o;
  app.add_flag("--print-config", o.print_config, "print the default config and exit");
  std::vector<std::pair<std::string, CLI::App*>> subs;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"train", "train one run per seed"},
           {"eval", "evaluate a checkpoint on every configured level"},
           {"dyn-bench", "train and compare dynamics models"},
           {"collect", "collect a transition dataset as PGM frames"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, o);
    subs.emplace_back(name, sub);
  }
  subs[1].second->add_option("--checkpoint", o.checkpoint, "checkpoint (default <out_dir>/<run_id>/checkpoints/final.bin)");
  subs[2].second->add_option("--models", o.models, "comma-separated subset of sdm,sdm-mlp,baseline");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  std::string cmd;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) cmd = name;
  Config cfg;
  try {
    cfg = resolve(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  if (o.print_config) {
    std::cout << to_json(cfg).dump(2) << '\n';
    return 0;
  }
  if (cmd.empty()) {
    std::cout << app.help();
    return kExitConfig;
  }
  try {
    return run(cmd, o, cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << cmd << " failed: " << e.what() << '\n';
    return kExitRuntime;
  }
}
