// Execution-time safety layer: screens the policy's action with imagined
// rollouts through the dynamics model and cost estimator, and overrides it
// when every rollout from it is predicted unsafe.
#pragma once

#include <limits>
#include <stdexcept>
#include <string>

#include "cade/focops.hpp"

namespace cade {

enum class SafetyMode { kOff, kTrain, kInfer, kBoth };

inline std::string to_string(SafetyMode m) {
  switch (m) {
    case SafetyMode::kOff: return "off";
    case SafetyMode::kTrain: return "train";
    case SafetyMode::kInfer: return "infer";
    case SafetyMode::kBoth: return "both";
  }
  return "?";
}

inline SafetyMode parse_safety_mode(const std::string& s) {
  for (auto m : {SafetyMode::kOff, SafetyMode::kTrain, SafetyMode::kInfer, SafetyMode::kBoth}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown safety-layer mode '" + s + "' (expected off, train, infer, both)");
}

inline bool safety_in_training(SafetyMode m) { return m == SafetyMode::kTrain || m == SafetyMode::kBoth; }
inline bool safety_in_inference(SafetyMode m) { return m == SafetyMode::kInfer || m == SafetyMode::kBoth; }

struct SafetyConfig {
  int samples = 10;
  int horizon = 1;
  Real threshold = 1.0;
  Real activation_fraction = 1.0 / 3.0;
  bool enabled = true;

  void validate() const {
    if (samples < 1) throw std::invalid_argument("safety.samples must be >= 1");
    if (horizon < 1) throw std::invalid_argument("safety.horizon must be >= 1");
    if (!(threshold > 0.0)) throw std::invalid_argument("safety.threshold must be > 0");
    if (!(activation_fraction >= 0.0 && activation_fraction <= 1.0)) {
      throw std::invalid_argument("safety.activation_fraction must lie in [0,1]");
    }
  }
};

struct ScreenResult {
  Action action;
  Real log_prob = 0.0;
  bool overridden = false;
  Real proposed_cost = 0.0;  // cheapest imagined cost from the proposed action
  Real chosen_cost = 0.0;
};

// logits/hidden: the policy state that produced `proposed`. Undiscounted
// cumulative cost over the horizon. When every proposed rollout reaches the
// threshold, N rollouts with policy-sampled first actions are drawn and the
// cheapest (lowest index on ties) replaces the proposal unless it is more
// expensive than the proposal.
inline ScreenResult screen_action(const ImaginationModels& models, const PatchGrid& obs, const SampledAction& proposed,
                                  const Tensor& logits, const Tensor& hidden, const ActionSpace& space,
                                  const SafetyConfig& cfg, Rng& rng) {
  cfg.validate();
  ScreenResult res;
  res.action = proposed.action;
  res.log_prob = proposed.log_prob;
  if (!cfg.enabled) return res;
  Real best_proposed = std::numeric_limits<Real>::infinity();
  bool all_unsafe = true;
  for (int i = 0; i < cfg.samples; ++i) {
    const Real c = imagined_cost(models, obs, proposed.action, hidden, cfg.horizon, 1.0, rng);
    best_proposed = std::min(best_proposed, c);
    if (c < cfg.threshold) {
      all_unsafe = false;
      break;
    }
    // One-step rollouts are deterministic; one suffices.
    if (cfg.horizon == 1) break;
  }
  res.proposed_cost = best_proposed;
  res.chosen_cost = best_proposed;
  if (!all_unsafe) return res;
  Real best = std::numeric_limits<Real>::infinity();
  Action best_action;
  for (int i = 0; i < cfg.samples; ++i) {
    const auto a = sample_action(logits.values(), space, rng);
    const Real c = imagined_cost(models, obs, a.action, hidden, cfg.horizon, 1.0, rng);
    if (c < best) {
      best = c;
      best_action = a.action;
    }
  }
  if (best > best_proposed) return res;
  res.action = best_action;
  res.log_prob = action_log_prob(branch_log_probs(logits.values(), space), space, best_action);
  res.overridden = true;
  res.chosen_cost = best;
  return res;
}

}  // namespace cade
