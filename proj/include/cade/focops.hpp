// Constrained policy update: KL-regularized surrogate with a cost penalty,
// Lagrange multiplier dynamics, trust-region masking, and the cost advantage
// built from imagined next observations.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cade/autograd.hpp"
#include "cade/homography.hpp"
#include "cade/nets.hpp"

namespace cade {

struct LagrangeState {
  Real beta = 0.0;
  Real lr = 0.01;
  Real budget = 1.0;
  Real beta_max = 2.0;
};

// beta <- min(beta_max, max(0, beta - lr (budget - J_C)))
inline LagrangeState lagrange_update(LagrangeState s, Real episodic_cost) {
  if (!(episodic_cost >= 0.0)) throw std::invalid_argument("lagrange_update: episodic cost must be >= 0");
  s.beta = std::min(s.beta_max, std::max(0.0, s.beta - s.lr * (s.budget - episodic_cost)));
  return s;
}

struct TrustRegionConfig {
  Real kl_mask = 0.02;  // per-step KL above which a step is dropped from the loss
  Real kl_stop = 0.02;  // batch KL above which further actor epochs are skipped
  Real alpha = 1.5;     // temperature; the surrogate is scaled by 1/alpha
};

// True stops further actor updates this iteration (strict inequality).
inline bool kl_early_stop(Real batch_kl, Real threshold) {
  if (!(batch_kl >= 0.0)) throw std::invalid_argument("kl_early_stop: KL must be >= 0");
  return batch_kl > threshold;
}

inline Real cost_advantage_transform(Real abar, Real k = 8.0, Real c_b = 0.5) {
  return ag::sigmoid_value(k * (abar - c_b));
}

struct CostAdvantageConfig {
  int horizon = 1;
  Real gamma = 0.99;
  Real k = 8.0;
  Real c_b = 0.5;
};

// Models an imagined rollout needs: next-observation prediction, immediate
// cost, and the policy (trunk + actor) for actions beyond the first.
struct ImaginationModels {
  const CadeNetworks* nets = nullptr;
  std::function<PatchGrid(const PatchGrid&, const Action&)> predict;
  std::function<Real(const PatchGrid&)> cost;
};

inline ImaginationModels default_imagination(const CadeNetworks& nets) {
  ImaginationModels m;
  m.nets = &nets;
  m.predict = [&nets](const PatchGrid& g, const Action& a) { return sdm_predict(g, a, nets.sdm(), nets.actions()); };
  m.cost = [&nets](const PatchGrid& g) { return nets.cost_estimate(g.values); };
  return m;
}

// Sum over h < H of gamma^h C(s'_{t+h+1}) starting from first_action at obs;
// hidden is the trunk state that produced first_action. Later actions are
// sampled from the policy along the imagined trajectory.
inline Real imagined_cost(const ImaginationModels& m, const PatchGrid& obs, const Action& first_action,
                          const Tensor& hidden, int horizon, Real gamma, Rng& rng) {
  if (horizon < 1) throw std::invalid_argument("imagined rollout horizon must be >= 1");
  PatchGrid s = m.predict(obs, first_action);
  Real total = m.cost(s);
  Action prev = first_action;
  Tensor h = hidden;
  Real disc = 1.0;
  for (int step = 1; step < horizon; ++step) {
    if (m.nets == nullptr) throw std::invalid_argument("imagined rollout beyond one step needs the policy networks");
    h = m.nets->trunk_step(s.values, prev, h);
    const auto a = sample_action(m.nets->actor_logits(h).values(), m.nets->actions(), rng);
    s = m.predict(s, a.action);
    disc *= gamma;
    total += disc * m.cost(s);
    prev = a.action;
  }
  return total;
}

inline Real cost_advantage(const ImaginationModels& m, const PatchGrid& obs, const Action& action, const Tensor& hidden,
                           const CostAdvantageConfig& cfg, Rng& rng) {
  return cost_advantage_transform(imagined_cost(m, obs, action, hidden, cfg.horizon, cfg.gamma, rng), cfg.k, cfg.c_b);
}

struct PolicyLossResult {
  Var loss;
  Real mean_kl = 0.0;      // mean per-step KL(pi_theta || pi_k) over all steps
  std::size_t masked = 0;  // steps dropped by the KL mask
};

// Per step: KL_t - (1/alpha) * ratio_t * (A_R - beta A_C), averaged over the
// steps whose KL_t does not exceed the mask threshold. log_probs [T, onehot]
// are branch log-softmax outputs of the current policy, old_log_probs the
// frozen snapshot's rows recorded at rollout.
inline PolicyLossResult policy_loss(Var log_probs, const Tensor& old_log_probs, const std::vector<Action>& actions,
                                    std::span<const Real> adv_reward, std::span<const Real> adv_cost, Real beta,
                                    const TrustRegionConfig& cfg, const ActionSpace& space) {
  auto& t = ag::detail::tape_of("policy_loss", log_probs);
  const std::size_t T = actions.size();
  if (old_log_probs.size() == 0) throw std::invalid_argument("policy_loss: missing behavior log-probabilities");
  if (!old_log_probs.same_shape(log_probs.value()) || log_probs.rows() != T) {
    throw std::invalid_argument("policy_loss: log-prob rows " + log_probs.value().shape_str() + ", behavior " +
                                old_log_probs.shape_str() + ", " + std::to_string(T) + " actions");
  }
  if (adv_reward.size() != T || adv_cost.size() != T) throw std::invalid_argument("policy_loss: advantage length mismatch");
  const std::size_t A = old_log_probs.cols();
  Tensor onehot(T, A);
  for (std::size_t i = 0; i < T; ++i) {
    const auto oh = space.onehot(actions[i]);
    for (std::size_t k = 0; k < A; ++k) onehot(i, k) = oh[k];
  }
  auto probs = ag::exp(log_probs);
  auto kl = ag::sum_cols(ag::mul(probs, ag::sub(log_probs, t.constant(old_log_probs))));  // [T,1]
  auto logp_a = ag::sum_cols(ag::mul(log_probs, t.constant(onehot)));
  Tensor old_a(T, 1);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t k = 0; k < A; ++k) old_a[i] += old_log_probs(i, k) * onehot(i, k);
  auto ratio = ag::exp(ag::sub(logp_a, t.constant(old_a)));
  Tensor weight(T, 1), mask(T, 1);
  PolicyLossResult res;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < T; ++i) {
    const Real kli = kl.value()[i];
    res.mean_kl += kli;
    if (kli > cfg.kl_mask) {
      ++res.masked;
      continue;
    }
    mask[i] = 1.0;
    weight[i] = (adv_reward[i] - beta * adv_cost[i]) / cfg.alpha;
    ++kept;
  }
  res.mean_kl /= static_cast<Real>(std::max<std::size_t>(T, 1));
  auto per_step = ag::sub(ag::mul(kl, t.constant(mask)), ag::mul(ratio, t.constant(weight)));
  res.loss = ag::scale(ag::sum(per_step), kept ? 1.0 / static_cast<Real>(kept) : 0.0);
  return res;
}

// Closed-form mean KL(new || old) between rows of branch log-probabilities.
inline Real mean_kl(const Tensor& new_log_probs, const Tensor& old_log_probs) {
  if (!new_log_probs.same_shape(old_log_probs)) throw std::invalid_argument("mean_kl: shape mismatch");
  Real s = 0.0;
  for (std::size_t i = 0; i < new_log_probs.size(); ++i) {
    s += std::exp(new_log_probs[i]) * (new_log_probs[i] - old_log_probs[i]);
  }
  // Clamp round-off below zero.
  return new_log_probs.rows() ? std::max(0.0, s / static_cast<Real>(new_log_probs.rows())) : 0.0;
}

}  // namespace cade
