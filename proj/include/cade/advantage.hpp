// Reward-advantage estimators: marginal-gain (trajectory-wise, windowed
// baseline), TD, GAE, REINFORCE with baseline, and V-trace.
#pragma once

#include <cmath>
#include <deque>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cade/autograd.hpp"

namespace cade {

using ag::Real;

enum class AdvEstimator { kMgae, kTd, kGae, kGaeRtg, kReinforce, kVtrace };

inline std::string to_string(AdvEstimator e) {
  switch (e) {
    case AdvEstimator::kMgae: return "mgae";
    case AdvEstimator::kTd: return "td";
    case AdvEstimator::kGae: return "gae";
    case AdvEstimator::kGaeRtg: return "gae-rtg";
    case AdvEstimator::kReinforce: return "reinforce";
    case AdvEstimator::kVtrace: return "vtrace";
  }
  return "?";
}

inline AdvEstimator parse_adv(const std::string& s) {
  for (auto e : {AdvEstimator::kMgae, AdvEstimator::kTd, AdvEstimator::kGae, AdvEstimator::kGaeRtg,
                 AdvEstimator::kReinforce, AdvEstimator::kVtrace}) {
    if (to_string(e) == s) return e;
  }
  throw std::invalid_argument("unknown advantage estimator '" + s +
                              "' (expected mgae, td, gae, gae-rtg, reinforce, vtrace)");
}

// Estimators other than MGAE learn a state-value critic.
inline bool uses_critic(AdvEstimator e) { return e != AdvEstimator::kMgae; }

// Sliding window of the last W completed-episode returns.
class ReturnWindow {
 public:
  explicit ReturnWindow(std::size_t capacity = 10) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReturnWindow capacity must be >= 1");
  }

  void push(Real ret) {
    buf_.push_back(ret);
    if (buf_.size() > capacity_) buf_.pop_front();
  }
  // 0 until the first episode completes.
  Real mean() const {
    if (buf_.empty()) return 0.0;
    return std::accumulate(buf_.begin(), buf_.end(), 0.0) / static_cast<Real>(buf_.size());
  }
  std::size_t size() const { return buf_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<Real>& values() const { return buf_; }

 private:
  std::size_t capacity_;
  std::deque<Real> buf_;
};

enum class MgaeMode {
  kInclusive,  // estimated rewards summed over i <= j
  kExclusive,  // i < j
};

// A_j = sum_{k>=j} r_k + sum_{i<=j} r_hat_i - baseline (inclusive mode).
inline std::vector<Real> mgae(std::span<const Real> rewards, std::span<const Real> estimated, Real baseline,
                              MgaeMode mode = MgaeMode::kInclusive) {
  if (rewards.size() != estimated.size()) {
    throw std::invalid_argument("mgae: " + std::to_string(rewards.size()) + " rewards vs " +
                                std::to_string(estimated.size()) + " estimates");
  }
  const std::size_t T = rewards.size();
  std::vector<Real> fwd(T + 1, 0.0);
  for (std::size_t k = T; k-- > 0;) fwd[k] = fwd[k + 1] + rewards[k];
  std::vector<Real> adv(T);
  Real back = 0.0;
  for (std::size_t j = 0; j < T; ++j) {
    if (mode == MgaeMode::kInclusive) back += estimated[j];
    adv[j] = fwd[j] + back - baseline;
    if (mode == MgaeMode::kExclusive) back += estimated[j];
  }
  return adv;
}

namespace detail {

inline void check_values(std::string_view op, std::span<const Real> rewards, std::span<const Real> values) {
  if (values.size() != rewards.size() + 1) {
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(rewards.size() + 1) +
                                " values (one bootstrap), got " + std::to_string(values.size()));
  }
}

}  // namespace detail

// values has T+1 entries; values[T] is the bootstrap (0 after a true terminal).
inline std::vector<Real> td(std::span<const Real> rewards, std::span<const Real> values, Real gamma) {
  detail::check_values("td", rewards, values);
  std::vector<Real> adv(rewards.size());
  for (std::size_t t = 0; t < rewards.size(); ++t) adv[t] = rewards[t] + gamma * values[t + 1] - values[t];
  return adv;
}

inline std::vector<Real> gae(std::span<const Real> rewards, std::span<const Real> values, Real gamma, Real lambda) {
  detail::check_values("gae", rewards, values);
  const std::size_t T = rewards.size();
  std::vector<Real> adv(T);
  Real acc = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const Real delta = rewards[t] + gamma * values[t + 1] - values[t];
    acc = delta + gamma * lambda * acc;
    adv[t] = acc;
  }
  return adv;
}

// Discounted return-to-go, bootstrapped from `bootstrap` after the last step.
inline std::vector<Real> returns_to_go(std::span<const Real> rewards, Real gamma, Real bootstrap = 0.0) {
  std::vector<Real> g(rewards.size());
  Real acc = bootstrap;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

inline std::vector<Real> reinforce_baseline(std::span<const Real> rewards, std::span<const Real> values, Real gamma) {
  detail::check_values("reinforce", rewards, values);
  auto g = returns_to_go(rewards, gamma, values.back());
  for (std::size_t t = 0; t < g.size(); ++t) g[t] -= values[t];
  return g;
}

struct VtraceResult {
  std::vector<Real> advantages;  // rho_s (r_s + gamma v_{s+1} - V_s)
  std::vector<Real> targets;     // v_s
};

// Clipped importance weights rho = min(rho_clip, pi/mu), c = min(c_clip, pi/mu).
inline VtraceResult vtrace(std::span<const Real> rewards, std::span<const Real> values, Real gamma,
                           std::span<const Real> log_pi, std::span<const Real> log_mu, Real rho_clip = 1.0,
                           Real c_clip = 1.0) {
  detail::check_values("vtrace", rewards, values);
  const std::size_t T = rewards.size();
  if (log_pi.size() != T || log_mu.size() != T) {
    throw std::invalid_argument("vtrace: log-probabilities must have one entry per step");
  }
  std::vector<Real> rho(T), c(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Real ratio = std::exp(log_pi[t] - log_mu[t]);
    rho[t] = std::min(rho_clip, ratio);
    c[t] = std::min(c_clip, ratio);
  }
  VtraceResult out;
  out.targets.assign(T + 1, 0.0);
  out.targets[T] = values[T];
  Real acc = 0.0;  // v_{s+1} - V_{s+1}
  for (std::size_t s = T; s-- > 0;) {
    const Real delta = rho[s] * (rewards[s] + gamma * values[s + 1] - values[s]);
    acc = delta + gamma * c[s] * acc;
    out.targets[s] = values[s] + acc;
  }
  out.advantages.resize(T);
  for (std::size_t s = 0; s < T; ++s) {
    out.advantages[s] = rho[s] * (rewards[s] + gamma * out.targets[s + 1] - values[s]);
  }
  out.targets.pop_back();
  return out;
}

// Zero mean, unit population variance; single entries pass through.
inline std::vector<Real> normalize(std::span<const Real> x, Real eps = 1e-8) {
  std::vector<Real> out(x.begin(), x.end());
  if (out.size() < 2) return out;
  const Real n = static_cast<Real>(out.size());
  const Real mean = std::accumulate(out.begin(), out.end(), 0.0) / n;
  Real var = 0.0;
  for (Real v : out) var += (v - mean) * (v - mean);
  var /= n;
  const Real sd = std::sqrt(var) + eps;
  for (auto& v : out) v = (v - mean) / sd;
  return out;
}

struct AdvantageInputs {
  std::span<const Real> rewards;
  std::span<const Real> estimated;  // MGAE
  std::span<const Real> values;     // critic methods, T+1 entries
  std::span<const Real> log_pi;     // V-trace
  std::span<const Real> log_mu;
  Real baseline = 0.0;
  Real gamma = 0.99;
  Real lambda = 0.95;
  MgaeMode mgae_mode = MgaeMode::kInclusive;
};

struct AdvantageOutput {
  std::vector<Real> advantages;
  std::vector<Real> critic_targets;  // empty for MGAE
};

// Advantages plus the regression target each critic method trains V toward:
// TD r + gamma V', GAE A + V, GAE-RTG and REINFORCE discounted returns, V-trace v_s.
inline AdvantageOutput estimate_advantages(AdvEstimator e, const AdvantageInputs& in) {
  AdvantageOutput out;
  const std::size_t T = in.rewards.size();
  switch (e) {
    case AdvEstimator::kMgae:
      out.advantages = mgae(in.rewards, in.estimated, in.baseline, in.mgae_mode);
      return out;
    case AdvEstimator::kTd:
      out.advantages = td(in.rewards, in.values, in.gamma);
      out.critic_targets.resize(T);
      for (std::size_t t = 0; t < T; ++t) out.critic_targets[t] = in.rewards[t] + in.gamma * in.values[t + 1];
      return out;
    case AdvEstimator::kGae:
      out.advantages = gae(in.rewards, in.values, in.gamma, in.lambda);
      out.critic_targets.resize(T);
      for (std::size_t t = 0; t < T; ++t) out.critic_targets[t] = out.advantages[t] + in.values[t];
      return out;
    case AdvEstimator::kGaeRtg:
      out.advantages = gae(in.rewards, in.values, in.gamma, in.lambda);
      out.critic_targets = returns_to_go(in.rewards, in.gamma, in.values.back());
      return out;
    case AdvEstimator::kReinforce:
      out.advantages = reinforce_baseline(in.rewards, in.values, in.gamma);
      out.critic_targets = returns_to_go(in.rewards, in.gamma, in.values.back());
      return out;
    case AdvEstimator::kVtrace: {
      auto v = vtrace(in.rewards, in.values, in.gamma, in.log_pi, in.log_mu);
      out.advantages = std::move(v.advantages);
      out.critic_targets = std::move(v.targets);
      return out;
    }
  }
  throw std::logic_error("unhandled estimator");
}

}  // namespace cade
