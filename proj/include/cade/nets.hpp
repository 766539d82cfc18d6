// The trainable networks: GRU trunk shared by actor and reward estimator, the
// actor / reward / cost heads, the dynamics-model MLP, and Adam.
#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cade/autograd.hpp"
#include "cade/rng.hpp"

namespace cade {

using ag::Parameter;
using ag::Real;
using ag::Tape;
using ag::Tensor;
using ag::Var;

struct Action {
  std::vector<int> branch;

  bool operator==(const Action&) const = default;
};

// Discrete(n) is a single branch; MultiDiscrete [3,3,3,3] is four branches.
class ActionSpace {
 public:
  ActionSpace() = default;
  explicit ActionSpace(std::vector<int> branches) : branches_(std::move(branches)) {
    if (branches_.empty()) throw std::invalid_argument("ActionSpace: no branches");
    for (int b : branches_) {
      if (b < 1) throw std::invalid_argument("ActionSpace: branch size must be >= 1");
    }
  }

  const std::vector<int>& branches() const { return branches_; }
  int onehot_dim() const { return std::accumulate(branches_.begin(), branches_.end(), 0); }
  int joint_count() const {
    int n = 1;
    for (int b : branches_) n *= b;
    return n;
  }

  void validate(const Action& a) const {
    if (a.branch.size() != branches_.size()) {
      throw std::out_of_range("action has " + std::to_string(a.branch.size()) +
                              " branches, space has " + std::to_string(branches_.size()));
    }
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      if (a.branch[i] < 0 || a.branch[i] >= branches_[i]) {
        throw std::out_of_range("action branch " + std::to_string(i) + " value " +
                                std::to_string(a.branch[i]) + " outside [0," +
                                std::to_string(branches_[i]) + ")");
      }
    }
  }

  // Mixed-radix index, first branch most significant.
  int encode(const Action& a) const {
    validate(a);
    int idx = 0;
    for (std::size_t i = 0; i < branches_.size(); ++i) idx = idx * branches_[i] + a.branch[i];
    return idx;
  }
  Action decode(int idx) const {
    if (idx < 0 || idx >= joint_count()) throw std::out_of_range("joint action index out of range");
    Action a;
    a.branch.resize(branches_.size());
    for (std::size_t i = branches_.size(); i-- > 0;) {
      a.branch[i] = idx % branches_[i];
      idx /= branches_[i];
    }
    return a;
  }

  // Concatenated per-branch one-hot; the zero vector when `a` is empty.
  std::vector<Real> onehot(const Action& a) const {
    std::vector<Real> v(static_cast<std::size_t>(onehot_dim()), 0.0);
    if (a.branch.empty()) return v;
    validate(a);
    std::size_t off = 0;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      v[off + static_cast<std::size_t>(a.branch[i])] = 1.0;
      off += static_cast<std::size_t>(branches_[i]);
    }
    return v;
  }

  std::string to_string(const Action& a) const {
    std::string s;
    for (std::size_t i = 0; i < a.branch.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(a.branch[i]);
    }
    return s;
  }

 private:
  std::vector<int> branches_;
};

// Orthogonal initialization: a Gaussian matrix whose shorter dimension is
// orthonormalized (entries then scale as 1/sqrt(fan-in) for in >= out).
inline Tensor orthogonal_init(std::size_t in, std::size_t out, Real gain, Rng& rng) {
  Tensor w(in, out);
  const bool cols_orth = in >= out;
  const std::size_t nvec = cols_orth ? out : in;
  const std::size_t len = cols_orth ? in : out;
  std::vector<std::vector<Real>> vecs(nvec, std::vector<Real>(len));
  for (auto& v : vecs)
    for (auto& x : v) x = rng.normal();
  for (std::size_t i = 0; i < nvec; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      Real d = 0.0;
      for (std::size_t k = 0; k < len; ++k) d += vecs[i][k] * vecs[j][k];
      for (std::size_t k = 0; k < len; ++k) vecs[i][k] -= d * vecs[j][k];
    }
    Real nrm = 0.0;
    for (Real x : vecs[i]) nrm += x * x;
    nrm = std::sqrt(nrm);
    for (auto& x : vecs[i]) x /= nrm;
  }
  for (std::size_t i = 0; i < nvec; ++i) {
    for (std::size_t k = 0; k < len; ++k) {
      if (cols_orth) {
        w(k, i) = gain * vecs[i][k];
      } else {
        w(i, k) = gain * vecs[i][k];
      }
    }
  }
  return w;
}

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Real gain, Rng& rng)
      : weight_(name + ".weight", orthogonal_init(in, out, gain, rng)),
        bias_(name + ".bias", Tensor(1, out)) {}

  // x [B,in] -> [B,out]
  Var forward(Tape& t, Var x) const {
    if (x.cols() != weight_.value.rows()) {
      throw ag::Error("linear '" + weight_.name + "': input " + x.value().shape_str() +
                      " vs weight " + weight_.value.shape_str());
    }
    return ag::add(ag::matmul(x, t.parameter(weight_)), t.parameter(bias_));
  }

  std::size_t in_dim() const { return weight_.value.rows(); }
  std::size_t out_dim() const { return weight_.value.cols(); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Parameter weight_;
  Parameter bias_;
};

enum class OutputActivation { kNone, kSigmoid };

// tanh MLP; the last layer is linear (or sigmoid).
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden,
      std::size_t out, Real out_gain, Rng& rng, OutputActivation act = OutputActivation::kNone)
      : act_(act) {
    std::size_t prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers_.emplace_back(name + "." + std::to_string(i), prev, hidden[i], 1.0, rng);
      prev = hidden[i];
    }
    layers_.emplace_back(name + "." + std::to_string(hidden.size()), prev, out, out_gain, rng);
  }

  Var forward(Tape& t, Var x) const {
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) x = ag::tanh(layers_[i].forward(t, x));
    x = layers_.back().forward(t, x);
    return act_ == OutputActivation::kSigmoid ? ag::sigmoid(x) : x;
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) l.collect(out);
    return out;
  }
  std::vector<Linear>& layers() { return layers_; }

 private:
  std::vector<Linear> layers_;
  OutputActivation act_ = OutputActivation::kNone;
};

class Gru {
 public:
  Gru() = default;
  Gru(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng) : hidden_(hidden) {
    Tensor wih(in, 3 * hidden), whh(hidden, 3 * hidden);
    for (int g = 0; g < 3; ++g) {
      const auto a = orthogonal_init(in, hidden, 1.0, rng);
      const auto b = orthogonal_init(hidden, hidden, 1.0, rng);
      for (std::size_t i = 0; i < in; ++i)
        for (std::size_t j = 0; j < hidden; ++j) wih(i, g * hidden + j) = a(i, j);
      for (std::size_t i = 0; i < hidden; ++i)
        for (std::size_t j = 0; j < hidden; ++j) whh(i, g * hidden + j) = b(i, j);
    }
    w_ih_ = Parameter(name + ".w_ih", std::move(wih));
    w_hh_ = Parameter(name + ".w_hh", std::move(whh));
    b_ih_ = Parameter(name + ".b_ih", Tensor(1, 3 * hidden));
    b_hh_ = Parameter(name + ".b_hh", Tensor(1, 3 * hidden));
  }

  std::size_t hidden() const { return hidden_; }
  std::size_t in_dim() const { return w_ih_.value.rows(); }

  // One step: x [1,in], h [1,H] -> [1,H].
  Var step(Tape& t, Var x, Var h) const {
    auto gi = ag::add(ag::matmul(x, t.parameter(w_ih_)), t.parameter(b_ih_));
    auto gh = ag::add(ag::matmul(h, t.parameter(w_hh_)), t.parameter(b_hh_));
    return ag::gru_cell(gi, gh, h);
  }

  // Unrolls over inputs [T,in] from h0 [1,H]; returns the T hidden states
  // stacked as [T,H]. Bitwise identical to T calls of step().
  Var unroll(Tape& t, Var inputs, Var h0) const {
    if (inputs.cols() != in_dim()) {
      throw ag::Error("gru: input " + inputs.value().shape_str() + " expects " +
                      std::to_string(in_dim()) + " columns");
    }
    auto gi_all = ag::add(ag::matmul(inputs, t.parameter(w_ih_)), t.parameter(b_ih_));
    auto whh = t.parameter(w_hh_);
    auto bhh = t.parameter(b_hh_);
    std::vector<Var> hs;
    hs.reserve(inputs.rows());
    Var h = h0;
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
      auto gh = ag::add(ag::matmul(h, whh), bhh);
      h = ag::gru_cell(ag::row(gi_all, i), gh, h);
      hs.push_back(h);
    }
    return ag::concat_rows(hs);
  }

  std::vector<Parameter*> params() { return {&w_ih_, &w_hh_, &b_ih_, &b_hh_}; }

 private:
  std::size_t hidden_ = 0;
  Parameter w_ih_, w_hh_, b_ih_, b_hh_;
};

struct AdamOptions {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real clip_norm = 10.0;  // global-norm clipping; <= 0 disables
};

struct AdamState {
  AdamOptions options;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

inline Real global_grad_norm(std::span<Parameter* const> params) {
  Real s = 0.0;
  for (const auto* p : params)
    for (Real g : p->grad.values()) s += g * g;
  return std::sqrt(s);
}

// One bias-corrected Adam update from the parameters' accumulated gradients.
// Gradients are left in place; callers zero them.
inline void adam_step(std::span<Parameter* const> params, AdamState& state) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.rows(), p->value.cols());
      state.v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (!p->grad.same_shape(p->value) || !state.m[i].same_shape(p->value)) {
      throw std::invalid_argument("adam_step: shape mismatch for '" + p->name + "' value " +
                                  p->value.shape_str() + " grad " + p->grad.shape_str() +
                                  " moment " + state.m[i].shape_str());
    }
    if (!p->grad.all_finite()) throw ag::Error("adam_step: non-finite gradient in '" + p->name + "'");
  }
  const auto& o = state.options;
  Real clip = 1.0;
  if (o.clip_norm > 0) {
    const Real n = global_grad_norm(params);
    if (n > o.clip_norm) clip = o.clip_norm / n;
  }
  ++state.step;
  const Real bc1 = 1.0 - std::pow(o.beta1, static_cast<Real>(state.step));
  const Real bc2 = 1.0 - std::pow(o.beta2, static_cast<Real>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const Real g = p->grad[k] * clip;
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g;
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g * g;
      const Real mhat = m[k] / bc1;
      const Real vhat = v[k] / bc2;
      p->value[k] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

inline void zero_grads(std::span<Parameter* const> params) {
  for (auto* p : params) p->zero_grad();
}

// Mean squared error. pred and target must have identical shapes.
inline Var mse_loss(Var pred, const Tensor& target) {
  if (target.size() == 0) throw ag::Error("mse_loss: empty sequences");
  if (!pred.value().same_shape(target)) {
    throw ag::Error("mse_loss: shape mismatch " + pred.value().shape_str() + " vs " +
                    target.shape_str());
  }
  auto d = ag::sub(pred, pred.tape()->constant(target));
  return ag::mean(ag::mul(d, d));
}

inline Real mse_loss(std::span<const Real> pred, std::span<const Real> target) {
  if (pred.empty() || target.empty()) throw ag::Error("mse_loss: empty sequences");
  if (pred.size() != target.size()) throw ag::Error("mse_loss: length mismatch");
  Real s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<Real>(pred.size());
}

struct SampledAction {
  Action action;
  Real log_prob = 0.0;
};

// Per-branch log-probabilities of one row of logits.
inline std::vector<Real> branch_log_probs(std::span<const Real> logits, const ActionSpace& space) {
  Tape t(false);
  Tensor row(1, logits.size(), std::vector<Real>(logits.begin(), logits.end()));
  return ag::log_softmax_branches(t.constant(std::move(row)), space.branches()).value().vec();
}

inline Real action_log_prob(std::span<const Real> log_probs, const ActionSpace& space,
                            const Action& a) {
  space.validate(a);
  Real lp = 0.0;
  std::size_t off = 0;
  for (std::size_t i = 0; i < space.branches().size(); ++i) {
    lp += log_probs[off + static_cast<std::size_t>(a.branch[i])];
    off += static_cast<std::size_t>(space.branches()[i]);
  }
  return lp;
}

// Independent categorical draw per branch; log_prob is the branch sum.
inline SampledAction sample_action(std::span<const Real> logits, const ActionSpace& space,
                                   Rng& rng) {
  if (logits.size() != static_cast<std::size_t>(space.onehot_dim())) {
    throw ag::Error("sample_action: logits size mismatch");
  }
  for (Real x : logits) {
    if (!std::isfinite(x)) throw ag::Error("sample_action: non-finite logits");
  }
  const auto lp = branch_log_probs(logits, space);
  SampledAction out;
  std::size_t off = 0;
  for (int b : space.branches()) {
    std::vector<Real> probs(static_cast<std::size_t>(b));
    for (int j = 0; j < b; ++j) probs[static_cast<std::size_t>(j)] = std::exp(lp[off + static_cast<std::size_t>(j)]);
    const auto k = rng.categorical(probs);
    out.action.branch.push_back(static_cast<int>(k));
    out.log_prob += lp[off + k];
    off += static_cast<std::size_t>(b);
  }
  return out;
}

inline SampledAction greedy_action(std::span<const Real> logits, const ActionSpace& space) {
  const auto lp = branch_log_probs(logits, space);
  SampledAction out;
  std::size_t off = 0;
  for (int b : space.branches()) {
    std::size_t best = 0;
    for (int j = 1; j < b; ++j) {
      if (lp[off + static_cast<std::size_t>(j)] > lp[off + best]) best = static_cast<std::size_t>(j);
    }
    out.action.branch.push_back(static_cast<int>(best));
    out.log_prob += lp[off + best];
    off += static_cast<std::size_t>(b);
  }
  return out;
}

struct NetConfig {
  std::size_t obs_dim = 25;
  ActionSpace actions{std::vector<int>{5}};
  std::size_t hidden = 128;
  std::size_t head_units = 64;
  // true: reward head sees (hidden, action one-hot) and regresses immediate
  // rewards; false: it sees the hidden state only and acts as a value critic.
  bool reward_takes_action = true;
  Real actor_out_gain = 0.01;
  Real sdm_out_gain = 0.01;
};

// Actor, estimators and dynamics model. Parameter names are prefixed with
// the head name: trunk, actor, reward, cost, sdm.
class CadeNetworks {
 public:
  CadeNetworks() = default;
  CadeNetworks(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    const auto a = static_cast<std::size_t>(cfg.actions.onehot_dim());
    const std::vector<std::size_t> hid{cfg.head_units, cfg.head_units};
    trunk_ = Gru("trunk", cfg.obs_dim + a, cfg.hidden, rng);
    actor_ = Mlp("actor", cfg.hidden, hid, a, cfg.actor_out_gain, rng);
    reward_ = Mlp("reward", cfg.hidden + (cfg.reward_takes_action ? a : 0), hid, 1, 1.0, rng);
    cost_ = Mlp("cost", cfg.obs_dim, hid, 1, 1.0, rng, OutputActivation::kSigmoid);
    sdm_ = Mlp("sdm", cfg.obs_dim + a, hid, 8, cfg.sdm_out_gain, rng);
  }

  const NetConfig& config() const { return cfg_; }
  const ActionSpace& actions() const { return cfg_.actions; }

  const Gru& trunk() const { return trunk_; }
  const Mlp& actor() const { return actor_; }
  const Mlp& reward() const { return reward_; }
  const Mlp& cost() const { return cost_; }
  const Mlp& sdm() const { return sdm_; }
  Gru& trunk() { return trunk_; }
  Mlp& actor() { return actor_; }
  Mlp& reward() { return reward_; }
  Mlp& cost() { return cost_; }
  Mlp& sdm() { return sdm_; }

  std::vector<Parameter*> policy_params() {
    auto p = trunk_.params();
    for (auto* q : actor_.params()) p.push_back(q);
    return p;
  }
  std::vector<Parameter*> all_params() {
    auto p = policy_params();
    for (auto* m : {&reward_, &cost_, &sdm_})
      for (auto* q : m->params()) p.push_back(q);
    return p;
  }

  // Trunk input row: flattened observation followed by the previous action's
  // one-hot (all zeros at t = 0).
  Tensor trunk_input(std::span<const Real> obs, const Action& prev) const {
    if (obs.size() != cfg_.obs_dim) {
      throw ag::Error("trunk input: observation has " + std::to_string(obs.size()) +
                      " cells, network expects " + std::to_string(cfg_.obs_dim));
    }
    std::vector<Real> v(obs.begin(), obs.end());
    const auto oh = cfg_.actions.onehot(prev);
    v.insert(v.end(), oh.begin(), oh.end());
    return Tensor::row(std::move(v));
  }

  Tensor zero_hidden() const { return Tensor(1, cfg_.hidden); }

  Tensor trunk_step(std::span<const Real> obs, const Action& prev, const Tensor& h) const {
    Tape t(false);
    return trunk_.step(t, t.constant(trunk_input(obs, prev)), t.constant(h)).value();
  }

  Tensor actor_logits(const Tensor& h) const {
    Tape t(false);
    return actor_.forward(t, t.constant(h)).value();
  }

  Real reward_estimate(const Tensor& h, const Action& a) const {
    Tape t(false);
    return reward_.forward(t, t.constant(reward_input(h, a))).value().item();
  }

  Real cost_estimate(std::span<const Real> obs) const {
    Tape t(false);
    return cost_.forward(t, t.constant(Tensor::row({obs.begin(), obs.end()}))).value().item();
  }

  Tensor reward_input(const Tensor& h, const Action& a) const {
    std::vector<Real> v = h.vec();
    if (cfg_.reward_takes_action) {
      const auto oh = cfg_.actions.onehot(a);
      v.insert(v.end(), oh.begin(), oh.end());
    }
    return Tensor::row(std::move(v));
  }

 private:
  NetConfig cfg_;
  Gru trunk_;
  Mlp actor_, reward_, cost_, sdm_;
};

// Everything one CADE forward step produces for the current observation.
struct ValueBundle {
  Tensor logits;
  Tensor hidden;
  Action action;
  Real log_prob = 0.0;
  Real reward_estimate = 0.0;
  Real cost_estimate = 0.0;
};

// Advances the trunk with (obs, prev_action), samples an action, and
// evaluates the reward head on (hidden, action) and the cost head on obs.
inline ValueBundle cade_forward(const CadeNetworks& nets, std::span<const Real> obs,
                                const Action& prev_action, const Tensor& hidden, Rng& rng,
                                bool greedy = false) {
  ValueBundle vb;
  vb.hidden = nets.trunk_step(obs, prev_action, hidden);
  vb.logits = nets.actor_logits(vb.hidden);
  const auto s = greedy ? greedy_action(vb.logits.values(), nets.actions())
                        : sample_action(vb.logits.values(), nets.actions(), rng);
  vb.action = s.action;
  vb.log_prob = s.log_prob;
  vb.reward_estimate = nets.reward_estimate(vb.hidden, vb.action);
  vb.cost_estimate = nets.cost_estimate(obs);
  return vb;
}

}  // namespace cade
