// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape is rebuilt for every forward pass (define-by-run); Vars are
// lightweight handles into it. Persistent weights live in Parameter objects
// whose gradients accumulate across backward() calls until zero_grad().
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cade::ag {

using Real = double;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, Real fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<Real> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("Tensor: " + std::to_string(data_.size()) + " values for shape [" +
                  std::to_string(rows_) + "," + std::to_string(cols_) + "]");
    }
  }

  static Tensor scalar(Real v) { return Tensor(1, 1, v); }
  static Tensor row(std::vector<Real> values) {
    const auto n = values.size();
    return Tensor(1, n, std::move(values));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real item() const {
    if (data_.size() != 1) throw Error("Tensor::item on shape " + shape_str());
    return data_[0];
  }

  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  const std::vector<Real>& vec() const { return data_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }
  std::string shape_str() const {
    return "[" + std::to_string(rows_) + "," + std::to_string(cols_) + "]";
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

// A named trainable tensor. `grad` is a mutable accumulator so that read-only
// forward passes can bind parameters without copying them.
struct Parameter {
  std::string name;
  Tensor value;
  mutable Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() const { grad.fill(0.0); }
};

class Tape;

// Handle to a node on a Tape. Valid while the tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  // A non-recording tape computes values only; no backward rules are kept.
  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) {
    check_finite(t, "constant");
    return push(std::move(t), false, nullptr, {});
  }
  Var variable(Tensor t) {
    check_finite(t, "variable");
    return push(std::move(t), record_, nullptr, {});
  }
  // Binds a parameter by reference; its value must outlive the tape and stay
  // unchanged while the tape is in use. Gradients flush into p.grad.
  Var parameter(const Parameter& p) {
    auto v = push(Tensor(), record_, nullptr, {});
    auto& n = nodes_[v.id()];
    n.ext = &p.value;
    if (record_) n.param = &p;
    return v;
  }
  Var detach(Var v) {
    check_owner(v, "detach");
    return push(v.value(), false, nullptr, {});
  }

  const Tensor& value(Var v) const {
    check_owner(v, "value");
    return nodes_[v.id()].val();
  }
  const Tensor& value(std::uint32_t id) const { return nodes_[id].val(); }

  // Gradient of the last backward() w.r.t. v; zeros if v was unreachable.
  Tensor grad(Var v) const {
    check_owner(v, "grad");
    const auto& n = nodes_[v.id()];
    if (n.grad.size() == n.val().size() && n.grad.size() > 0) return n.grad;
    return Tensor(n.val().rows(), n.val().cols());
  }

  // Reverse accumulation from a scalar loss. Leaf and parameter gradients
  // accumulate across repeated calls; intermediate gradients are recomputed.
  void backward(Var loss) {
    check_owner(loss, "backward");
    if (!record_) throw Error("backward: tape was created without recording");
    const auto& lv = nodes_[loss.id()].val();
    if (lv.size() != 1) throw Error("backward: loss must be scalar, got shape " + lv.shape_str());
    for (auto& n : nodes_) {
      if (n.backward) n.grad = Tensor();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    auto& lg = slot(loss.id());
    lg[0] += 1.0;
    for (std::int64_t i = loss.id(); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (n.param != nullptr && n.grad.size() > 0 && n.grad.size() == n.val().size()) {
        auto& pg = n.param->grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
        n.grad.fill(0.0);
      }
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      if (n.grad.size() > 0) n.grad.fill(0.0);
    }
  }

  // Gradient buffer of node id, or nullptr when the node does not require grad.
  Tensor* grad_slot(std::uint32_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    return &slot(id);
  }

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  // Records an operation. Used by the primitive ops below and by custom
  // differentiable ops elsewhere (homography solve, warp).
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    for (const auto& in : inputs) check_owner(in, op);
    if (!value.all_finite()) {
      throw Error(std::string(op) + ": non-finite output for shape " + value.shape_str());
    }
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, inputs);
  }

  void check_owner(Var v, std::string_view op) const {
    if (v.tape() != this) {
      throw Error(std::string(op) + ": tensor belongs to a different tape");
    }
    if (v.id() >= nodes_.size()) throw Error(std::string(op) + ": dangling tensor handle");
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ext = nullptr;
    Tensor grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    BackwardFn backward;

    const Tensor& val() const { return ext ? *ext : value; }
  };

  static void check_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw Error(what + ": non-finite input of shape " + t.shape_str());
  }

  Tensor& slot(std::uint32_t id) {
    auto& n = nodes_[id];
    const auto& v = n.val();
    if (n.grad.size() != v.size() || n.grad.size() == 0) n.grad = Tensor(v.rows(), v.cols());
    return n.grad;
  }

  Var push(Tensor t, bool requires_grad, BackwardFn fn, std::span<const Var>) {
    if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw Error("tape overflow");
    Node n;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  bool record_ = true;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& same_tape(std::string_view op, Var a, Var b) {
  if (!a.valid() || !b.valid()) throw Error(std::string(op) + ": invalid tensor handle");
  if (a.tape() != b.tape()) throw Error(std::string(op) + ": tensors from different tapes");
  return *a.tape();
}

inline Tape& tape_of(std::string_view op, Var a) {
  if (!a.valid()) throw Error(std::string(op) + ": invalid tensor handle");
  return *a.tape();
}

[[noreturn]] inline void shape_error(std::string_view op, const Tensor& a, const Tensor& b) {
  throw Error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline void add_into(Tensor* dst, const Tensor& src) {
  if (dst == nullptr) return;
  Real* d = dst->data();
  const Real* s = src.data();
  for (std::size_t i = 0, n = src.size(); i < n; ++i) d[i] += s[i];
}

template <typename Fwd, typename Deriv>
Var unary(std::string_view op, Var a, Fwd fwd, Deriv deriv) {
  auto& t = tape_of(op, a);
  const auto& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  const auto ia = a.id();
  return t.record(op, std::move(y), {a}, [ia, deriv](Tape& tp, const Tensor& g) {
    Tensor* ga = tp.grad_slot(ia);
    if (ga == nullptr) return;
    const auto& x = tp.value(ia);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * deriv(x[i]);
  });
}

}  // namespace detail

// C = A B with A [m,k], B [k,n]. Each output element sums over k in ascending
// order, so a row's result does not depend on how many rows are batched.
inline Var matmul(Var a, Var b) {
  auto& t = detail::same_tape("matmul", a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows()) detail::shape_error("matmul", A, B);
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    Real* c = C.data() + i * n;
    const Real* arow = A.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(C), {a, b}, [ia, ib, m, k, n](Tape& tp, const Tensor& g) {
    const auto& A = tp.value(ia);
    const auto& B = tp.value(ib);
    if (Tensor* ga = tp.grad_slot(ia)) {
      for (std::size_t i = 0; i < m; ++i) {
        const Real* grow = g.data() + i * n;
        Real* dst = ga->data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const Real* brow = B.data() + p * n;
          // Four fixed interleaved partial sums: vectorizable, still deterministic.
          Real s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
          std::size_t j = 0;
          for (; j + 4 <= n; j += 4) {
            s0 += grow[j] * brow[j];
            s1 += grow[j + 1] * brow[j + 1];
            s2 += grow[j + 2] * brow[j + 2];
            s3 += grow[j + 3] * brow[j + 3];
          }
          for (; j < n; ++j) s0 += grow[j] * brow[j];
          dst[p] += (s0 + s1) + (s2 + s3);
        }
      }
    }
    if (Tensor* gb = tp.grad_slot(ib)) {
      for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = A.data() + i * k;
        const Real* grow = g.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const Real av = arow[p];
          if (av == 0.0) continue;
          Real* dst = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += av * grow[j];
        }
      }
    }
  });
}

namespace detail {

// Elementwise binary op where b has the same shape as a or is a [1,n] row
// broadcast over a's rows.
template <typename Fwd, typename DA, typename DB>
Var binary(std::string_view op, Var a, Var b, Fwd fwd, DA da, DB db) {
  auto& t = same_tape(op, a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  const bool bcast = !A.same_shape(B);
  if (bcast && !(B.rows() == 1 && B.cols() == A.cols())) shape_error(op, A, B);
  const std::size_t n = A.cols();
  Tensor C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = fwd(A[i], B[bcast ? i % n : i]);
  const auto ia = a.id(), ib = b.id();
  return t.record(op, std::move(C), {a, b}, [=](Tape& tp, const Tensor& g) {
    const auto& A = tp.value(ia);
    const auto& B = tp.value(ib);
    Tensor* ga = tp.grad_slot(ia);
    Tensor* gb = tp.grad_slot(ib);
    for (std::size_t i = 0; i < A.size(); ++i) {
      const std::size_t j = bcast ? i % n : i;
      if (ga) (*ga)[i] += g[i] * da(A[i], B[j]);
      if (gb) (*gb)[j] += g[i] * db(A[i], B[j]);
    }
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return 1.0; },
      [](Real, Real) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return 1.0; },
      [](Real, Real) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

inline Var scale(Var a, Real s) {
  return detail::unary("scale", a, [s](Real x) { return s * x; }, [s](Real) { return s; });
}

inline Var add_scalar(Var a, Real s) {
  return detail::unary("add_scalar", a, [s](Real x) { return x + s; }, [](Real) { return 1.0; });
}

inline Var tanh(Var a) {
  return detail::unary(
      "tanh", a, [](Real x) { return std::tanh(x); },
      [](Real x) {
        const Real y = std::tanh(x);
        return 1.0 - y * y;
      });
}

inline Real sigmoid_value(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](Real x) {
    const Real s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](Real x) { return x > 0 ? x : 0.0; }, [](Real x) { return x > 0 ? 1.0 : 0.0; });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](Real x) { return std::exp(x); }, [](Real x) { return std::exp(x); });
}

inline Var log(Var a) {
  for (Real x : a.value().values()) {
    if (!(x > 0)) throw Error("log: non-positive input " + std::to_string(x));
  }
  return detail::unary("log", a, [](Real x) { return std::log(x); }, [](Real x) { return 1.0 / x; });
}

inline Var clamp(Var a, Real lo, Real hi) {
  return detail::unary(
      "clamp", a, [lo, hi](Real x) { return std::clamp(x, lo, hi); },
      [lo, hi](Real x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Sum of all elements -> [1,1].
inline Var sum(Var a) {
  auto& t = detail::tape_of("sum", a);
  const auto& x = a.value();
  Real s = 0.0;
  for (Real v : x.values()) s += v;
  const auto ia = a.id();
  return t.record("sum", Tensor::scalar(s), {a}, [ia](Tape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_slot(ia)) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
    }
  });
}

inline Var mean(Var a) {
  const auto n = a.value().size();
  if (n == 0) throw Error("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<Real>(n));
}

// Row-wise sum over columns: [m,n] -> [m,1].
inline Var sum_cols(Var a) {
  auto& t = detail::tape_of("sum_cols", a);
  const auto& x = a.value();
  Tensor y(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    Real s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
    y[i] = s;
  }
  const auto ia = a.id();
  const auto cols = x.cols();
  return t.record("sum_cols", std::move(y), {a}, [ia, cols](Tape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_slot(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j) (*ga)(i, j) += g[i];
    }
  });
}

inline Var slice(Var a, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
  auto& t = detail::tape_of("slice", a);
  const auto& x = a.value();
  if (row0 + nrows > x.rows() || col0 + ncols > x.cols()) {
    throw Error("slice: window [" + std::to_string(row0) + "+" + std::to_string(nrows) + "," +
                std::to_string(col0) + "+" + std::to_string(ncols) + "] exceeds shape " +
                x.shape_str());
  }
  Tensor y(nrows, ncols);
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j) y(i, j) = x(row0 + i, col0 + j);
  const auto ia = a.id();
  return t.record("slice", std::move(y), {a}, [=](Tape& tp, const Tensor& g) {
    if (Tensor* ga = tp.grad_slot(ia)) {
      for (std::size_t i = 0; i < nrows; ++i)
        for (std::size_t j = 0; j < ncols; ++j) (*ga)(row0 + i, col0 + j) += g(i, j);
    }
  });
}

inline Var row(Var a, std::size_t r) { return slice(a, r, 1, 0, a.cols()); }

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  auto& t = detail::tape_of("concat_cols", parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) detail::shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Tensor y(rows, cols);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& x = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) y(i, off + j) = x(i, j);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += x.cols();
  }
  return t.record("concat_cols", std::move(y), parts,
                  [ids, offsets, rows](Tape& tp, const Tensor& g) {
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      Tensor* gk = tp.grad_slot(ids[k]);
                      if (!gk) continue;
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < gk->cols(); ++j)
                          (*gk)(i, j) += g(i, offsets[k] + j);
                    }
                  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  auto& t = detail::tape_of("concat_rows", parts[0]);
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) detail::shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
  }
  std::vector<Real> data;
  data.reserve(rows * cols);
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    const auto& v = p.value().vec();
    data.insert(data.end(), v.begin(), v.end());
    ids.push_back(p.id());
  }
  return t.record("concat_rows", Tensor(rows, cols, std::move(data)), parts,
                  [ids](Tape& tp, const Tensor& g) {
                    std::size_t off = 0;
                    for (auto id : ids) {
                      const auto n = tp.value(id).size();
                      if (Tensor* gk = tp.grad_slot(id)) {
                        for (std::size_t i = 0; i < n; ++i) (*gk)[i] += g[off + i];
                      }
                      off += n;
                    }
                  });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

namespace detail {

inline void check_branches(std::string_view op, const Tensor& x, std::span<const int> branches) {
  const int total = std::accumulate(branches.begin(), branches.end(), 0);
  if (total != static_cast<int>(x.cols())) {
    throw Error(std::string(op) + ": branch sizes sum to " + std::to_string(total) +
                " but logits have " + std::to_string(x.cols()) + " columns");
  }
}

inline Tensor log_softmax_rows(const Tensor& x, std::span<const int> branches) {
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t off = 0;
    for (int b : branches) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = 0; j < b; ++j) mx = std::max(mx, x(i, off + j));
      Real s = 0.0;
      for (int j = 0; j < b; ++j) s += std::exp(x(i, off + j) - mx);
      const Real lse = mx + std::log(s);
      for (int j = 0; j < b; ++j) y(i, off + j) = x(i, off + j) - lse;
      off += static_cast<std::size_t>(b);
    }
  }
  return y;
}

}  // namespace detail

// Per-row log-softmax applied independently to consecutive column groups
// (one group per action branch).
inline Var log_softmax_branches(Var a, const std::vector<int>& branches) {
  auto& t = detail::tape_of("log_softmax", a);
  detail::check_branches("log_softmax", a.value(), branches);
  const auto ia = a.id();
  return t.record("log_softmax", detail::log_softmax_rows(a.value(), branches), {a},
                  [ia, branches](Tape& tp, const Tensor& g) {
                    Tensor* ga = tp.grad_slot(ia);
                    if (!ga) return;
                    const Tensor y = detail::log_softmax_rows(tp.value(ia), branches);
                    for (std::size_t i = 0; i < y.rows(); ++i) {
                      std::size_t off = 0;
                      for (int b : branches) {
                        Real gs = 0.0;
                        for (int j = 0; j < b; ++j) gs += g(i, off + j);
                        for (int j = 0; j < b; ++j)
                          (*ga)(i, off + j) += g(i, off + j) - std::exp(y(i, off + j)) * gs;
                        off += static_cast<std::size_t>(b);
                      }
                    }
                  });
}

inline Var softmax_branches(Var a, const std::vector<int>& branches) {
  return exp(log_softmax_branches(a, branches));
}

// Fused gated-recurrent-unit update. gi = x W_ih + b_ih and gh = h W_hh + b_hh
// are [B,3H] with gate blocks ordered (reset, update, candidate):
//   r = s(gi_r + gh_r), z = s(gi_z + gh_z), n = tanh(gi_n + r * gh_n)
//   h' = (1 - z) * n + z * h
inline Var gru_cell(Var gi, Var gh, Var h) {
  auto& t = detail::same_tape("gru_cell", gi, gh);
  detail::same_tape("gru_cell", gi, h);
  const auto& GI = gi.value();
  const auto& GH = gh.value();
  const auto& Hp = h.value();
  const std::size_t B = Hp.rows(), H = Hp.cols();
  if (!GI.same_shape(GH) || GI.rows() != B || GI.cols() != 3 * H) {
    throw Error("gru_cell: shape mismatch gi " + GI.shape_str() + " gh " + GH.shape_str() +
                " h " + Hp.shape_str());
  }
  Tensor out(B, H);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < H; ++j) {
      const Real r = sigmoid_value(GI(b, j) + GH(b, j));
      const Real z = sigmoid_value(GI(b, H + j) + GH(b, H + j));
      const Real n = std::tanh(GI(b, 2 * H + j) + r * GH(b, 2 * H + j));
      out(b, j) = n + z * (Hp(b, j) - n);
    }
  }
  const auto igi = gi.id(), igh = gh.id(), ih = h.id();
  return t.record("gru_cell", std::move(out), {gi, gh, h}, [=](Tape& tp, const Tensor& g) {
    const auto& GI = tp.value(igi);
    const auto& GH = tp.value(igh);
    const auto& Hp = tp.value(ih);
    Tensor* dgi = tp.grad_slot(igi);
    Tensor* dgh = tp.grad_slot(igh);
    Tensor* dh = tp.grad_slot(ih);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < H; ++j) {
        const Real r = sigmoid_value(GI(b, j) + GH(b, j));
        const Real z = sigmoid_value(GI(b, H + j) + GH(b, H + j));
        const Real n = std::tanh(GI(b, 2 * H + j) + r * GH(b, 2 * H + j));
        const Real go = g(b, j);
        const Real dn = go * (1.0 - z);
        const Real dz = go * (Hp(b, j) - n);
        const Real dpre_n = dn * (1.0 - n * n);
        const Real dr = dpre_n * GH(b, 2 * H + j);
        const Real dpre_r = dr * r * (1.0 - r);
        const Real dpre_z = dz * z * (1.0 - z);
        if (dgi) {
          (*dgi)(b, j) += dpre_r;
          (*dgi)(b, H + j) += dpre_z;
          (*dgi)(b, 2 * H + j) += dpre_n;
        }
        if (dgh) {
          (*dgh)(b, j) += dpre_r;
          (*dgh)(b, H + j) += dpre_z;
          (*dgh)(b, 2 * H + j) += dpre_n * r;
        }
        if (dh) (*dh)(b, j) += go * z;
      }
    }
  });
}

// Mean binary cross-entropy between sigmoid(logits) and targets in [0,1],
// evaluated in the numerically stable softplus form.
inline Var bce_with_logits(Var logits, const Tensor& target) {
  auto& t = detail::tape_of("bce_with_logits", logits);
  const auto& z = logits.value();
  if (!z.same_shape(target)) detail::shape_error("bce_with_logits", z, target);
  Real s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const Real x = z[i];
    s += std::max(x, 0.0) - x * target[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const Real n = static_cast<Real>(z.size());
  const auto iz = logits.id();
  return t.record("bce_with_logits", Tensor::scalar(s / n), {logits},
                  [iz, target, n](Tape& tp, const Tensor& g) {
                    Tensor* gz = tp.grad_slot(iz);
                    if (!gz) return;
                    const auto& z = tp.value(iz);
                    for (std::size_t i = 0; i < z.size(); ++i)
                      (*gz)[i] += g[0] * (sigmoid_value(z[i]) - target[i]) / n;
                  });
}

using ScalarFn = std::function<Var(Tape&, Var)>;

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline Real grad_check(const ScalarFn& f, const Tensor& point, Real epsilon = 1e-4) {
  Tensor analytic;
  {
    Tape tape;
    auto x = tape.variable(point);
    auto y = f(tape, x);
    if (y.value().size() != 1) throw Error("grad_check: function is not scalar-valued");
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor& p) {
    Tape tape(false);
    const Real v = f(tape, tape.variable(p)).value().item();
    if (!std::isfinite(v)) throw Error("grad_check: non-finite evaluation");
    return v;
  };
  Real worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Real x0 = point[i];
    probe[i] = x0 + epsilon;
    const Real fp = eval(probe);
    probe[i] = x0 - epsilon;
    const Real fm = eval(probe);
    probe[i] = x0;
    const Real fd = (fp - fm) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace cade::ag
