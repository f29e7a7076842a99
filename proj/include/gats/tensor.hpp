#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation on a
// recording tape. The op surface is intentionally small: matmul, softmax,
// layernorm, gelu, linear, embedding lookup, cross entropy and a handful of
// structural ops (concat/slice/select). No broadcasting beyond bias-add;
// reductions run in a fixed sequential order so forward passes are bitwise
// deterministic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gats/rng.hpp"

namespace gats {

class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& msg)
      : std::runtime_error(msg), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

private:
  std::string category_;
};

inline Error shape_error(const std::string& msg) { return Error("shape", msg); }
inline Error numeric_error(const std::string& msg) { return Error("numeric", msg); }

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // same size as value when requires_grad
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

class Tensor;
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Tape

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

struct TapeEntry {
  NodePtr out;
  std::function<void()> pull;  // accumulates out->grad into the inputs
};

class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* t = nullptr;
    return t;
  }

  void record(NodePtr out, std::function<void()> pull) {
    entries_.push_back({std::move(out), std::move(pull)});
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  // RAII activation; tapes are single-owner and must not be shared across
  // concurrent training steps.
  struct Scope {
    explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
    ~Scope() { active() = prev_; }
    Tape* prev_;
  };

  friend void gats::backward(const Tensor& loss);

private:
  std::vector<TapeEntry> entries_;
};

// Disables recording (and requires_grad propagation) in a scope. Used for
// evaluation and finite-difference probes.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// ---------------------------------------------------------------------------
// Tensor

class Tensor {
public:
  Tensor() : n_(std::make_shared<TensorNode>()) {}
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_numel(n->shape), 0.0);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node()->value.begin(), t.node()->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  // Trainable parameter with normal(0, stddev) init.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = true) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.node()->value) v = rng.normal(0.0, stddev);
    return t;
  }

  const Shape& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->value.size(); }
  std::size_t rows() const { return n_->shape.empty() ? 1 : n_->shape[0]; }
  std::size_t cols() const {
    return n_->shape.size() < 2 ? 1 : n_->shape[1];
  }

  const std::vector<double>& data() const { return n_->value; }
  std::vector<double>& mutable_data() { return n_->value; }
  const std::vector<double>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    if (rg) n_->ensure_grad();
  }

  double item() const {
    if (n_->value.size() != 1)
      throw shape_error("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  double at(std::size_t r, std::size_t c) const {
    return n_->value[r * cols() + c];
  }

  void zero_grad() {
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  const NodePtr& node() const { return n_; }

private:
  NodePtr n_;
};

// ---------------------------------------------------------------------------
// Op plumbing

namespace detail {

inline void check_finite(const TensorNode& n, const char* op) {
  for (double v : n.value)
    if (!std::isfinite(v))
      throw numeric_error(std::string("non-finite value produced by ") + op);
}

inline Tensor make_output(Shape shape, bool requires_grad, const char* op) {
  Tensor out = Tensor::zeros(std::move(shape),
                             requires_grad && grad_enabled() &&
                                 Tape::active() != nullptr);
  (void)op;
  return out;
}

// Finalizes an op: finiteness check plus tape recording.
inline void finish(const Tensor& out, const char* op,
                   std::function<void()> pull) {
  check_finite(*out.node(), op);
  if (out.requires_grad()) {
    if (Tape::active() == nullptr)
      throw Error("tape", std::string(op) + ": no active tape for gradient op");
    Tape::active()->record(out.node(), std::move(pull));
  }
}

inline bool any_grad(std::initializer_list<const Tensor*> ts) {
  if (!grad_enabled() || Tape::active() == nullptr) return false;
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out = detail::make_output(a.shape(), detail::any_grad({&a, &b}), "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish(out, "add", [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        bn->grad[i] += on->grad[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("sub: shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out = detail::make_output(a.shape(), detail::any_grad({&a, &b}), "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish(out, "sub", [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out = detail::make_output(a.shape(), detail::any_grad({&a, &b}), "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish(out, "mul", [an, bn, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        bn->grad[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_output(a.shape(), detail::any_grad({&a}), "scale");
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  auto an = a.node();
  auto on = out.node();
  detail::finish(out, "scale", [an, on, c] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * c;
    }
  });
  return out;
}

// out = s * v where s is a scalar tensor (gate application).
inline Tensor scale_by(const Tensor& s, const Tensor& v) {
  if (s.numel() != 1)
    throw shape_error("scale_by: scale must be scalar, got " +
                      shape_str(s.shape()));
  Tensor out = detail::make_output(v.shape(), detail::any_grad({&s, &v}),
                                   "scale_by");
  double sv = s.data()[0];
  const auto& vv = v.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sv * vv[i];
  auto sn = s.node(), vn = v.node(), on = out.node();
  detail::finish(out, "scale_by", [sn, vn, on] {
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        acc += on->grad[i] * vn->value[i];
      sn->grad[0] += acc;
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      double sv2 = sn->value[0];
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        vn->grad[i] += on->grad[i] * sv2;
    }
  });
  return out;
}

// The only broadcast in the library: adds a [D] bias to each row of [N, D].
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.shape().size() != 2 || b.shape().size() != 1 ||
      x.shape()[1] != b.shape()[0])
    throw shape_error("add_bias: " + shape_str(x.shape()) + " + " +
                      shape_str(b.shape()));
  Tensor out = detail::make_output(x.shape(), detail::any_grad({&x, &b}),
                                   "add_bias");
  std::size_t n = x.shape()[0], d = x.shape()[1];
  const auto& xv = x.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) ov[r * d + c] = xv[r * d + c] + bv[c];
  auto xn = x.node(), bn = b.node(), on = out.node();
  detail::finish(out, "add_bias", [xn, bn, on, n, d] {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c)
          bn->grad[c] += on->grad[r * d + c];
    }
  });
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor out = detail::make_output({n, m}, detail::any_grad({&a, &b}),
                                   "matmul");
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* ov = out.mutable_data().data();
  // i-k-j loop order keeps b row-contiguous in the inner loop.
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = ov + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      double aik = av[i * k + kk];
      const double* brow = bv + kk * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::finish(out, "matmul", [an, bn, on, n, k, m] {
    const double* og = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      double* ag = an->grad.data();
      const double* bv2 = bn->value.data();
      // dA = dC * B^T
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          const double* brow = bv2 + kk * m;
          const double* orow = og + i * m;
          for (std::size_t j = 0; j < m; ++j) acc += orow[j] * brow[j];
          ag[i * k + kk] += acc;
        }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      double* bg = bn->grad.data();
      const double* av2 = an->value.data();
      // dB = A^T * dC
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          double aik = av2[i * k + kk];
          const double* orow = og + i * m;
          double* brow = bg + kk * m;
          for (std::size_t j = 0; j < m; ++j) brow[j] += aik * orow[j];
        }
    }
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw shape_error("transpose: need 2-d, got " + shape_str(a.shape()));
  std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out = detail::make_output({m, n}, detail::any_grad({&a}), "transpose");
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) ov[j * n + i] = av[i * m + j];
  auto an = a.node();
  auto on = out.node();
  detail::finish(out, "transpose", [an, on, n, m] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          an->grad[i * m + j] += on->grad[j * n + i];
    }
  });
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw shape_error("reshape: " + shape_str(a.shape()) + " -> " +
                      shape_str(shape));
  Tensor out = detail::make_output(std::move(shape), detail::any_grad({&a}),
                                   "reshape");
  out.mutable_data() = a.data();
  auto an = a.node();
  auto on = out.node();
  detail::finish(out, "reshape", [an, on] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i];
    }
  });
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.shape().size() != 2 || r1 > a.shape()[0] || r0 > r1)
    throw shape_error("slice_rows: bad range on " + shape_str(a.shape()));
  std::size_t d = a.shape()[1];
  Tensor out = detail::make_output({r1 - r0, d}, detail::any_grad({&a}),
                                   "slice_rows");
  std::copy(a.data().begin() + r0 * d, a.data().begin() + r1 * d,
            out.mutable_data().begin());
  auto an = a.node();
  auto on = out.node();
  detail::finish(out, "slice_rows", [an, on, r0, d] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[r0 * d + i] += on->grad[i];
    }
  });
  return out;
}

inline Tensor select_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.shape().size() != 2)
    throw shape_error("select_rows: need 2-d, got " + shape_str(a.shape()));
  std::size_t d = a.shape()[1];
  for (std::size_t r : idx)
    if (r >= a.shape()[0])
      throw shape_error("select_rows: index " + std::to_string(r) +
                        " out of range for " + shape_str(a.shape()));
  Tensor out = detail::make_output({idx.size(), d}, detail::any_grad({&a}),
                                   "select_rows");
  auto& ov = out.mutable_data();
  const auto& av = a.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(av.begin() + idx[i] * d, av.begin() + (idx[i] + 1) * d,
              ov.begin() + i * d);
  auto an = a.node();
  auto on = out.node();
  auto idx_copy = idx;
  detail::finish(out, "select_rows", [an, on, idx_copy, d] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < idx_copy.size(); ++i)
        for (std::size_t c = 0; c < d; ++c)
          an->grad[idx_copy[i] * d + c] += on->grad[i * d + c];
    }
  });
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat_rows: empty input");
  std::size_t d = parts[0].shape().size() == 2 ? parts[0].shape()[1] : 0;
  std::size_t n = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.shape().size() != 2 || p.shape()[1] != d)
      throw shape_error("concat_rows: inconsistent shapes");
    n += p.shape()[0];
    rg = rg || detail::any_grad({&p});
  }
  Tensor out = detail::make_output({n, d}, rg, "concat_rows");
  auto& ov = out.mutable_data();
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), ov.begin() + off);
    off += p.numel();
  }
  std::vector<NodePtr> pn;
  pn.reserve(parts.size());
  for (const Tensor& p : parts) pn.push_back(p.node());
  auto on = out.node();
  detail::finish(out, "concat_rows", [pn, on] {
    std::size_t off2 = 0;
    for (const auto& p : pn) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->value.size(); ++i)
          p->grad[i] += on->grad[off2 + i];
      }
      off2 += p->value.size();
    }
  });
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.shape().size() != 2 || c1 > a.shape()[1] || c0 > c1)
    throw shape_error("slice_cols: bad range on " + shape_str(a.shape()));
  std::size_t n = a.shape()[0], d = a.shape()[1], w = c1 - c0;
  Tensor out = detail::make_output({n, w}, detail::any_grad({&a}), "slice_cols");
  const auto& av = a.data();
  auto& ov = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) ov[r * w + c] = av[r * d + c0 + c];
  auto an = a.node();
  auto on = out.node();
  detail::finish(out, "slice_cols", [an, on, n, d, c0, w] {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c)
          an->grad[r * d + c0 + c] += on->grad[r * w + c];
    }
  });
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat_cols: empty input");
  std::size_t n = parts[0].rows();
  std::size_t d = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.shape().size() != 2 || p.shape()[0] != n)
      throw shape_error("concat_cols: inconsistent shapes");
    d += p.shape()[1];
    rg = rg || detail::any_grad({&p});
  }
  Tensor out = detail::make_output({n, d}, rg, "concat_cols");
  auto& ov = out.mutable_data();
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::size_t w = p.shape()[1];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c)
        ov[r * d + off + c] = p.data()[r * w + c];
    off += w;
  }
  std::vector<NodePtr> pn;
  for (const Tensor& p : parts) pn.push_back(p.node());
  auto on = out.node();
  detail::finish(out, "concat_cols", [pn, on, n, d] {
    std::size_t off2 = 0;
    for (const auto& p : pn) {
      std::size_t w = p->value.size() / n;
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < w; ++c)
            p->grad[r * w + c] += on->grad[r * d + off2 + c];
      }
      off2 += w;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Tensor gelu(const Tensor& x) {
  Tensor out = detail::make_output(x.shape(), detail::any_grad({&x}), "gelu");
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  auto xn = x.node();
  auto on = out.node();
  detail::finish(out, "gelu", [xn, on] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    constexpr double is2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      double v = xn->value[i];
      double cdf = 0.5 * (1.0 + std::erf(v * is2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      xn->grad[i] += on->grad[i] * (cdf + v * pdf);
    }
  });
  return out;
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = detail::make_output(x.shape(), detail::any_grad({&x}),
                                   "sigmoid");
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  auto xn = x.node();
  auto on = out.node();
  detail::finish(out, "sigmoid", [xn, on] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      double s = on->value[i];
      xn->grad[i] += on->grad[i] * s * (1.0 - s);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layernorm

// Softmax along `axis` with max-subtraction. Negative axis counts from the
// back.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  int nd = static_cast<int>(x.shape().size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw shape_error("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t ax = x.shape()[axis];
  std::size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  Tensor out = detail::make_output(x.shape(), detail::any_grad({&x}),
                                   "softmax");
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * ax * inner + in;
      double mx = xv[base];
      for (std::size_t a = 1; a < ax; ++a)
        mx = std::max(mx, xv[base + a * inner]);
      double sum = 0.0;
      for (std::size_t a = 0; a < ax; ++a) {
        double e = std::exp(xv[base + a * inner] - mx);
        ov[base + a * inner] = e;
        sum += e;
      }
      for (std::size_t a = 0; a < ax; ++a) ov[base + a * inner] /= sum;
    }
  auto xn = x.node();
  auto on = out.node();
  detail::finish(out, "softmax", [xn, on, outer, inner, ax] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        std::size_t base = o * ax * inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < ax; ++a)
          dot += on->grad[base + a * inner] * on->value[base + a * inner];
        for (std::size_t a = 0; a < ax; ++a) {
          std::size_t i = base + a * inner;
          xn->grad[i] += on->value[i] * (on->grad[i] - dot);
        }
      }
  });
  return out;
}

// Row-wise softmax over [N, M] where only entries with mask true participate.
// Masked entries get probability 0. A row must have at least one unmasked
// entry.
inline Tensor masked_softmax(const Tensor& x, const std::vector<bool>& mask) {
  if (x.shape().size() != 2 || mask.size() != x.numel())
    throw shape_error("masked_softmax: mask size mismatch");
  std::size_t n = x.shape()[0], m = x.shape()[1];
  Tensor out = detail::make_output(x.shape(), detail::any_grad({&x}),
                                   "masked_softmax");
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -1e300;
    bool any = false;
    for (std::size_t c = 0; c < m; ++c)
      if (mask[r * m + c]) {
        mx = std::max(mx, xv[r * m + c]);
        any = true;
      }
    if (!any)
      throw shape_error("masked_softmax: fully masked row " +
                        std::to_string(r));
    double sum = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      if (mask[r * m + c]) {
        double e = std::exp(xv[r * m + c] - mx);
        ov[r * m + c] = e;
        sum += e;
      } else {
        ov[r * m + c] = 0.0;
      }
    }
    for (std::size_t c = 0; c < m; ++c) ov[r * m + c] /= sum;
  }
  auto xn = x.node();
  auto on = out.node();
  auto mcopy = mask;
  detail::finish(out, "masked_softmax", [xn, on, mcopy, n, m] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c)
        dot += on->grad[r * m + c] * on->value[r * m + c];
      for (std::size_t c = 0; c < m; ++c) {
        std::size_t i = r * m + c;
        if (mcopy[i]) xn->grad[i] += on->value[i] * (on->grad[i] - dot);
      }
    }
  });
  return out;
}

// Layer norm over the last axis with epsilon 1e-5, then affine gain/bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias) {
  if (x.shape().empty())
    throw shape_error("layernorm: scalar input");
  std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw shape_error("layernorm: gain/bias size mismatch with " +
                      shape_str(x.shape()));
  constexpr double eps = 1e-5;
  std::size_t rows = x.numel() / d;
  Tensor out = detail::make_output(x.shape(),
                                   detail::any_grad({&x, &gain, &bias}),
                                   "layernorm");
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.mutable_data();
  std::vector<double> mu(rows), istd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < d; ++c) m += xv[r * d + c];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double t = xv[r * d + c] - m;
      var += t * t;
    }
    var /= static_cast<double>(d);
    mu[r] = m;
    istd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c)
      ov[r * d + c] = gv[c] * ((xv[r * d + c] - m) * istd[r]) + bv[c];
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
  detail::finish(out, "layernorm", [xn, gn, bn, on, rows, d, mu, istd] {
    for (std::size_t r = 0; r < rows; ++r) {
      // xhat recomputed from stored stats
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t c = 0; c < d; ++c)
          gn->grad[c] += on->grad[r * d + c] *
                         ((xn->value[r * d + c] - mu[r]) * istd[r]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t c = 0; c < d; ++c) bn->grad[c] += on->grad[r * d + c];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        double sum_gdy = 0.0, sum_gdy_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          double gdy = on->grad[r * d + c] * gn->value[c];
          double xhat = (xn->value[r * d + c] - mu[r]) * istd[r];
          sum_gdy += gdy;
          sum_gdy_xhat += gdy * xhat;
        }
        double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
          double gdy = on->grad[r * d + c] * gn->value[c];
          double xhat = (xn->value[r * d + c] - mu[r]) * istd[r];
          xn->grad[r * d + c] +=
              istd[r] * (gdy - inv_d * sum_gdy - xhat * inv_d * sum_gdy_xhat);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear / embedding / losses / reductions

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

inline Tensor embedding_lookup(const Tensor& table,
                               const std::vector<int>& ids) {
  if (table.shape().size() != 2)
    throw shape_error("embedding_lookup: table must be 2-d");
  std::size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw Error("vocab", "embedding_lookup: id " + std::to_string(id) +
                               " out of vocabulary range [0, " +
                               std::to_string(v) + ")");
  Tensor out = detail::make_output({ids.size(), d}, detail::any_grad({&table}),
                                   "embedding_lookup");
  auto& ov = out.mutable_data();
  const auto& tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + static_cast<std::size_t>(ids[i]) * d,
              tv.begin() + (static_cast<std::size_t>(ids[i]) + 1) * d,
              ov.begin() + i * d);
  auto tn = table.node();
  auto on = out.node();
  auto ids_copy = ids;
  detail::finish(out, "embedding_lookup", [tn, on, ids_copy, d] {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids_copy.size(); ++i)
      for (std::size_t c = 0; c < d; ++c)
        tn->grad[static_cast<std::size_t>(ids_copy[i]) * d + c] +=
            on->grad[i * d + c];
  });
  return out;
}

// Mean negative log-likelihood over targets with target >= 0; entries with
// target < 0 are excluded (masked). An empty target set yields loss 0.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<int>& targets) {
  if (logits.shape().size() != 2 || targets.size() != logits.shape()[0])
    throw shape_error("cross_entropy: logits " + shape_str(logits.shape()) +
                      " vs " + std::to_string(targets.size()) + " targets");
  std::size_t n = logits.shape()[0], v = logits.shape()[1];
  for (int t : targets)
    if (t >= static_cast<int>(v))
      throw Error("vocab", "cross_entropy: target " + std::to_string(t) +
                               " out of range");
  std::size_t n_eff = 0;
  for (int t : targets)
    if (t >= 0) ++n_eff;
  Tensor out = detail::make_output({1}, detail::any_grad({&logits}),
                                   "cross_entropy");
  const auto& lv = logits.data();
  double loss = 0.0;
  std::vector<double> lse(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    double mx = lv[r * v];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, lv[r * v + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < v; ++c) s += std::exp(lv[r * v + c] - mx);
    lse[r] = mx + std::log(s);
    loss += lse[r] - lv[r * v + static_cast<std::size_t>(targets[r])];
  }
  if (n_eff > 0) loss /= static_cast<double>(n_eff);
  out.mutable_data()[0] = loss;
  auto ln = logits.node();
  auto on = out.node();
  auto tcopy = targets;
  detail::finish(out, "cross_entropy", [ln, on, tcopy, n, v, n_eff, lse] {
    if (!ln->requires_grad || n_eff == 0) return;
    ln->ensure_grad();
    double g = on->grad[0] / static_cast<double>(n_eff);
    for (std::size_t r = 0; r < n; ++r) {
      if (tcopy[r] < 0) continue;
      for (std::size_t c = 0; c < v; ++c) {
        double p = std::exp(ln->value[r * v + c] - lse[r]);
        double ind = (static_cast<int>(c) == tcopy[r]) ? 1.0 : 0.0;
        ln->grad[r * v + c] += g * (p - ind);
      }
    }
  });
  return out;
}

inline Tensor sum(const Tensor& x) {
  Tensor out = detail::make_output({1}, detail::any_grad({&x}), "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.mutable_data()[0] = s;
  auto xn = x.node();
  auto on = out.node();
  detail::finish(out, "sum", [xn, on] {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (double& g : xn->grad) g += on->grad[0];
  });
  return out;
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw shape_error("backward: loss must be scalar, got " +
                      shape_str(loss.shape()));
  Tape* tape = Tape::active();
  if (tape == nullptr)
    throw Error("tape", "backward: no active tape");
  if (!loss.requires_grad())
    throw Error("tape", "backward: loss is detached from the tape");
  // Intermediate (tape-output) grads are transient per backward call; leaf
  // parameter grads accumulate across calls.
  for (auto& e : tape->entries_) {
    e.out->ensure_grad();
    std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
  }
  loss.node()->grad[0] = 1.0;
  for (auto it = tape->entries_.rbegin(); it != tape->entries_.rend(); ++it)
    it->pull();
}

}  // namespace gats
