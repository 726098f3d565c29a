#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probtf/rng.hpp"

// Reverse-mode autodiff over dense row-major float arrays.
//
// Recording model: ops execute eagerly and, when a Tape is active on the
// current thread AND the result requires grad, push the result node onto the
// tape in execution order. Execution order is a topological order of the
// graph, so backward() is a single reverse sweep over the tape; every
// recorded op is replayed exactly once and accumulation order is fixed,
// which makes gradients bit-reproducible. Without an active tape, ops run
// in pure inference mode (no graph is retained, outputs carry no grad).
//
// Broadcasting is explicit and minimal: elementwise ops require identical
// shapes, except add_rowvec ([S,D] + [D]) and affine (tensor op scalars).
// There is no implicit rank promotion.
//
// Scalar type is a template parameter: float for training/inference,
// double for finite-difference gradient checks.

namespace probtf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // empty until touched by backward()
  bool requires_grad = false;
  std::int64_t tape_index = -1;

  std::size_t size() const { return data ? data->size() : 0; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(size(), T(0));
  }
};

template <typename T>
class Tensor;

// Ordered record of executed ops. One tape per thread may be active; graph
// construction and backward are single-threaded per tape. The tape owns the
// backward closures: a closure capturing its own output node would otherwise
// form a shared_ptr cycle and leak the whole per-item graph.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::int64_t record(std::shared_ptr<TensorNode<T>> node) {
    nodes_.push_back(std::move(node));
    fns_.emplace_back();
    return static_cast<std::int64_t>(nodes_.size()) - 1;
  }

  void set_backward(std::int64_t index, std::function<void()> fn) {
    fns_[static_cast<std::size_t>(index)] = std::move(fn);
  }

  std::size_t size() const { return nodes_.size(); }
  TensorNode<T>& node(std::size_t i) { return *nodes_[i]; }
  const std::function<void()>& backward_fn(std::size_t i) const { return fns_[i]; }

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
  std::vector<std::function<void()>> fns_;
};

// RAII activation of a tape on the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) {
    Tape<T>::current() = &tape;
  }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " wants " +
                                  std::to_string(numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    }
    return make(std::move(shape), std::make_shared<std::vector<T>>(std::move(values)),
                requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto buf = std::make_shared<std::vector<T>>(numel(shape), T(0));
    return make(std::move(shape), std::move(buf), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto buf = std::make_shared<std::vector<T>>(numel(shape), value);
    return make(std::move(shape), std::move(buf), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from(Shape{}, {value}, requires_grad);
  }

  // Leaf that aliases an external buffer (model parameters). The buffer is
  // shared, not copied; the node's grad is its own.
  static Tensor leaf(Shape shape, std::shared_ptr<std::vector<T>> buffer,
                     bool requires_grad = true) {
    if (numel(shape) != buffer->size()) {
      throw std::invalid_argument("tensor leaf: shape/buffer size mismatch");
    }
    return make(std::move(shape), std::move(buffer), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->size(); }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<T>& values() const { return *node_->data; }
  std::vector<T>& values_mut() { return *node_->data; }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  T item() const {
    if (size() != 1) {
      throw std::invalid_argument("item(): tensor of shape " + shape_str(shape()) +
                                  " is not scalar");
    }
    return (*node_->data)[0];
  }

  TensorNode<T>& node() const { return *node_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

  void zero_grad() { node_->grad.assign(node_->size(), T(0)); }

  // Reverse sweep from a scalar loss over the active tape.
  void backward() const {
    if (size() != 1) {
      throw std::invalid_argument("backward(): loss must be scalar, got shape " +
                                  shape_str(shape()));
    }
    Tape<T>* tape = Tape<T>::current();
    if (tape == nullptr || node_->tape_index < 0) {
      throw std::logic_error("backward(): no active tape recorded this tensor");
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (std::int64_t i = node_->tape_index; i >= 0; --i) {
      TensorNode<T>& n = tape->node(static_cast<std::size_t>(i));
      const auto& fn = tape->backward_fn(static_cast<std::size_t>(i));
      if (!n.grad.empty() && fn) fn();
    }
  }

  // Internal: wraps an op result and records it when appropriate.
  static Tensor result(Shape shape, std::vector<T> values, bool requires_grad,
                       std::function<void()> backward_fn) {
    Tensor t = from(std::move(shape), std::move(values), false);
    Tape<T>* tape = Tape<T>::current();
    if (requires_grad && tape != nullptr) {
      t.node_->requires_grad = true;
      t.node_->tape_index = tape->record(t.node_);
      tape->set_backward(t.node_->tape_index, std::move(backward_fn));
    }
    return t;
  }

 private:
  static Tensor make(Shape shape, std::shared_ptr<std::vector<T>> buf, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(buf);
    t.node_->requires_grad = requires_grad;
    Tape<T>* tape = Tape<T>::current();
    if (requires_grad && tape != nullptr) {
      t.node_->tape_index = tape->record(t.node_);
    }
    return t;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
bool tracing(const Tensor<T>& a) {
  return Tape<T>::current() != nullptr && a.requires_grad();
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void yn_attach(Tensor<T>& y, std::function<void()> fn);

template <typename T, typename FwdFn, typename DerivFn>
Tensor<T> unary_ew(const Tensor<T>& x, FwdFn f, DerivFn dfdx_from_xy) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const bool rg = tracing(x);
  Tensor<T> y = Tensor<T>::result(x.shape(), std::move(out), false, nullptr);
  if (rg) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    auto fn = [xn, yn, dfdx_from_xy]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const auto& xv = *xn->data;
      const auto& yv = *yn->data;
      const auto& gy = yn->grad;
      auto& gx = xn->grad;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        gx[i] += gy[i] * dfdx_from_xy(xv[i], yv[i]);
      }
    };
    yn_attach(y, std::move(fn));
  }
  return y;
}

template <typename T>
void yn_attach(Tensor<T>& y, std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::current();
  auto& n = y.node();
  n.requires_grad = true;
  n.tape_index = tape->record(y.node_ptr());
  tape->set_backward(n.tape_index, std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Tensor<T> y = Tensor<T>::result(a.shape(), std::move(out), false, nullptr);
  if (detail::tracing(a) || detail::tracing(b)) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [an, bn, yn]() {
      const auto& gy = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) an->grad[i] += gy[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) bn->grad[i] += gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Tensor<T> y = Tensor<T>::result(a.shape(), std::move(out), false, nullptr);
  if (detail::tracing(a) || detail::tracing(b)) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [an, bn, yn]() {
      const auto& gy = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) an->grad[i] += gy[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) bn->grad[i] -= gy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor<T> y = Tensor<T>::result(a.shape(), std::move(out), false, nullptr);
  if (detail::tracing(a) || detail::tracing(b)) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [an, bn, yn]() {
      const auto& gy = yn->grad;
      const auto& av2 = *an->data;
      const auto& bv2 = *bn->data;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) an->grad[i] += gy[i] * bv2[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) bn->grad[i] += gy[i] * av2[i];
      }
    });
  }
  return y;
}

// y = scale * x + shift, scalars applied elementwise.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T scale, T shift) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = scale * xv[i] + shift;
  Tensor<T> y = Tensor<T>::result(x.shape(), std::move(out), false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn, scale]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const auto& gy = yn->grad;
      for (std::size_t i = 0; i < gy.size(); ++i) xn->grad[i] += scale * gy[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_ew(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.values()) {
    if (!(v > T(0))) {
      throw std::domain_error("log: input must be strictly positive, got " +
                              std::to_string(static_cast<double>(v)));
    }
  }
  return detail::unary_ew(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_ew(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

// [S, D] + [D]: the row vector is added to every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.shape()[1] != v.shape()[0]) {
    throw std::invalid_argument("add_rowvec: want [S,D] + [D], got " +
                                shape_str(x.shape()) + " + " + shape_str(v.shape()));
  }
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + vv[c];
  Tensor<T> y = Tensor<T>::result(x.shape(), std::move(out), false, nullptr);
  if (detail::tracing(x) || detail::tracing(v)) {
    auto xn = x.node_ptr();
    auto vn = v.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, vn, yn, rows, cols]() {
      const auto& gy = yn->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) xn->grad[i] += gy[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) vn->grad[c] += gy[r * cols + c];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matmul / transpose / slicing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  std::vector<T> out(m * n, T(0));
  T* op = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ap[i * k + p];
      const T* brow = bp + p * n;
      T* orow = op + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tensor<T> y = Tensor<T>::result({m, n}, std::move(out), false, nullptr);
  if (detail::tracing(a) || detail::tracing(b)) {
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [an, bn, yn, m, k, n]() {
      const T* gy = yn->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        const T* bp2 = bn->data->data();
        T* ga = an->grad.data();
        // dA[i,p] += sum_j gy[i,j] * B[p,j]
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            T s = T(0);
            const T* gyrow = gy + i * n;
            const T* brow = bp2 + p * n;
            for (std::size_t j = 0; j < n; ++j) s += gyrow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        const T* ap2 = an->data->data();
        T* gb = bn->grad.data();
        // dB[p,j] += sum_i A[i,p] * gy[i,j]
        for (std::size_t i = 0; i < m; ++i) {
          const T* gyrow = gy + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = ap2[i * k + p];
            T* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * gyrow[j];
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument("transpose: want rank 2, got " + shape_str(x.shape()));
  }
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xv[r * cols + c];
  Tensor<T> y = Tensor<T>::result({cols, rows}, std::move(out), false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn, rows, cols]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const auto& gy = yn->grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) xn->grad[r * cols + c] += gy[c * rows + r];
    });
  }
  return y;
}

// Columns [c0, c1) of a [S, D] tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  if (x.rank() != 2 || c0 >= c1 || c1 > x.shape()[1]) {
    throw std::invalid_argument("slice_cols: invalid slice [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.shape()[0], cols = x.shape()[1], w = c1 - c0;
  const auto& xv = x.values();
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xv[r * cols + c0 + c];
  Tensor<T> y = Tensor<T>::result({rows, w}, std::move(out), false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn, rows, cols, w, c0]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const auto& gy = yn->grad;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) xn->grad[r * cols + c0 + c] += gy[r * w + c];
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != rows) {
      throw std::invalid_argument("concat_cols: row mismatch at " + shape_str(p.shape()));
    }
    total += p.shape()[1];
    rg = rg || detail::tracing(p);
  }
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    const auto& pv = p.values();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * total + off + c] = pv[r * w + c];
    off += w;
  }
  Tensor<T> y = Tensor<T>::result({rows, total}, std::move(out), false, nullptr);
  if (rg) {
    std::vector<std::shared_ptr<TensorNode<T>>> pn;
    pn.reserve(parts.size());
    for (const auto& p : parts) pn.push_back(p.node_ptr());
    auto yn = y.node_ptr();
    detail::yn_attach(y, [pn, yn, rows, total]() {
      const auto& gy = yn->grad;
      std::size_t off2 = 0;
      for (const auto& n : pn) {
        const std::size_t w = n->shape[1];
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
              n->grad[r * w + c] += gy[r * total + off2 + c];
        }
        off2 += w;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax / reductions
// ---------------------------------------------------------------------------

// Softmax along `axis`; supports rank 1 (axis 0) and rank 2 (axis 0 or 1).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int r = static_cast<int>(x.rank());
  if (r < 1 || r > 2 || axis < 0 || axis >= r) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " invalid for shape " + shape_str(x.shape()));
  }
  // Normalize to row-softmax on an [R, C] view.
  const bool along_rows = (r == 1) || (axis == 1);
  const std::size_t R = (r == 1) ? 1 : (along_rows ? x.shape()[0] : x.shape()[1]);
  const std::size_t C = (r == 1) ? x.shape()[0] : (along_rows ? x.shape()[1] : x.shape()[0]);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  auto at = [r, along_rows, R, C](std::size_t grp, std::size_t i) -> std::size_t {
    if (r == 1) return i;
    return along_rows ? grp * C + i : i * R + grp;
  };
  for (std::size_t g = 0; g < R; ++g) {
    T mx = xv[at(g, 0)];
    for (std::size_t i = 1; i < C; ++i) mx = std::max(mx, xv[at(g, i)]);
    T sum = T(0);
    for (std::size_t i = 0; i < C; ++i) {
      const T e = std::exp(xv[at(g, i)] - mx);
      out[at(g, i)] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t i = 0; i < C; ++i) out[at(g, i)] *= inv;
  }
  Tensor<T> y = Tensor<T>::result(x.shape(), std::move(out), false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn, R, C, at]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const auto& yv = *yn->data;
      const auto& gy = yn->grad;
      for (std::size_t g = 0; g < R; ++g) {
        T dot = T(0);
        for (std::size_t i = 0; i < C; ++i) dot += gy[at(g, i)] * yv[at(g, i)];
        for (std::size_t i = 0; i < C; ++i) {
          xn->grad[at(g, i)] += yv[at(g, i)] * (gy[at(g, i)] - dot);
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  // Fixed left-to-right accumulation keeps results bit-reproducible.
  T s = T(0);
  for (T v : x.values()) s += v;
  Tensor<T> y = Tensor<T>::result({}, {s}, false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const T g = yn->grad[0];
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  T s = T(0);
  for (T v : x.values()) s += v;
  Tensor<T> y = Tensor<T>::result({}, {s * inv}, false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn, inv]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const T g = yn->grad[0] * inv;
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// fused layers
// ---------------------------------------------------------------------------

// Row-wise layer normalization of [S, D] with learned gain/bias [D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 ||
      gain.shape()[0] != x.shape()[1] || bias.shape()[0] != x.shape()[1]) {
    throw std::invalid_argument("layer_norm: want x[S,D], gain[D], bias[D]; got " +
                                shape_str(x.shape()) + ", " + shape_str(gain.shape()) +
                                ", " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * cols;
    T m = T(0);
    for (std::size_t c = 0; c < cols; ++c) m += xr[c];
    m /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = xr[c] - m;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (xr[c] - m) * is;
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  Tensor<T> y = Tensor<T>::result(x.shape(), std::move(out), false, nullptr);
  if (detail::tracing(x) || detail::tracing(gain) || detail::tracing(bias)) {
    auto xn = x.node_ptr();
    auto gn = gain.node_ptr();
    auto bn = bias.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, gn, bn, yn, xhat = std::move(xhat),
                          inv_std = std::move(inv_std), rows, cols]() {
      const auto& gy = yn->grad;
      const auto& gv2 = *gn->data;
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += gy[r * cols + c];
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            gn->grad[c] += gy[r * cols + c] * xhat[r * cols + c];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        const T invc = T(1) / static_cast<T>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_g = T(0), mean_gh = T(0);
          for (std::size_t c = 0; c < cols; ++c) {
            const T gg = gy[r * cols + c] * gv2[c];
            mean_g += gg;
            mean_gh += gg * xhat[r * cols + c];
          }
          mean_g *= invc;
          mean_gh *= invc;
          for (std::size_t c = 0; c < cols; ++c) {
            const T gg = gy[r * cols + c] * gv2[c];
            xn->grad[r * cols + c] +=
                (gg - mean_g - xhat[r * cols + c] * mean_gh) * inv_std[r];
          }
        }
      }
    });
  }
  return y;
}

// Inverted dropout with a persisted mask. The same op serves training and
// MC-dropout inference; rate 0 is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0,1), got " +
                                std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const auto& xv = x.values();
  std::vector<T> mask(xv.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = (rng.uniform() < rate) ? T(0) : keep_scale;
  }
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  Tensor<T> y = Tensor<T>::result(x.shape(), std::move(out), false, nullptr);
  if (detail::tracing(x)) {
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [xn, yn, mask = std::move(mask)]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const auto& gy = yn->grad;
      for (std::size_t i = 0; i < gy.size(); ++i) xn->grad[i] += gy[i] * mask[i];
    });
  }
  return y;
}

// Row gather from an embedding table [V, D] by token id.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw std::invalid_argument("embedding: table must be [V,D], got " +
                                shape_str(table.shape()));
  }
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  const auto& tv = table.values();
  std::vector<T> out(ids.size() * dim);
  for (std::size_t s = 0; s < ids.size(); ++s) {
    const T* row = tv.data() + static_cast<std::size_t>(ids[s]) * dim;
    std::copy(row, row + dim, out.begin() + s * dim);
  }
  Tensor<T> y = Tensor<T>::result({ids.size(), dim}, std::move(out), false, nullptr);
  if (detail::tracing(table)) {
    auto tn = table.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [tn, yn, ids, dim]() {
      if (!tn->requires_grad) return;
      tn->ensure_grad();
      const auto& gy = yn->grad;
      for (std::size_t s = 0; s < ids.size(); ++s) {
        T* grow = tn->grad.data() + static_cast<std::size_t>(ids[s]) * dim;
        const T* gr = gy.data() + s * dim;
        for (std::size_t c = 0; c < dim; ++c) grow[c] += gr[c];
      }
    });
  }
  return y;
}

// Mean token-level cross-entropy of logits [S, V] against integer targets.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || logits.shape()[0] != targets.size()) {
    throw std::invalid_argument("cross_entropy_mean: logits " + shape_str(logits.shape()) +
                                " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.shape()[0], vocab = logits.shape()[1];
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy_mean: target " + std::to_string(t) +
                              " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  const auto& lv = logits.values();
  std::vector<T> probs(lv.size());
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* lr = lv.data() + r * vocab;
    T mx = lr[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, lr[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < vocab; ++c) {
      const T e = std::exp(lr[c] - mx);
      probs[r * vocab + c] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] *= inv;
    loss -= std::log(probs[r * vocab + static_cast<std::size_t>(targets[r])]);
  }
  loss /= static_cast<T>(rows);
  Tensor<T> y = Tensor<T>::result({}, {loss}, false, nullptr);
  if (detail::tracing(logits)) {
    auto ln = logits.node_ptr();
    auto yn = y.node_ptr();
    detail::yn_attach(y, [ln, yn, probs = std::move(probs), targets, rows, vocab]() {
      if (!ln->requires_grad) return;
      ln->ensure_grad();
      const T g = yn->grad[0] / static_cast<T>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        T* gr = ln->grad.data() + r * vocab;
        const T* pr = probs.data() + r * vocab;
        for (std::size_t c = 0; c < vocab; ++c) gr[c] += g * pr[c];
        gr[static_cast<std::size_t>(targets[r])] -= g;
      }
    });
  }
  return y;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace probtf
