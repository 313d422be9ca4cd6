#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Design:
//   * Tensor<T> is a shared handle to value + gradient storage. T is float
//     or double; training typically runs in float, gradient checks in double.
//   * Tape<T> records every primitive applied to tensors that require
//     gradients, in creation (topological) order. backward() replays the
//     adjoint of each primitive exactly once, in reverse, then clears the
//     tape. Leaf gradients accumulate until explicitly zeroed.
//   * Rank is 1 (vector, treated as a single row where a matrix is
//     expected) or 2 (matrix). Broadcasting is restricted to row vectors:
//     an m-by-n operand may combine with an n-vector, nothing else.
//
// One tape must only be mutated from one thread; independent tapes are
// independent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "sessrec/errors.hpp"
#include "sessrec/rng.hpp"

namespace sessrec {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  const char* op = "leaf";  // producing primitive, for diagnostics
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    for (auto d : shape)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
    Tensor t;
    t.p_ = std::make_shared<TensorImpl<T>>();
    t.p_->shape = std::move(shape);
    t.p_->value = std::move(data);
    return t;
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)));
  }

  static Tensor full(Shape shape, T v) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor vec(std::vector<T> data) {
    Shape s{static_cast<std::int64_t>(data.size())};
    return from(std::move(s), std::move(data));
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
    auto n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    Tensor t = from(std::move(shape), std::move(data));
    t.p_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(p_->value.size()); }

  // Rank-1 tensors act as a single row.
  std::int64_t rows() const { return rank() == 1 ? 1 : p_->shape[0]; }
  std::int64_t cols() const { return rank() == 1 ? p_->shape[0] : p_->shape[1]; }

  const std::vector<T>& value() const { return p_->value; }
  std::vector<T>& mut_value() { return p_->value; }
  T val(std::int64_t i) const { return p_->value[static_cast<std::size_t>(i)]; }
  T val(std::int64_t r, std::int64_t c) const {
    return p_->value[static_cast<std::size_t>(r * cols() + c)];
  }
  T item() const {
    if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
    return p_->value[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool rg) { p_->requires_grad = rg; }

  bool has_grad() const { return !p_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw ContractError("grad(): no gradient populated");
    return p_->grad;
  }
  void zero_grad() { p_->grad.assign(p_->value.size(), T(0)); }
  void clear_grad() { p_->grad.clear(); }

  const char* op() const { return p_->op; }

  std::shared_ptr<TensorImpl<T>> impl() const { return p_; }

 private:
  template <typename U>
  friend class Tape;
  std::shared_ptr<TensorImpl<T>> p_;
};

namespace detail {

// out(+)= op_a(A) * op_b(B). Raw dims are those of the stored buffers.
template <typename T>
void mm_acc(const T* a, std::int64_t ar, std::int64_t ac, bool ta, const T* b, std::int64_t br,
            std::int64_t bc, bool tb, T* out) {
  const std::int64_t m = ta ? ac : ar;
  const std::int64_t k = ta ? ar : ac;
  const std::int64_t n = tb ? br : bc;
  if (!ta && !tb) {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = a[i * ac + p];
        if (av == T(0)) continue;
        const T* brow = b + p * bc;
        T* orow = out + i * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  } else if (!ta && tb) {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        const T* arow = a + i * ac;
        const T* brow = b + j * bc;
        T acc = T(0);
        for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        out[i * n + j] += acc;
      }
  } else if (ta && !tb) {
    for (std::int64_t p = 0; p < k; ++p)
      for (std::int64_t i = 0; i < m; ++i) {
        const T av = a[p * ac + i];
        if (av == T(0)) continue;
        const T* brow = b + p * bc;
        T* orow = out + i * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  } else {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::int64_t p = 0; p < k; ++p) acc += a[p * ac + i] * b[j * bc + p];
        out[i * n + j] += acc;
      }
  }
}

template <typename T>
T* grad_acc(TensorImpl<T>& t) {
  if (t.grad.empty()) t.grad.assign(t.value.size(), T(0));
  return t.grad.data();
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace detail

template <typename T>
class Tape {
 public:
  // ---- recording control ------------------------------------------------

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Scans recorded outputs in creation order; returns the op tag of the
  // first tensor holding a non-finite value, or nullptr if all are finite.
  const char* first_nonfinite() const {
    for (const auto& n : nodes_)
      if (!detail::all_finite(n.out->value)) return n.out->op;
    return nullptr;
  }

  // ---- primitives ---------------------------------------------------------

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
    const std::int64_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    const std::int64_t m = ta ? ac : ar, k = ta ? ar : ac;
    const std::int64_t k2 = tb ? bc : br, n = tb ? br : bc;
    if (k != k2)
      throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                       (ta ? "^T" : "") + " vs " + shape_str(b.shape()) + (tb ? "^T" : ""));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::mm_acc(a.value().data(), ar, ac, ta, b.value().data(), br, bc, tb,
                   out.mut_value().data());
    finish(out, "matmul", {a, b}, [a, b, out, ta, tb, ar, ac, br, bc, m, n]() {
      const T* g = out.impl()->grad.data();
      if (a.requires_grad()) {
        T* ga = detail::grad_acc(*a.impl());
        if (!ta)  // dA = mm(dC, B, false, !tb)
          detail::mm_acc(g, m, n, false, b.value().data(), br, bc, !tb, ga);
        else  // dA = mm(B, dC, tb, true)
          detail::mm_acc(b.value().data(), br, bc, tb, g, m, n, true, ga);
      }
      if (b.requires_grad()) {
        T* gb = detail::grad_acc(*b.impl());
        if (!tb)  // dB = mm(A, dC, !ta, false)
          detail::mm_acc(a.value().data(), ar, ac, !ta, g, m, n, false, gb);
        else  // dB = mm(dC, A, true, ta)
          detail::mm_acc(g, m, n, true, a.value().data(), ar, ac, ta, gb);
      }
    });
    return out;
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::add); }
  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::sub); }
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::mul); }

  Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(x, "sigmoid", [](T v) { return stable_sigmoid(v); },
                 [](T v, T y) { (void)v; return y * (T(1) - y); });
  }

  Tensor<T> tanh(const Tensor<T>& x) {
    return unary(x, "tanh", [](T v) { return std::tanh(v); },
                 [](T v, T y) { (void)v; return T(1) - y * y; });
  }

  Tensor<T> relu(const Tensor<T>& x) {
    return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                 [](T v, T y) { (void)y; return v > T(0) ? T(1) : T(0); });
  }

  // log(max(x, eps)); the clamp keeps cross-entropy finite near 0 or 1.
  Tensor<T> log_clamped(const Tensor<T>& x, T eps = T(1e-12)) {
    return unary(x, "log", [eps](T v) { return std::log(std::max(v, eps)); },
                 [eps](T v, T y) { (void)y; return v > eps ? T(1) / v : T(0); });
  }

  Tensor<T> rsqrt(const Tensor<T>& x) {
    return unary(x, "rsqrt", [](T v) { return T(1) / std::sqrt(v); },
                 [](T v, T y) { (void)v; return T(-0.5) * y * y * y; });
  }

  Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
    return unary(x, "scalar_mul", [c](T v) { return c * v; },
                 [c](T, T) { return c; });
  }

  // Identity in the forward pass; scales the adjoint by s on the way back
  // (gradient-reversal style). Used to inject known-bad gradients when
  // exercising the gradient checker.
  Tensor<T> grad_scaled_identity(const Tensor<T>& x, T s) {
    return unary(x, "grad_scaled_identity", [](T v) { return v; },
                 [s](T, T) { return s; });
  }

  Tensor<T> scalar_add(const Tensor<T>& x, T c) {
    return unary(x, "scalar_add", [c](T v) { return v + c; },
                 [](T, T) { return T(1); });
  }

  // Row-wise softmax, stabilized by subtracting the row maximum.
  Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (!detail::all_finite(x.value()))
      throw NumericError("softmax_rows: input contains NaN or Inf");
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.value().data();
    T* ov = out.mut_value().data();
    for (std::int64_t i = 0; i < m; ++i) {
      const T* row = xv + i * n;
      T* orow = ov + i * n;
      T mx = row[0];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (std::int64_t j = 0; j < n; ++j) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      }
      for (std::int64_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    finish(out, "softmax_rows", {x}, [x, out, m, n]() {
      if (!x.requires_grad()) return;
      const T* g = out.impl()->grad.data();
      const T* y = out.value().data();
      T* gx = detail::grad_acc(*x.impl());
      for (std::int64_t i = 0; i < m; ++i) {
        T dot = T(0);
        for (std::int64_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::int64_t j = 0; j < n; ++j)
          gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
    return out;
  }

  // Per-column maximum over rows: m-by-n -> n-vector.
  // Gradient routes to the first maximal row in each column.
  Tensor<T> max_reduce_rows(const Tensor<T>& x) {
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros({n});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(n), 0);
    const T* xv = x.value().data();
    for (std::int64_t j = 0; j < n; ++j) {
      T best = xv[j];
      std::int64_t bi = 0;
      for (std::int64_t i = 1; i < m; ++i)
        if (xv[i * n + j] > best) {
          best = xv[i * n + j];
          bi = i;
        }
      out.mut_value()[static_cast<std::size_t>(j)] = best;
      argmax[static_cast<std::size_t>(j)] = bi;
    }
    finish(out, "max_reduce_rows", {x}, [x, out, argmax, n]() {
      if (!x.requires_grad()) return;
      const T* g = out.impl()->grad.data();
      T* gx = detail::grad_acc(*x.impl());
      for (std::int64_t j = 0; j < n; ++j)
        gx[argmax[static_cast<std::size_t>(j)] * n + j] += g[j];
    });
    return out;
  }

  Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.value()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    finish(out, "sum_all", {x}, [x, out]() {
      if (!x.requires_grad()) return;
      const T g = out.impl()->grad[0];
      T* gx = detail::grad_acc(*x.impl());
      for (std::size_t i = 0; i < x.value().size(); ++i) gx[i] += g;
    });
    return out;
  }

  // Column sums: m-by-n -> n-vector.
  Tensor<T> sum_rows(const Tensor<T>& x) {
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor<T> out = Tensor<T>::zeros({n});
    const T* xv = x.value().data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) out.mut_value()[static_cast<std::size_t>(j)] += xv[i * n + j];
    finish(out, "sum_rows", {x}, [x, out, m, n]() {
      if (!x.requires_grad()) return;
      const T* g = out.impl()->grad.data();
      T* gx = detail::grad_acc(*x.impl());
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) gx[i * n + j] += g[j];
    });
    return out;
  }

  Tensor<T> mean_rows(const Tensor<T>& x) {
    return scalar_mul(sum_rows(x), T(1) / static_cast<T>(x.rows()));
  }

  // Select rows by index (repetition allowed); gradient scatter-adds.
  Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::int32_t> idx) {
    if (x.rank() != 2) throw ShapeError("gather_rows: need rank-2 input, got " + shape_str(x.shape()));
    if (idx.empty()) throw ContractError("gather_rows: empty index list");
    const std::int64_t n = x.rows(), c = x.cols();
    for (auto i : idx)
      if (i < 0 || i >= n)
        throw ContractError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                            std::to_string(n) + ")");
    const std::int64_t k = static_cast<std::int64_t>(idx.size());
    Tensor<T> out = Tensor<T>::zeros({k, c});
    const T* xv = x.value().data();
    for (std::int64_t r = 0; r < k; ++r)
      std::copy_n(xv + static_cast<std::int64_t>(idx[static_cast<std::size_t>(r)]) * c, c,
                  out.mut_value().data() + r * c);
    finish(out, "gather_rows", {x}, [x, out, idx = std::move(idx), c]() {
      if (!x.requires_grad()) return;
      const T* g = out.impl()->grad.data();
      T* gx = detail::grad_acc(*x.impl());
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::int64_t j = 0; j < c; ++j)
          gx[static_cast<std::int64_t>(idx[r]) * c + j] += g[static_cast<std::int64_t>(r) * c + j];
    });
    return out;
  }

  // Tile a row vector m times; gradient is the column-wise sum.
  Tensor<T> repeat_rows(const Tensor<T>& x, std::int64_t m) {
    if (x.rows() != 1) throw ShapeError("repeat_rows: need a row vector, got " + shape_str(x.shape()));
    if (m < 1) throw ContractError("repeat_rows: m must be >= 1");
    const std::int64_t n = x.cols();
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (std::int64_t i = 0; i < m; ++i)
      std::copy_n(x.value().data(), n, out.mut_value().data() + i * n);
    finish(out, "repeat_rows", {x}, [x, out, m, n]() {
      if (!x.requires_grad()) return;
      const T* g = out.impl()->grad.data();
      T* gx = detail::grad_acc(*x.impl());
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) gx[j] += g[i * n + j];
    });
    return out;
  }

  Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rows() != b.rows())
      throw ShapeError("concat_cols: row counts disagree, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const std::int64_t m = a.rows(), ca = a.cols(), cb = b.cols();
    Tensor<T> out = Tensor<T>::zeros({m, ca + cb});
    for (std::int64_t i = 0; i < m; ++i) {
      std::copy_n(a.value().data() + i * ca, ca, out.mut_value().data() + i * (ca + cb));
      std::copy_n(b.value().data() + i * cb, cb, out.mut_value().data() + i * (ca + cb) + ca);
    }
    finish(out, "concat_cols", {a, b}, [a, b, out, m, ca, cb]() {
      const T* g = out.impl()->grad.data();
      if (a.requires_grad()) {
        T* ga = detail::grad_acc(*a.impl());
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
      }
      if (b.requires_grad()) {
        T* gb = detail::grad_acc(*b.impl());
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
      }
    });
    return out;
  }

  Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::int64_t n = parts[0].cols();
    std::int64_t m = 0;
    for (const auto& p : parts) {
      if (p.cols() != n)
        throw ShapeError("concat_rows: column counts disagree, " + shape_str(parts[0].shape()) +
                         " vs " + shape_str(p.shape()));
      m += p.rows();
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    std::int64_t r = 0;
    for (const auto& p : parts) {
      std::copy_n(p.value().data(), p.rows() * n, out.mut_value().data() + r * n);
      r += p.rows();
    }
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    finish_any(out, "concat_rows", rg, [parts, out, n]() {
      const T* g = out.impl()->grad.data();
      std::int64_t r = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          T* gp = detail::grad_acc(*p.impl());
          for (std::int64_t i = 0; i < p.rows() * n; ++i) gp[i] += g[r * n + i];
        }
        r += p.rows();
      }
    });
    return out;
  }

  // ---- backward -----------------------------------------------------------

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (nodes_.empty()) throw ContractError("backward: tape is empty");
    loss.impl()->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // nothing flowed into this node
      it->back();
    }
    nodes_.clear();
  }

 private:
  enum class BinOp { add, sub, mul };
  enum class Bcast { same, row_b, row_a };

  struct Node {
    std::shared_ptr<TensorImpl<T>> out;
    std::function<void()> back;
  };

  static T stable_sigmoid(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  }

  static Bcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::same;  // {n} vs {1,n}
    if (b.rows() == 1 && a.cols() == b.cols()) return Bcast::row_b;
    if (a.rows() == 1 && a.cols() == b.cols()) return Bcast::row_a;
    throw ShapeError("elementwise: shapes not broadcastable, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }

  Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
    const Bcast bc = broadcast_kind(a, b);
    const Tensor<T>& big = (bc == Bcast::row_a) ? b : a;
    const std::int64_t m = big.rows(), n = big.cols();
    Tensor<T> out = Tensor<T>::zeros(big.shape());
    const T* av = a.value().data();
    const T* bv = b.value().data();
    T* ov = out.mut_value().data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        const T x = (bc == Bcast::row_a) ? av[j] : av[i * n + j];
        const T y = (bc == Bcast::row_b) ? bv[j] : bv[i * n + j];
        ov[i * n + j] = op == BinOp::add ? x + y : op == BinOp::sub ? x - y : x * y;
      }
    const char* tag = op == BinOp::add ? "add" : op == BinOp::sub ? "sub" : "mul";
    finish(out, tag, {a, b}, [a, b, out, op, bc, m, n]() {
      const T* g = out.impl()->grad.data();
      const T* av = a.value().data();
      const T* bv = b.value().data();
      if (a.requires_grad()) {
        T* ga = detail::grad_acc(*a.impl());
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) {
            T d = g[i * n + j];
            if (op == BinOp::mul) d *= (bc == Bcast::row_b) ? bv[j] : bv[i * n + j];
            if (bc == Bcast::row_a)
              ga[j] += d;
            else
              ga[i * n + j] += d;
          }
      }
      if (b.requires_grad()) {
        T* gb = detail::grad_acc(*b.impl());
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) {
            T d = g[i * n + j];
            if (op == BinOp::sub) d = -d;
            if (op == BinOp::mul) d = g[i * n + j] * ((bc == Bcast::row_a) ? av[j] : av[i * n + j]);
            if (bc == Bcast::row_b)
              gb[j] += d;
            else
              gb[i * n + j] += d;
          }
      }
    });
    return out;
  }

  template <typename F, typename DF>
  Tensor<T> unary(const Tensor<T>& x, const char* tag, F f, DF df) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < x.value().size(); ++i) out.mut_value()[i] = f(x.value()[i]);
    finish(out, tag, {x}, [x, out, df]() {
      if (!x.requires_grad()) return;
      const T* g = out.impl()->grad.data();
      T* gx = detail::grad_acc(*x.impl());
      for (std::size_t i = 0; i < x.value().size(); ++i)
        gx[i] += g[i] * df(x.value()[i], out.value()[i]);
    });
    return out;
  }

  void finish(Tensor<T>& out, const char* tag, std::initializer_list<Tensor<T>> inputs,
              std::function<void()> back) {
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    finish_any(out, tag, rg, std::move(back));
  }

  void finish_any(Tensor<T>& out, const char* tag, bool rg, std::function<void()> back) {
    out.impl()->op = tag;
    out.impl()->requires_grad = rg;
    if (recording_ && rg) nodes_.push_back(Node{out.impl(), std::move(back)});
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
};

}  // namespace sessrec
