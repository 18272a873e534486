#pragma once

// Dense row-major tensors with a tape-free reverse-mode autodiff graph.
//
// Every op returns a new tensor node. When any input requires a gradient the
// node keeps its parents plus a closure that pushes its own gradient back into
// them; `backward()` walks the resulting DAG in reverse topological order.
// Tensors have reference semantics (copying a BasicTensor shares the node);
// use clone() for an independent copy.
//
// All reductions run in a fixed sequential order so results are bit-identical
// across runs. Every op checks its output for NaN/Inf and throws NumericError.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "laffi/errors.hpp"

namespace laffi {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  const char* op = "leaf";

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

namespace detail {

template <typename T>
void check_finite(std::span<const T> v, const char* where) {
  for (const T x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value in ") + where);
    }
  }
}

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    detail::check_finite<T>(values, "tensor construction");
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                            bool requires_grad = false) {
    return BasicTensor({rows, cols}, std::move(values), requires_grad);
  }

  static BasicTensor from_node(std::shared_ptr<Node> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() < 2 ? 1 : node_->shape[1]; }

  std::span<const T> data() const { return node_->data; }
  // Direct mutation is for leaves (optimizer updates, hand-set weights).
  std::span<T> mutable_data() { return node_->data; }

  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw UsageError("tensor has no gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Independent leaf with the same values and requires_grad flag.
  BasicTensor clone() const {
    BasicTensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Leaf sharing no graph history; never requires a gradient.
  BasicTensor detach() const {
    BasicTensor t = clone();
    t.node_->requires_grad = false;
    return t;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                           std::vector<NodePtr<T>> parents,
                           std::function<void(TensorNode<T>&)> backward_fn) {
  check_finite<T>(data, op);
  auto node = std::make_shared<TensorNode<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const auto& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <typename T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

// y[0..n) += a · x[0..n)
template <typename T>
inline void axpy(T* __restrict y, const T* __restrict x, T a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

// C[m×n] += A[m×k] · B[k×n]. Four rows of C at a time so each row of B is
// loaded once per block.
template <typename T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = c + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    const T* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* __restrict crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

// C[k×n] += Aᵀ · B, A is m×k, B is m×n
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<T> at = transposed(a, m, k);
  gemm_nn(at.data(), b, c, k, m, n);
}

// C[m×n] += A[m×k] · Bᵀ where B is n×k
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<T> bt = transposed(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {an, bn},
                                [an, bn, m, k, n](TensorNode<T>& self) {
                                  if (an->requires_grad)
                                    detail::gemm_nt(self.grad.data(), bn->data.data(),
                                                    an->ensure_grad().data(), m, n, k);
                                  if (bn->requires_grad)
                                    detail::gemm_tn(an->data.data(), self.grad.data(),
                                                    bn->ensure_grad().data(), m, k, n);
                                });
}

// a · bᵀ, with a m×k and b n×k.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("matmul_nt", {m, n}, std::move(out), {an, bn},
                                [an, bn, m, k, n](TensorNode<T>& self) {
                                  if (an->requires_grad)
                                    detail::gemm_nn(self.grad.data(), bn->data.data(),
                                                    an->ensure_grad().data(), m, n, k);
                                  if (bn->requires_grad)
                                    detail::gemm_tn(self.grad.data(), an->data.data(),
                                                    bn->ensure_grad().data(), m, n, k);
                                });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  auto an = a.node();
  return detail::make_result<T>("transpose", {c, r}, detail::transposed(a.data().data(), r, c),
                                {an}, [an, r, c](TensorNode<T>& self) {
                                  auto& g = an->ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                      g[i * c + j] += self.grad[j * r + i];
                                });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {an, bn},
                                [an, bn](TensorNode<T>& self) {
                                  for (auto* p : {an.get(), bn.get()}) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {an, bn},
                                [an, bn](TensorNode<T>& self) {
                                  if (an->requires_grad) {
                                    auto& g = an->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * bn->data[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& g = bn->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * an->data[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto an = a.node();
  return detail::make_result<T>("scale", a.shape(), std::move(out), {an},
                                [an, s](TensorNode<T>& self) {
                                  auto& g = an->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
                                });
}

// GELU, tanh approximation.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
  }
  auto an = a.node();
  return detail::make_result<T>("gelu", a.shape(), std::move(out), {an},
                                [an](TensorNode<T>& self) {
                                  auto& g = an->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T x = an->data[i];
                                    const T t = std::tanh(kC * (x + kA * x * x * x));
                                    const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * x * x);
                                    g[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
                                  }
                                });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  auto an = a.node();
  return detail::make_result<T>("sum", {1}, {acc}, {an}, [an](TensorNode<T>& self) {
    auto& g = an->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {an},
                                [an](TensorNode<T>& self) {
                                  auto& g = an->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

namespace detail {

template <typename T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T denom = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    denom += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= denom;
}

template <typename T>
void softmax_row_backward(const T* y, const T* dy, T* dx, std::size_t n) {
  T dot = T(0);
  for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
}

}  // namespace detail

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  detail::require_matrix(x, "softmax_rows");
  detail::check_finite(x.data(), "softmax_rows input");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < r; ++i) detail::softmax_row(x.data().data() + i * c, out.data() + i * c, c);
  auto xn = x.node();
  return detail::make_result<T>("softmax_rows", x.shape(), std::move(out), {xn},
                                [xn, r, c](TensorNode<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    detail::softmax_row_backward(self.data.data() + i * c,
                                                                 self.grad.data() + i * c,
                                                                 g.data() + i * c, c);
                                });
}

// Softmax of a square score matrix under a causal mask: row i only sees
// columns 0..i, and entries above the diagonal are exactly zero.
template <typename T>
BasicTensor<T> causal_softmax_rows(const BasicTensor<T>& x) {
  detail::require_matrix(x, "causal_softmax_rows");
  if (x.rows() != x.cols()) {
    throw DimensionError("causal_softmax_rows: expected square matrix, got " + shape_str(x.shape()));
  }
  detail::check_finite(x.data(), "causal_softmax_rows input");
  const std::size_t n = x.rows();
  std::vector<T> out(x.size(), T(0));
  for (std::size_t i = 0; i < n; ++i) detail::softmax_row(x.data().data() + i * n, out.data() + i * n, i + 1);
  auto xn = x.node();
  return detail::make_result<T>("causal_softmax_rows", x.shape(), std::move(out), {xn},
                                [xn, n](TensorNode<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < n; ++i)
                                    detail::softmax_row_backward(self.data.data() + i * n,
                                                                 self.grad.data() + i * n,
                                                                 g.data() + i * n, i + 1);
                                });
}

// Multi-head causal self-attention over column blocks of q, k and v (each
// T×d, head h owns columns [h·d/H, (h+1)·d/H)). Equivalent to
// concat_h(causal_softmax_rows(scale·q_h·k_hᵀ)·v_h) but never touches the
// masked upper triangle. When `probs` is non-null it receives the H×T×T
// post-softmax scores.
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                std::size_t n_heads, T scale, std::vector<T>* probs = nullptr) {
  detail::require_matrix(q, "causal_attention");
  detail::require_matrix(k, "causal_attention");
  detail::require_matrix(v, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("causal_attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()) + " differ");
  }
  const std::size_t t = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  // p holds the lower triangle of every head, row i at offset i(i+1)/2.
  const std::size_t tri = t * (t + 1) / 2;
  std::vector<T> p(n_heads * tri);
  std::vector<T> out(t * d, T(0));
  std::vector<T> kt(dh * t);
  const T* qd = q.data().data();
  const T* vd = v.data().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t j = 0; j < t; ++j)
      for (std::size_t c = 0; c < dh; ++c) kt[c * t + j] = k.data()[j * d + off + c];
    for (std::size_t i = 0; i < t; ++i) {
      T* row = p.data() + h * tri + i * (i + 1) / 2;
      const std::size_t n = i + 1;
      std::fill_n(row, n, T(0));
      for (std::size_t c = 0; c < dh; ++c) {
        const T qv = qd[i * d + off + c] * scale;
        detail::axpy(row, kt.data() + c * t, qv, n);
      }
      detail::softmax_row(row, row, n);
      T* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < n; ++j) detail::axpy(o, vd + j * d + off, row[j], dh);
    }
  }
  if (probs) {
    probs->assign(n_heads * t * t, T(0));
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        std::copy_n(p.data() + h * tri + i * (i + 1) / 2, i + 1, probs->data() + (h * t + i) * t);
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::make_result<T>(
      "causal_attention", {t, d}, std::move(out), {qn, kn, vn},
      [qn, kn, vn, t, d, dh, n_heads, tri, scale, p = std::move(p)](TensorNode<T>& self) {
        std::vector<T> qt(dh * t), vt(dh * t), dkt(dh * t), dvt(dh * t), dp(t);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t j = 0; j < t; ++j)
            for (std::size_t c = 0; c < dh; ++c) {
              qt[c * t + j] = qn->data[j * d + off + c];
              vt[c * t + j] = vn->data[j * d + off + c];
            }
          std::fill(dkt.begin(), dkt.end(), T(0));
          std::fill(dvt.begin(), dvt.end(), T(0));
          T* dq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
          for (std::size_t i = 0; i < t; ++i) {
            const T* row = p.data() + h * tri + i * (i + 1) / 2;
            const std::size_t n = i + 1;
            const T* go = self.grad.data() + i * d + off;
            std::fill_n(dp.data(), n, T(0));
            for (std::size_t c = 0; c < dh; ++c) {
              const T g = go[c];
              detail::axpy(dp.data(), vt.data() + c * t, g, n);
              detail::axpy(dvt.data() + c * t, row, g, n);
            }
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += dp[j] * row[j];
            for (std::size_t j = 0; j < n; ++j) dp[j] = row[j] * (dp[j] - dot) * scale;
            if (dq) {
              T* dqr = dq + i * d + off;
              for (std::size_t j = 0; j < n; ++j) detail::axpy(dqr, kn->data.data() + j * d + off, dp[j], dh);
            }
            for (std::size_t c = 0; c < dh; ++c) {
              const T qv = qt[c * t + i];
              detail::axpy(dkt.data() + c * t, dp.data(), qv, n);
            }
          }
          if (kn->requires_grad) {
            auto& g = kn->ensure_grad();
            for (std::size_t j = 0; j < t; ++j)
              for (std::size_t c = 0; c < dh; ++c) g[j * d + off + c] += dkt[c * t + j];
          }
          if (vn->requires_grad) {
            auto& g = vn->ensure_grad();
            for (std::size_t j = 0; j < t; ++j)
              for (std::size_t c = 0; c < dh; ++c) g[j * d + off + c] += dvt[c * t + j];
          }
        }
      });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t r = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width " + std::to_string(d));
  }
  if (!(eps > T(0))) throw UsageError("layer_norm: eps must be positive");
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * inv_std[i];
      out[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        const auto& dy = self.grad;
        if (gn->requires_grad) {
          auto& g = gn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j] * xhat[i * d + j];
        }
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j];
        }
        if (xn->requires_grad) {
          auto& g = xn->ensure_grad();
          std::vector<T> dxhat(d);
          for (std::size_t i = 0; i < r; ++i) {
            T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = dy[i * d + j] * gn->data[j];
              mean_dxhat += dxhat[j];
              mean_dxhat_xhat += dxhat[j] * xhat[i * d + j];
            }
            mean_dxhat /= T(d);
            mean_dxhat_xhat /= T(d);
            for (std::size_t j = 0; j < d; ++j)
              g[i * d + j] += inv_std[i] * (dxhat[j] - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const TokenId> ids) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t v = table.rows(), d = table.cols(), n = ids.size();
  std::vector<T> out(n * d);
  std::vector<TokenId> idx(ids.begin(), ids.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
      throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " out of range for " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(table.data().data() + idx[i] * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  return detail::make_result<T>("gather_rows", {n, d}, std::move(out), {tn},
                                [tn, d, idx = std::move(idx)](TensorNode<T>& self) {
                                  auto& g = tn->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j)
                                      g[idx[i] * d + j] += self.grad[i * d + j];
                                });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (start + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceed " + shape_str(x.shape()));
  }
  std::vector<T> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data().data() + i * c + start, count, out.data() + i * count);
  auto xn = x.node();
  return detail::make_result<T>("slice_cols", {r, count}, std::move(out), {xn},
                                [xn, r, c, start, count](TensorNode<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < count; ++j)
                                      g[i * c + start + j] += self.grad[i * count + j];
                                });
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t c = x.cols();
  if (start + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceed " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin() + start * c, x.data().begin() + (start + count) * c);
  auto xn = x.node();
  return detail::make_result<T>("slice_rows", {count, c}, std::move(out), {xn},
                                [xn, c, start](TensorNode<T>& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    g[start * c + i] += self.grad[i];
                                });
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row count mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<T> out(r * total);
  std::vector<detail::NodePtr<T>> nodes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data() + i * total + off);
    off += w;
    nodes.push_back(p.node());
  }
  return detail::make_result<T>("concat_cols", {r, total}, std::move(out), nodes,
                                [nodes, widths, r, total](TensorNode<T>& self) {
                                  std::size_t o = 0;
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    const std::size_t w = widths[k];
                                    if (nodes[k]->requires_grad) {
                                      auto& g = nodes[k]->ensure_grad();
                                      for (std::size_t i = 0; i < r; ++i)
                                        for (std::size_t j = 0; j < w; ++j)
                                          g[i * w + j] += self.grad[i * total + o + j];
                                    }
                                    o += w;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Loss

// Mean negative log-likelihood of `targets` over the positions where `mask`
// is non-zero. A fully masked input has loss 0 and contributes no gradient.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const TokenId> targets,
                             std::span<const std::uint8_t> mask) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n || mask.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for logits " +
                         shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw IndexError("cross_entropy: target id " + std::to_string(targets[i]) +
                       " out of range for vocabulary of " + std::to_string(v));
    }
    ++count;
  }
  std::vector<T> probs(n * v, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const T* row = logits.data().data() + i * v;
    detail::softmax_row(row, probs.data() + i * v, v);
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    total += (std::log(denom) + mx) - row[targets[i]];
  }
  const T loss = count ? total / T(count) : T(0);
  auto ln = logits.node();
  std::vector<TokenId> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::make_result<T>(
      "cross_entropy", {1}, {loss}, {ln},
      [ln, n, v, count, probs = std::move(probs), tg = std::move(tg),
       mk = std::move(mk)](TensorNode<T>& self) {
        auto& g = ln->ensure_grad();
        if (count == 0) return;
        const T s = self.grad[0] / T(count);
        for (std::size_t i = 0; i < n; ++i) {
          if (!mk[i]) continue;
          for (std::size_t j = 0; j < v; ++j) g[i * v + j] += s * probs[i * v + j];
          g[i * v + tg[i]] -= s;
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward: loss does not depend on any tensor that requires a gradient");
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
      for (const auto& p : node->parents)
        if (p->requires_grad && !p->grad.empty()) detail::check_finite<T>(p->grad, "gradient");
    }
  }
}

}  // namespace laffi
