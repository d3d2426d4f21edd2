// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense-tensor engine with reverse-mode differentiation.
// Tensors are 64-bit, row-major, value-semantic handles to refcounted nodes.
// A computation graph is recorded per forward pass whenever an input requires
// gradients and is torn down by backward().

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#ifndef MLKD_NO_BLAS
extern "C" {
void cblas_dgemm(int order, int transA, int transB, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta, double* c,
                 int ldc);
void openblas_set_num_threads(int);
}
#endif

namespace mlkd {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

// C(m x n) = alpha * op(A) op(B) + beta * C, row-major.
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
#ifndef MLKD_NO_BLAS
  // CblasRowMajor=101, CblasNoTrans=111, CblasTrans=112
  cblas_dgemm(101, ta ? 112 : 111, tb ? 112 : 111, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
#else
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        double av = ta ? a[p * lda + i] : a[i * lda + p];
        double bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
#endif
}

inline void pin_blas_threads() {
#ifndef MLKD_NO_BLAS
  // Keeps dgemm accumulation order fixed regardless of machine core count.
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  bool frozen = false;  // leaf only: backward skips accumulation into it
  bool backward_done = false;

  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;  // pulls this->grad, pushes into parents

  bool is_leaf() const { return parents.empty(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, 0.0, requires_grad);
  }

  static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data.assign(static_cast<size_t>(shape_numel(shape)), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor::from_data: " + std::to_string(data.size()) +
                                  " values do not fill shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  double operator[](size_t i) const { return node_->data[i]; }

  double item() const {
    if (numel() != 1)
      throw std::invalid_argument("Tensor::item on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool frozen() const { return node_->frozen; }
  void set_frozen(bool f) { node_->frozen = f; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // A constant copy, cut off from the graph.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->data = node_->data;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// Builds the result node and records the op when any input requires grad.
// `bw` receives the finished output node; it must read out.grad and add into
// each parent's grad (allocating via ensure_grad) for parents that take grads.
inline Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> bw) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    TensorNode* raw = n.get();
    n->backprop = [raw, f = std::move(bw)]() { f(*raw); };
  }
  return Tensor(std::move(n));
}

inline bool wants_grad(const std::shared_ptr<TensorNode>& p) {
  return p->requires_grad && !(p->is_leaf() && p->frozen);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
    for (int s = 0; s < 2; ++s) {
      auto& p = o.parents[static_cast<size_t>(s)];
      if (!detail::wants_grad(p)) continue;
      p->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
    if (detail::wants_grad(o.parents[0])) {
      o.parents[0]->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i] += o.grad[i];
    }
    if (detail::wants_grad(o.parents[1])) {
      o.parents[1]->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) o.parents[1]->grad[i] -= o.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    if (detail::wants_grad(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * pb->data[i];
    }
    if (detail::wants_grad(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += o.grad[i] * pa->data[i];
    }
  });
}

inline Tensor scalar_mul(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return detail::make_op(a.shape(), std::move(out), {a}, [c](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += c * o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// unary maps

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_op(a.shape(), std::move(out), {a}, [](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i)
      if (p->data[i] > 0.0) p->grad[i] += o.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return detail::make_op(a.shape(), std::move(out), {a}, [](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      double y = o.data[i];
      p->grad[i] += o.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) v = std::exp(v);
  return detail::make_op(a.shape(), std::move(out), {a}, [](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i] * o.data[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) {
    if (v <= 0.0)
      throw std::domain_error("log: input must be strictly positive, got " + std::to_string(v));
    v = std::log(v);
  }
  return detail::make_op(a.shape(), std::move(out), {a}, [](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i] / p->data[i];
  });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  return detail::make_op(shape, a.data(), {a}, [](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p->grad[i] += o.grad[i];
  });
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("slice: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(s));
  if (start < 0 || len <= 0 || start + len > s[static_cast<size_t>(axis)])
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(s));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  const int alen = s[static_cast<size_t>(axis)];
  Shape oshape = s;
  oshape[static_cast<size_t>(axis)] = len;
  std::vector<double> out(static_cast<size_t>(outer * len * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int j = 0; j < len; ++j)
      std::copy_n(a.data().begin() + (o * alen + start + j) * inner, inner,
                  out.begin() + (o * len + j) * inner);
  return detail::make_op(std::move(oshape), std::move(out), {a},
                         [outer, inner, alen, start, len](TensorNode& o) {
                           auto& p = o.parents[0];
                           if (!detail::wants_grad(p)) return;
                           p->ensure_grad();
                           for (int64_t ot = 0; ot < outer; ++ot)
                             for (int j = 0; j < len; ++j) {
                               const double* g = o.grad.data() + (ot * len + j) * inner;
                               double* pg = p->grad.data() + (ot * alen + start + j) * inner;
                               for (int64_t i = 0; i < inner; ++i) pg[i] += g[i];
                             }
                         });
}

// ---------------------------------------------------------------------------
// reductions and losses

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return detail::make_op({1}, {acc}, {a}, [](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return detail::make_op({1}, {acc * inv}, {a}, [inv](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += o.grad[0] * inv;
  });
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mse", a, b);
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return detail::make_op({1}, {acc * inv}, {a, b}, [inv](TensorNode& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    const double c = 2.0 * inv * o.grad[0];
    if (detail::wants_grad(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += c * (pa->data[i] - pb->data[i]);
    }
    if (detail::wants_grad(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < pb->grad.size(); ++i) pb->grad[i] -= c * (pa->data[i] - pb->data[i]);
    }
  });
}

// Elementwise smooth-L1 (Huber, delta = 1) averaged over all elements.
inline Tensor smooth_l1(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("smooth_l1", a, b);
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) {
    double d = a[i] - b[i];
    double ad = std::abs(d);
    acc += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  return detail::make_op({1}, {acc * inv}, {a, b}, [inv](TensorNode& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    const double c = inv * o.grad[0];
    for (size_t i = 0; i < pa->data.size(); ++i) {
      double d = pa->data[i] - pb->data[i];
      double g = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
      if (detail::wants_grad(pa)) {
        pa->ensure_grad();
        pa->grad[i] += c * g;
      }
      if (detail::wants_grad(pb)) {
        pb->ensure_grad();
        pb->grad[i] -= c * g;
      }
    }
  });
}

inline constexpr double kKlQFloor = 1e-12;

// Elementwise Huber map (delta = 1), no reduction; lets callers weight or
// mask positions before reducing.
inline Tensor smooth_l1_map(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("smooth_l1_map", a, b);
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double d = a[i] - b[i];
    double ad = std::abs(d);
    out[i] = ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    if (detail::wants_grad(pa)) pa->ensure_grad();
    if (detail::wants_grad(pb)) pb->ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      double d = pa->data[i] - pb->data[i];
      double g = o.grad[i] * (std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0));
      if (detail::wants_grad(pa)) pa->grad[i] += g;
      if (detail::wants_grad(pb)) pb->grad[i] -= g;
    }
  });
}

// KL(p || q) = sum_i p_i (log p_i - log q_i), summed over all elements.
// q is clamped below at 1e-12; zero p entries contribute nothing.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  detail::check_same_shape("kl_divergence", p, q);
  double acc = 0.0;
  for (size_t i = 0; i < p.data().size(); ++i) {
    double pi = p[i];
    if (pi <= 0.0) continue;
    acc += pi * (std::log(pi) - std::log(std::max(q[i], kKlQFloor)));
  }
  return detail::make_op({1}, {acc}, {p, q}, [](TensorNode& o) {
    auto& pp = o.parents[0];
    auto& pq = o.parents[1];
    const double g = o.grad[0];
    for (size_t i = 0; i < pp->data.size(); ++i) {
      double pi = pp->data[i];
      double qi = pq->data[i];
      if (detail::wants_grad(pp) && pi > 0.0) {
        pp->ensure_grad();
        pp->grad[i] += g * (std::log(pi) - std::log(std::max(qi, kKlQFloor)) + 1.0);
      }
      if (detail::wants_grad(pq) && pi > 0.0 && qi > kKlQFloor) {
        pq->ensure_grad();
        pq->grad[i] -= g * pi / qi;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// softmax with distillation temperature

inline Tensor softmax(const Tensor& a, int axis, double tau = 1.0) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(s));
  if (!(tau > 0.0))
    throw std::domain_error("softmax: temperature must be positive, got " + std::to_string(tau));
  int64_t outer = 1, inner = 1;
  const int len = s[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<double> out(a.data().size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < len; ++j) mx = std::max(mx, a[static_cast<size_t>(base + j * inner)]);
      double z = 0.0;
      for (int j = 0; j < len; ++j) {
        double e = std::exp((a[static_cast<size_t>(base + j * inner)] - mx) / tau);
        out[static_cast<size_t>(base + j * inner)] = e;
        z += e;
      }
      for (int j = 0; j < len; ++j) out[static_cast<size_t>(base + j * inner)] /= z;
    }
  }
  return detail::make_op(s, std::move(out), {a}, [outer, inner, len, tau](TensorNode& o) {
    auto& p = o.parents[0];
    if (!detail::wants_grad(p)) return;
    p->ensure_grad();
    for (int64_t ot = 0; ot < outer; ++ot) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = ot * len * inner + in;
        double dot = 0.0;
        for (int j = 0; j < len; ++j) {
          size_t idx = static_cast<size_t>(base + j * inner);
          dot += o.grad[idx] * o.data[idx];
        }
        for (int j = 0; j < len; ++j) {
          size_t idx = static_cast<size_t>(base + j * inner);
          p->grad[idx] += o.data[idx] * (o.grad[idx] - dot) / tau;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// matmul / conv2d / depthwise cross-correlation

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  detail::pin_blas_threads();
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<size_t>(m) * static_cast<size_t>(n), 0.0);
  detail::gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0, out.data(),
               n);
  return detail::make_op({m, n}, std::move(out), {a, b}, [m, n, k](TensorNode& o) {
    auto& pa = o.parents[0];
    auto& pb = o.parents[1];
    if (detail::wants_grad(pa)) {
      pa->ensure_grad();  // dA = dC * B^T
      detail::gemm(false, true, m, k, n, 1.0, o.grad.data(), n, pb->data.data(), n, 1.0,
                   pa->grad.data(), k);
    }
    if (detail::wants_grad(pb)) {
      pb->ensure_grad();  // dB = A^T * dC
      detail::gemm(true, false, k, n, m, 1.0, pa->data.data(), k, o.grad.data(), n, 1.0,
                   pb->grad.data(), n);
    }
  });
}

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// x: Ci x H x W  ->  cols: (Ci*k*k) x (Ho*Wo)
inline void im2col(const double* x, int ci, int h, int w, int k, int stride, int pad, int ho,
                   int wo, double* cols) {
  const int64_t plane = static_cast<int64_t>(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((static_cast<int64_t>(c) * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill_n(row + static_cast<int64_t>(oy) * wo, wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<int64_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[static_cast<int64_t>(oy) * wo + ox] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, int ci, int h, int w, int k, int stride, int pad,
                       int ho, int wo, double* x) {
  const int64_t plane = static_cast<int64_t>(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((static_cast<int64_t>(c) * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (static_cast<int64_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[static_cast<int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: Ci x H x W, w: Co x Ci x k x k, b: Co (or undefined for no bias).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4 || x.shape()[0] != w.shape()[1] ||
      w.shape()[2] != w.shape()[3])
    throw std::invalid_argument("conv2d: incompatible shapes input " + shape_str(x.shape()) +
                                " vs weight " + shape_str(w.shape()));
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != w.shape()[0]))
    throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape()) +
                                " does not match weight " + shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  detail::pin_blas_threads();

  const int ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int co = w.shape()[0], k = w.shape()[2];
  const int ho = detail::conv_out_dim(h, k, stride, pad);
  const int wo = detail::conv_out_dim(wd, k, stride, pad);
  if (ho <= 0 || wo <= 0)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(k) + " larger than input " +
                                shape_str(x.shape()));

  const int kk = ci * k * k;
  const int64_t plane = static_cast<int64_t>(ho) * wo;
  auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(kk) * plane);
  detail::im2col(x.data().data(), ci, h, wd, k, stride, pad, ho, wo, cols->data());

  std::vector<double> out(static_cast<size_t>(co) * plane, 0.0);
  detail::gemm(false, false, co, static_cast<int>(plane), kk, 1.0, w.data().data(), kk,
               cols->data(), static_cast<int>(plane), 0.0, out.data(), static_cast<int>(plane));
  if (b.defined())
    for (int c = 0; c < co; ++c) {
      const double bias = b[static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) out[static_cast<size_t>(c * plane + i)] += bias;
    }

  std::vector<Tensor> inputs = b.defined() ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
  return detail::make_op(
      {co, ho, wo}, std::move(out), std::move(inputs),
      [cols, ci, h, wd, k, stride, pad, ho, wo, co, kk, plane](TensorNode& o) {
        auto& px = o.parents[0];
        auto& pw = o.parents[1];
        if (detail::wants_grad(pw)) {
          pw->ensure_grad();  // dW = dY * cols^T
          detail::gemm(false, true, co, kk, static_cast<int>(plane), 1.0, o.grad.data(),
                       static_cast<int>(plane), cols->data(), static_cast<int>(plane), 1.0,
                       pw->grad.data(), kk);
        }
        if (o.parents.size() > 2 && detail::wants_grad(o.parents[2])) {
          auto& pb = o.parents[2];
          pb->ensure_grad();
          for (int c = 0; c < co; ++c) {
            double acc = 0.0;
            for (int64_t i = 0; i < plane; ++i) acc += o.grad[static_cast<size_t>(c * plane + i)];
            pb->grad[static_cast<size_t>(c)] += acc;
          }
        }
        if (detail::wants_grad(px)) {
          px->ensure_grad();  // dX = col2im(W^T * dY)
          std::vector<double> dcols(static_cast<size_t>(kk) * plane, 0.0);
          detail::gemm(true, false, kk, static_cast<int>(plane), co, 1.0, pw->data.data(), kk,
                       o.grad.data(), static_cast<int>(plane), 0.0, dcols.data(),
                       static_cast<int>(plane));
          detail::col2im_add(dcols.data(), ci, h, wd, k, stride, pad, ho, wo, px->grad.data());
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// Sliding inner product of a template against a search map, per channel.
// t: C x Ht x Wt, s: C x Hs x Ws  ->  C x (Hs-Ht+1) x (Ws-Wt+1)
inline Tensor depthwise_xcorr(const Tensor& t, const Tensor& s) {
  if (t.shape().size() != 3 || s.shape().size() != 3 || t.shape()[0] != s.shape()[0] ||
      t.shape()[1] > s.shape()[1] || t.shape()[2] > s.shape()[2])
    throw std::invalid_argument("depthwise_xcorr: incompatible shapes template " +
                                shape_str(t.shape()) + " vs search " + shape_str(s.shape()));
  const int c = t.shape()[0], ht = t.shape()[1], wt = t.shape()[2];
  const int hs = s.shape()[1], ws = s.shape()[2];
  const int ho = hs - ht + 1, wo = ws - wt + 1;

  std::vector<double> out(static_cast<size_t>(c) * ho * wo, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double* tp = t.data().data() + static_cast<int64_t>(ch) * ht * wt;
    const double* sp = s.data().data() + static_cast<int64_t>(ch) * hs * ws;
    double* op = out.data() + static_cast<int64_t>(ch) * ho * wo;
    for (int oy = 0; oy < ho; ++oy)
      for (int ky = 0; ky < ht; ++ky) {
        const double* srow = sp + static_cast<int64_t>(oy + ky) * ws;
        const double* trow = tp + static_cast<int64_t>(ky) * wt;
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int kx = 0; kx < wt; ++kx) acc += trow[kx] * srow[ox + kx];
          op[static_cast<int64_t>(oy) * wo + ox] += acc;
        }
      }
  }
  return detail::make_op(
      {c, ho, wo}, std::move(out), {t, s}, [c, ht, wt, hs, ws, ho, wo](TensorNode& o) {
        auto& pt = o.parents[0];
        auto& ps = o.parents[1];
        if (detail::wants_grad(pt)) pt->ensure_grad();
        if (detail::wants_grad(ps)) ps->ensure_grad();
        const bool gt = detail::wants_grad(pt), gs = detail::wants_grad(ps);
        if (!gt && !gs) return;
        for (int ch = 0; ch < c; ++ch) {
          const double* tp = pt->data.data() + static_cast<int64_t>(ch) * ht * wt;
          const double* sp = ps->data.data() + static_cast<int64_t>(ch) * hs * ws;
          const double* gp = o.grad.data() + static_cast<int64_t>(ch) * ho * wo;
          double* gtp = gt ? pt->grad.data() + static_cast<int64_t>(ch) * ht * wt : nullptr;
          double* gsp = gs ? ps->grad.data() + static_cast<int64_t>(ch) * hs * ws : nullptr;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const double g = gp[static_cast<int64_t>(oy) * wo + ox];
              if (g == 0.0) continue;
              for (int ky = 0; ky < ht; ++ky)
                for (int kx = 0; kx < wt; ++kx) {
                  if (gt)
                    gtp[static_cast<int64_t>(ky) * wt + kx] +=
                        g * sp[static_cast<int64_t>(oy + ky) * ws + ox + kx];
                  if (gs)
                    gsp[static_cast<int64_t>(oy + ky) * ws + ox + kx] +=
                        g * tp[static_cast<int64_t>(ky) * wt + kx];
                }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// backward

// Populates grad on every reachable leaf that takes gradients, then discards
// the recorded graph. Calling it twice on the same loss is an error.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (root->backward_done)
    throw std::logic_error("backward: graph already consumed; rebuild the forward pass first");
  root->backward_done = true;
  if (!root->requires_grad) return;  // constant loss: nothing reachable

  // reverse post-order over the recorded graph
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->backward_done)
        throw std::logic_error(
            "backward: graph already consumed; rebuild the forward pass first");
      if (p->backprop && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->grad.empty()) continue;  // no contribution reached this node
    if (n->backprop) n->backprop();
  }
  // free the tape; interior activations die with their last handle
  for (TensorNode* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
    n->backward_done = true;
    if (n != root.get()) n->grad.clear();
  }
}

}  // namespace mlkd
