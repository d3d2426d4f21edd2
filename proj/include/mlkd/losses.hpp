// SPDX-License-Identifier: Apache-2.0
//
// Distillation and supervision losses over score/regression/correlation
// maps. Teacher-side inputs are detached inside each loss, so no gradient
// can reach the teacher regardless of how callers wire the graph.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlkd/geometry.hpp"
#include "mlkd/tensor.hpp"
#include "mlkd/tracker.hpp"

namespace mlkd {

struct LossWeights {
  double lambda1 = 1.0;    // hard supervision
  double lambda2 = 1000.0; // KD on score/regression logits
  double lambda3 = 0.2;    // correlation loss
  double lambda4 = 20.0;   // mutual-learning loss
  double tau = 4.0;
  bool kl_tau_squared = true;
  double soft_binarize_beta = 50.0;
};

namespace detail {

inline void check_loss_shapes(const char* op, const Tensor& s, const Tensor& t) {
  if (s.shape() != t.shape())
    throw std::invalid_argument(std::string(op) + ": student/teacher shape mismatch " +
                                shape_str(s.shape()) + " vs " + shape_str(t.shape()));
  if (s.shape().size() != 3)
    throw std::invalid_argument(std::string(op) + ": expected [CxHxW] maps, got " +
                                shape_str(s.shape()));
}

}  // namespace detail

// Per-position class distributions at temperature tau; KL(teacher || student)
// averaged over positions, scaled by tau^2 when requested (the classic
// gradient-magnitude compensation).
inline Tensor loss_kdc(const Tensor& c_s, const Tensor& c_t, double tau,
                       bool tau_squared = true) {
  detail::check_loss_shapes("loss_kdc", c_s, c_t);
  if (c_s.shape()[0] != 2)
    throw std::invalid_argument("loss_kdc: score maps need 2 class channels, got " +
                                shape_str(c_s.shape()));
  const double positions = static_cast<double>(c_s.shape()[1]) * c_s.shape()[2];
  Tensor p = softmax(c_t.detach(), 0, tau);
  Tensor q = softmax(c_s, 0, tau);
  double scale = 1.0 / positions;
  if (tau_squared) scale *= tau * tau;
  return scalar_mul(kl_divergence(p, q), scale);
}

// Each regression channel softened over the flattened spatial axis;
// KL(teacher || student) averaged over channels.
inline Tensor loss_kdr(const Tensor& r_s, const Tensor& r_t, double tau) {
  detail::check_loss_shapes("loss_kdr", r_s, r_t);
  const int c = r_s.shape()[0];
  const int hw = r_s.shape()[1] * r_s.shape()[2];
  Tensor p = softmax(reshape(r_t.detach(), {c, hw}), 1, tau);
  Tensor q = softmax(reshape(r_s, {c, hw}), 1, tau);
  return scalar_mul(kl_divergence(p, q), 1.0 / c);
}

inline Tensor loss_crl_l2(const Tensor& c_s, const Tensor& c_t) {
  detail::check_loss_shapes("loss_crl_l2", c_s, c_t);
  return mse(c_s, c_t.detach());
}

namespace detail {

// 4-neighbor grid Laplacian (degree on the diagonal, -1 per in-grid
// neighbor). Row i of P * L is N(i) = sum over neighbors of (P_i - P_nb).
inline Tensor grid_laplacian(int h, int w) {
  const int m = h * w;
  std::vector<double> l(static_cast<size_t>(m) * m, 0.0);
  auto idx = [w](int y, int x) { return y * w + x; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int i = idx(y, x);
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (auto& n : nb) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        l[static_cast<size_t>(i) * m + i] += 1.0;
        l[static_cast<size_t>(i) * m + idx(n[0], n[1])] -= 1.0;
      }
    }
  return Tensor::from_data({m, m}, std::move(l));
}

}  // namespace detail

// Spatial-consistency loss: per channel, softmax the flattened map, take each
// pixel's summed gap to its 4 in-grid neighbors, and penalize the squared
// difference of those gap fields, averaged over pixels and channels.
inline Tensor loss_crl_spatial(const Tensor& c_s, const Tensor& c_t) {
  detail::check_loss_shapes("loss_crl_spatial", c_s, c_t);
  const int c = c_s.shape()[0], h = c_s.shape()[1], w = c_s.shape()[2];
  Tensor lap = detail::grid_laplacian(h, w);  // symmetric, so P*L needs no transpose
  Tensor ns = matmul(softmax(reshape(c_s, {c, h * w}), 1, 1.0), lap);
  Tensor nt = matmul(softmax(reshape(c_t.detach(), {c, h * w}), 1, 1.0), lap);
  return mse(ns, nt);
}

// Hard mean-threshold bits per channel; ties at the mean go to 0.
inline std::vector<double> hard_bits(const Tensor& m) {
  const int c = m.shape()[0];
  const int hw = m.shape()[1] * m.shape()[2];
  std::vector<double> bits(m.data().size());
  for (int ch = 0; ch < c; ++ch) {
    const double* v = m.data().data() + static_cast<size_t>(ch) * hw;
    double mean = 0.0;
    for (int i = 0; i < hw; ++i) mean += v[i];
    mean /= hw;
    for (int i = 0; i < hw; ++i) bits[static_cast<size_t>(ch) * hw + i] = v[i] > mean ? 1.0 : 0.0;
  }
  return bits;
}

namespace detail {

// Centering matrix I - (1/m) * ones, so matmul(P, C) subtracts each
// channel's mean from each of its pixels.
inline Tensor centering(int m) {
  std::vector<double> c(static_cast<size_t>(m) * m, -1.0 / m);
  for (int i = 0; i < m; ++i) c[static_cast<size_t>(i) * m + i] += 1.0;
  return Tensor::from_data({m, m}, std::move(c));
}

}  // namespace detail

// Response-threshold loss, trained form: both maps binarized with the soft
// surrogate sigmoid(beta * (P - channel mean)) so the loss is differentiable
// and exactly zero on identical maps; the teacher side is a constant.
// Hard bits are reserved for the signed diagnostic and evaluation.
inline Tensor loss_crl_response(const Tensor& c_s, const Tensor& c_t, double beta) {
  detail::check_loss_shapes("loss_crl_response", c_s, c_t);
  if (!(beta > 0.0))
    throw std::invalid_argument("loss_crl_response: beta must be positive, got " +
                                std::to_string(beta));
  const int c = c_s.shape()[0], h = c_s.shape()[1], w = c_s.shape()[2];
  Tensor center = detail::centering(h * w);
  auto soft_bits = [&](const Tensor& m) {
    return sigmoid(scalar_mul(matmul(reshape(m, {c, h * w}), center), beta));
  };
  return mse(soft_bits(c_s), soft_bits(c_t.detach()));
}

// Literal signed form of the response loss (hard bits on both sides); zero
// gradient almost everywhere, exposed for diagnostics only.
inline double loss_crl_response_signed(const Tensor& c_s, const Tensor& c_t) {
  detail::check_loss_shapes("loss_crl_response_signed", c_s, c_t);
  auto bs = hard_bits(c_s);
  auto bt = hard_bits(c_t);
  double acc = 0.0;
  for (size_t i = 0; i < bs.size(); ++i) acc += bs[i] - bt[i];
  return acc / static_cast<double>(c_s.shape()[1] * c_s.shape()[2]) / c_s.shape()[0];
}

struct HardLoss {
  Tensor cls;
  Tensor reg;
  int num_positive = 0;
};

// Supervision against the ground-truth box (window coordinates). Positives
// are grid cells whose center lies in the central half-extent of the box;
// classification is class-balanced cross-entropy, regression is smooth-L1 on
// normalized edge distances over positives only.
inline HardLoss loss_hard(const Tensor& cls, const Tensor& reg, const BBox& gt,
                          const GridGeometry& geom = {}) {
  const int n = geom.cells;
  if (cls.shape() != Shape{2, n, n} || reg.shape() != Shape{4, n, n})
    throw std::invalid_argument("loss_hard: expected cls [2x9x9]/reg [4x9x9], got " +
                                shape_str(cls.shape()) + "/" + shape_str(reg.shape()));
  const int plane = n * n;
  std::vector<int> positive;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double x = geom.cell_x(j), y = geom.cell_y(i);
      if (std::abs(x - gt.cx) <= gt.w / 4.0 && std::abs(y - gt.cy) <= gt.h / 4.0)
        positive.push_back(i * n + j);
    }
  const int npos = static_cast<int>(positive.size());
  const int nneg = plane - npos;

  // class-balanced weights: half the mass on each side that exists
  std::vector<double> wmap(static_cast<size_t>(2) * plane, 0.0);
  std::vector<bool> is_pos(static_cast<size_t>(plane), false);
  for (int p : positive) is_pos[static_cast<size_t>(p)] = true;
  const double wp = npos > 0 ? (nneg > 0 ? 0.5 : 1.0) / npos : 0.0;
  const double wn = nneg > 0 ? (npos > 0 ? 0.5 : 1.0) / nneg : 0.0;
  for (int p = 0; p < plane; ++p) {
    if (is_pos[static_cast<size_t>(p)])
      wmap[static_cast<size_t>(plane + p)] = wp;  // foreground channel
    else
      wmap[static_cast<size_t>(p)] = wn;  // background channel
  }
  Tensor weights = Tensor::from_data({2, n, n}, std::move(wmap));
  Tensor probs = add(softmax(cls, 0, 1.0), Tensor::full({2, n, n}, 1e-12));
  HardLoss out;
  out.num_positive = npos;
  out.cls = scalar_mul(sum(mul(weights, log(probs))), -1.0);

  if (npos == 0) {
    out.reg = Tensor::scalar(0.0);
    return out;
  }
  std::vector<double> target(static_cast<size_t>(4) * plane, 0.0);
  std::vector<double> mask(static_cast<size_t>(4) * plane, 0.0);
  for (int p : positive) {
    const int i = p / n, j = p % n;
    const double x = geom.cell_x(j), y = geom.cell_y(i);
    const double d[4] = {x - gt.x0(), y - gt.y0(), gt.x1() - x, gt.y1() - y};
    for (int ch = 0; ch < 4; ++ch) {
      target[static_cast<size_t>(ch * plane + p)] = d[ch] / geom.image;
      mask[static_cast<size_t>(ch * plane + p)] = 1.0;
    }
  }
  Tensor sl = smooth_l1_map(reg, Tensor::from_data({4, n, n}, std::move(target)));
  out.reg = scalar_mul(sum(mul(Tensor::from_data({4, n, n}, std::move(mask)), sl)),
                       1.0 / (4.0 * npos));
  return out;
}

struct LossComponents {
  Tensor cls, reg, kdc, kdr, crl, ml;
};

// lambda1*(Cls+Reg) + lambda2*(KDC+KDR) + lambda3*CRL + lambda4*ML.
inline Tensor loss_total(const LossComponents& c, const LossWeights& w) {
  auto check = [](const Tensor& t, const char* name) {
    if (!t.defined() || t.numel() != 1 || !std::isfinite(t.item()))
      throw std::runtime_error(std::string("loss_total: component ") + name +
                               " is missing or non-finite");
    return t;
  };
  Tensor hard = add(check(c.cls, "L_Cls"), check(c.reg, "L_Reg"));
  Tensor kd = add(check(c.kdc, "L_KDC"), check(c.kdr, "L_KDR"));
  Tensor total = add(scalar_mul(hard, w.lambda1), scalar_mul(kd, w.lambda2));
  total = add(total, scalar_mul(check(c.crl, "L_CRL"), w.lambda3));
  return add(total, scalar_mul(check(c.ml, "L_ML"), w.lambda4));
}

}  // namespace mlkd
