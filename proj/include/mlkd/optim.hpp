// SPDX-License-Identifier: Apache-2.0
//
// Plain SGD over tensor leaves plus global gradient-norm clipping. Frozen
// parameters never receive gradients, so step() touching only gradient
// buffers preserves them bit-exactly.

#pragma once

#include <cmath>
#include <vector>

#include "mlkd/tensor.hpp"

namespace mlkd {

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      Tensor h = p;
      for (double& g : h.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

struct Sgd {
  double lr = 0.005;

  void step(const std::vector<Tensor>& params) const {
    for (const auto& p : params) {
      if (p.frozen() || !p.has_grad()) continue;
      Tensor h = p;
      auto& data = h.mutable_data();
      const auto& grad = h.grad();
      for (size_t i = 0; i < data.size(); ++i) data[i] -= lr * grad[i];
    }
  }

  static void zero_grad(const std::vector<Tensor>& params) {
    for (const auto& p : params) {
      Tensor h = p;
      h.zero_grad();
    }
  }
};

}  // namespace mlkd
