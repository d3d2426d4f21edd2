// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference comparison against reverse-mode gradients.

#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mlkd/tensor.hpp"

namespace mlkd {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

// f must be scalar-valued and smooth at `point` (callers keep inputs away
// from relu/threshold kinks). Absent grad buffers read as zero, so constant
// functions pass trivially.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& point, double eps = 1e-3, double tol = 1e-4) {
  Tensor x = Tensor::from_data(point.shape(), point.data(), /*requires_grad=*/true);
  Tensor loss = f(x);
  if (loss.numel() != 1)
    throw std::invalid_argument("grad_check: f must be scalar-valued, got " +
                                shape_str(loss.shape()));
  backward(loss);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (x.has_grad()) analytic = x.grad();

  GradCheckReport rep;
  std::vector<double> probe = point.data();
  for (size_t i = 0; i < probe.size(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + eps;
    const double up = f(Tensor::from_data(point.shape(), probe)).item();
    probe[i] = keep - eps;
    const double dn = f(Tensor::from_data(point.shape(), probe)).item();
    probe[i] = keep;
    const double numeric = (up - dn) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-2});
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(analytic[i] - numeric) / denom);
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace mlkd
