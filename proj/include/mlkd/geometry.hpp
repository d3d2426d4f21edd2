// SPDX-License-Identifier: Apache-2.0
//
// Axis-aligned boxes and the center/overlap measures used by tracking
// metrics. Boxes are center-based; the on-disk "x,y,w,h" convention is
// top-left and converted at the I/O boundary.

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mlkd {

struct BBox {
  double cx = 0.0, cy = 0.0;
  double w = 0.0, h = 0.0;

  double x0() const { return cx - w / 2.0; }
  double y0() const { return cy - h / 2.0; }
  double x1() const { return cx + w / 2.0; }
  double y1() const { return cy + h / 2.0; }

  static BBox from_tlwh(double x, double y, double w, double h) {
    return {x + w / 2.0, y + h / 2.0, w, h};
  }

  // Clamps the box to [0,W]x[0,H] bounds, shrinking as needed but keeping
  // strictly positive extents.
  BBox clamped(double img_w, double img_h) const {
    double nx0 = std::clamp(x0(), 0.0, img_w);
    double nx1 = std::clamp(x1(), 0.0, img_w);
    double ny0 = std::clamp(y0(), 0.0, img_h);
    double ny1 = std::clamp(y1(), 0.0, img_h);
    if (nx1 - nx0 < 1.0) {
      double c = std::clamp((nx0 + nx1) / 2.0, 0.5, img_w - 0.5);
      nx0 = c - 0.5;
      nx1 = c + 0.5;
    }
    if (ny1 - ny0 < 1.0) {
      double c = std::clamp((ny0 + ny1) / 2.0, 0.5, img_h - 0.5);
      ny0 = c - 0.5;
      ny1 = c + 0.5;
    }
    return {(nx0 + nx1) / 2.0, (ny0 + ny1) / 2.0, nx1 - nx0, ny1 - ny0};
  }
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

inline double cle(const BBox& a, const BBox& b) {
  return std::hypot(a.cx - b.cx, a.cy - b.cy);
}

// Center error with each axis normalized by the ground-truth extent.
inline double norm_cle(const BBox& pred, const BBox& gt) {
  if (gt.w <= 0.0 || gt.h <= 0.0)
    throw std::invalid_argument("norm_cle: ground-truth box must have positive size, got " +
                                std::to_string(gt.w) + "x" + std::to_string(gt.h));
  const double dx = (pred.cx - gt.cx) / gt.w;
  const double dy = (pred.cy - gt.cy) / gt.h;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace mlkd
