// SPDX-License-Identifier: Apache-2.0
//
// Best-student election: local maxima of the foreground score map, the
// persuasive (top-to-second-peak) ratio, and the mutual-learning loss that
// pulls the remaining students toward the elected one's correlation map.

#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlkd/tensor.hpp"
#include "mlkd/tracker.hpp"

namespace mlkd {

// Local maxima of a 2-D map: a cell is a peak iff its value is >= every
// in-bounds 8-connected neighbor and strictly greater than at least one.
// Equal-value plateaus are deduplicated to a single entry (so a constant map
// has no peaks, and a plateau interior never qualifies on its own). Returned
// values are sorted descending.
inline std::vector<double> find_peaks(const std::vector<double>& map, int h, int w) {
  if (static_cast<int>(map.size()) != h * w)
    throw std::invalid_argument("find_peaks: map size " + std::to_string(map.size()) +
                                " does not match " + std::to_string(h) + "x" + std::to_string(w));
  auto qualifies = [&](int cell) {
    const int cy = cell / w, cx = cell % w;
    const double v = map[static_cast<size_t>(cell)];
    bool has_smaller = false;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dy == 0 && dx == 0) continue;
        const int ny = cy + dy, nx = cx + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const double nv = map[static_cast<size_t>(ny * w + nx)];
        if (nv > v) return false;
        if (nv < v) has_smaller = true;
      }
    return has_smaller;
  };
  std::vector<char> seen(map.size(), 0);
  std::vector<double> peaks;
  for (int start = 0; start < h * w; ++start) {
    if (seen[static_cast<size_t>(start)]) continue;
    // flood the equal-value plateau; it counts once if any member qualifies
    const double v = map[static_cast<size_t>(start)];
    bool is_peak = false;
    std::vector<int> stack{start};
    seen[static_cast<size_t>(start)] = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      if (!is_peak && qualifies(cur)) is_peak = true;
      const int cy = cur / w, cx = cur % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const int ny = cy + dy, nx = cx + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const int nb = ny * w + nx;
          if (map[static_cast<size_t>(nb)] == v && !seen[static_cast<size_t>(nb)]) {
            seen[static_cast<size_t>(nb)] = 1;
            stack.push_back(nb);
          }
        }
    }
    if (is_peak) peaks.push_back(v);
  }
  std::sort(peaks.begin(), peaks.end(), std::greater<double>());
  return peaks;
}

// Takes the foreground channel of a [2xNxN] score map.
inline std::vector<double> foreground_plane(const Tensor& score) {
  if (score.shape().size() != 3 || score.shape()[0] != 2)
    throw std::invalid_argument("foreground_plane: expected [2xNxN] score map, got " +
                                shape_str(score.shape()));
  const size_t plane = static_cast<size_t>(score.shape()[1]) * score.shape()[2];
  return {score.data().begin() + static_cast<long>(plane), score.data().end()};
}

// Confidence ratio of the two largest peaks. One peak means an unambiguous
// response (maximal confidence); no peaks means a flat, uninformative map.
inline double persuasive_value(const std::vector<double>& peaks) {
  if (peaks.empty()) return 0.0;
  if (peaks.size() == 1) return std::numeric_limits<double>::infinity();
  return peaks[0] / std::max(peaks[1], 1e-12);
}

struct ElectionResult {
  struct PerStudent {
    std::vector<double> peaks;
    double persuasive = 0.0;
  };
  std::vector<PerStudent> per_student;
  int best_id = 0;  // 1-based, matching StudentSpec ids
};

// Election over per-student foreground score planes (softmaxed upstream for
// positivity). Highest persuasive value wins; ties go to the lowest id.
inline ElectionResult elect(const std::vector<std::vector<double>>& foregrounds, int h, int w) {
  if (foregrounds.size() < 2)
    throw std::invalid_argument("elect: need at least 2 students, got " +
                                std::to_string(foregrounds.size()));
  ElectionResult res;
  for (const auto& fg : foregrounds) {
    ElectionResult::PerStudent ps;
    ps.peaks = find_peaks(fg, h, w);
    ps.persuasive = persuasive_value(ps.peaks);
    res.per_student.push_back(std::move(ps));
  }
  int best = 0;
  for (size_t i = 1; i < res.per_student.size(); ++i)
    if (res.per_student[i].persuasive > res.per_student[static_cast<size_t>(best)].persuasive)
      best = static_cast<int>(i);
  res.best_id = best + 1;
  return res;
}

// Mutual loss: mean squared distance from each non-elected student's
// correlation map to the elected one's, stop-gradient on the elected side.
// The 1/u coefficient follows the source formulation; pass divide_by_u_minus_1
// to switch to the conventional 1/(u-1) averaging.
inline Tensor loss_ml(const Tensor& c_best, const std::vector<Tensor>& others, int u,
                      bool divide_by_u_minus_1 = false) {
  if (static_cast<int>(others.size()) != u - 1)
    throw std::invalid_argument("loss_ml: expected " + std::to_string(u - 1) +
                                " non-elected maps, got " + std::to_string(others.size()));
  Tensor target = c_best.detach();
  Tensor acc = Tensor::scalar(0.0);
  for (const auto& o : others) {
    if (o.shape() != c_best.shape())
      throw std::invalid_argument("loss_ml: map shape mismatch " + shape_str(o.shape()) +
                                  " vs " + shape_str(c_best.shape()));
    acc = add(acc, mse(o, target));
  }
  const double denom = divide_by_u_minus_1 ? static_cast<double>(u - 1) : static_cast<double>(u);
  return scalar_mul(acc, 1.0 / denom);
}

enum class CrlKind { L2, Spatial, Response };

inline CrlKind parse_crl_kind(const std::string& s) {
  if (s == "l2" || s == "L2") return CrlKind::L2;
  if (s == "spatial") return CrlKind::Spatial;
  if (s == "response") return CrlKind::Response;
  throw std::invalid_argument("unknown correlation loss kind: " + s +
                              " (expected l2 | spatial | response)");
}

inline const char* crl_kind_name(CrlKind k) {
  switch (k) {
    case CrlKind::L2: return "l2";
    case CrlKind::Spatial: return "spatial";
    case CrlKind::Response: return "response";
  }
  return "?";
}

struct StudentSpec {
  int id = 0;  // 1-based
  CrlKind loss_kind = CrlKind::L2;
  TrackerModel model;
};

}  // namespace mlkd
