// SPDX-License-Identifier: Apache-2.0
//
// One-pass evaluation: pooled success/precision curves, normalized
// precision, per-attribute breakdowns, throughput, and side-by-side model
// comparison tables.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlkd/geometry.hpp"

namespace mlkd {

inline constexpr int kSuccessSteps = 21;    // IoU thresholds 0, 0.05, ..., 1
inline constexpr int kPrecisionSteps = 51;  // CLE thresholds 0, 1, ..., 50 px
inline constexpr double kNormPrecisionThreshold = 0.2;

struct EvalReport {
  std::vector<double> success_curve;    // fraction of frames with IoU > t
  double success_auc = 0.0;             // trapezoid over the success curve
  std::vector<double> precision_curve;  // fraction of frames with CLE <= t px
  double precision_at_20 = 0.0;
  double norm_precision = 0.0;  // fraction with normalized CLE below 0.2
  double fps = 0.0;             // tracked frames per wall-clock second
  long frames = 0;
  std::map<std::string, EvalReport> per_attribute;  // same metrics, subset frames
};

// Per-sequence evaluation input: predictions aligned with ground truth (the
// first frame is the given template box), attribute tags, and the tracking
// wall-clock spent on the non-template frames.
struct EvalSequence {
  std::string name;
  std::vector<BBox> pred;
  std::vector<BBox> gt;
  std::vector<std::string> attributes;
  double track_ms = 0.0;
};

namespace detail {

inline EvalReport pooled_metrics(const std::vector<double>& ious, const std::vector<double>& cles,
                                 const std::vector<double>& ncles, long tracked_frames,
                                 double track_ms) {
  EvalReport r;
  r.frames = static_cast<long>(ious.size());
  r.success_curve.assign(kSuccessSteps, 0.0);
  r.precision_curve.assign(kPrecisionSteps, 0.0);
  if (r.frames == 0) return r;
  const double n = static_cast<double>(r.frames);
  for (int i = 0; i < kSuccessSteps; ++i) {
    const double t = 0.05 * i;
    long hit = 0;
    for (double u : ious) hit += u > t ? 1 : 0;
    r.success_curve[static_cast<size_t>(i)] = hit / n;
  }
  for (int i = 0; i < kPrecisionSteps; ++i) {
    long hit = 0;
    for (double d : cles) hit += d <= static_cast<double>(i) ? 1 : 0;
    r.precision_curve[static_cast<size_t>(i)] = hit / n;
  }
  for (int i = 1; i < kSuccessSteps; ++i)
    r.success_auc += 0.05 * (r.success_curve[static_cast<size_t>(i - 1)] +
                             r.success_curve[static_cast<size_t>(i)]) / 2.0;
  r.precision_at_20 = r.precision_curve[20];
  long nhit = 0;
  for (double d : ncles) nhit += d < kNormPrecisionThreshold ? 1 : 0;
  r.norm_precision = nhit / n;
  r.fps = track_ms > 0.0 ? 1000.0 * static_cast<double>(tracked_frames) / track_ms : 0.0;
  return r;
}

}  // namespace detail

inline EvalReport evaluate(const std::vector<EvalSequence>& seqs) {
  std::vector<double> ious, cles, ncles;
  long tracked = 0;
  double ms = 0.0;
  std::map<std::string, std::vector<const EvalSequence*>> by_attr;
  for (const auto& s : seqs) {
    if (s.pred.size() != s.gt.size() || s.gt.empty())
      throw std::invalid_argument("evaluate: sequence " + s.name + " has " +
                                  std::to_string(s.pred.size()) + " predictions for " +
                                  std::to_string(s.gt.size()) + " ground-truth boxes");
    for (size_t t = 0; t < s.pred.size(); ++t) {
      ious.push_back(iou(s.pred[t], s.gt[t]));
      cles.push_back(cle(s.pred[t], s.gt[t]));
      ncles.push_back(norm_cle(s.pred[t], s.gt[t]));
    }
    tracked += static_cast<long>(s.pred.size()) - 1;
    ms += s.track_ms;
    for (const auto& a : s.attributes) by_attr[a].push_back(&s);
  }
  EvalReport r = detail::pooled_metrics(ious, cles, ncles, tracked, ms);
  for (const auto& [attr, subset] : by_attr) {
    std::vector<double> si, sc, sn;
    long st = 0;
    double sms = 0.0;
    for (const EvalSequence* s : subset) {
      for (size_t t = 0; t < s->pred.size(); ++t) {
        si.push_back(iou(s->pred[t], s->gt[t]));
        sc.push_back(cle(s->pred[t], s->gt[t]));
        sn.push_back(norm_cle(s->pred[t], s->gt[t]));
      }
      st += static_cast<long>(s->pred.size()) - 1;
      sms += s->track_ms;
    }
    r.per_attribute[attr] = detail::pooled_metrics(si, sc, sn, st, sms);
  }
  return r;
}

// --- comparison table ---

struct CompareRow {
  std::string name;
  double succ = 0.0, norm = 0.0, prec = 0.0, speed = 0.0;
};

struct CompareTable {
  std::vector<CompareRow> rows;
  // per column (succ, norm, prec, speed): row index of best / second best
  std::array<int, 4> best{-1, -1, -1, -1};
  std::array<int, 4> second{-1, -1, -1, -1};

  std::string to_csv() const {
    std::string out = "model,succ,norm,prec,speed\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.1f\n", r.name.c_str(), r.succ, r.norm,
                    r.prec, r.speed);
      out += buf;
    }
    return out;
  }

  std::string to_text() const {
    size_t name_w = 5;
    for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
    auto cell = [&](double v, int col, int row, bool speed) {
      char buf[48];
      std::snprintf(buf, sizeof buf, speed ? "%8.1f" : "%8.4f", v);
      std::string s = buf;
      if (best[static_cast<size_t>(col)] == row) s += "[1]";
      else if (second[static_cast<size_t>(col)] == row) s += "[2]";
      else s += "   ";
      return s;
    };
    std::string out(name_w, ' ');
    out += "       Succ        Norm        Prec       Speed\n";
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      out += r.name + std::string(name_w - r.name.size(), ' ');
      out += cell(r.succ, 0, static_cast<int>(i), false);
      out += cell(r.norm, 1, static_cast<int>(i), false);
      out += cell(r.prec, 2, static_cast<int>(i), false);
      out += cell(r.speed, 3, static_cast<int>(i), true);
      out += "\n";
    }
    return out;
  }
};

// Ranks models per column, higher is better everywhere; ties go to the
// lexicographically earlier name.
inline CompareTable compare(const std::vector<std::pair<std::string, EvalReport>>& reports) {
  if (reports.size() < 2)
    throw std::invalid_argument("compare: need at least 2 reports, got " +
                                std::to_string(reports.size()));
  CompareTable t;
  for (const auto& [name, r] : reports)
    t.rows.push_back({name, r.success_auc, r.norm_precision, r.precision_at_20, r.fps});
  for (int col = 0; col < 4; ++col) {
    auto value = [&](int i) {
      const auto& r = t.rows[static_cast<size_t>(i)];
      return col == 0 ? r.succ : col == 1 ? r.norm : col == 2 ? r.prec : r.speed;
    };
    std::vector<int> order(t.rows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (value(a) != value(b)) return value(a) > value(b);
      return t.rows[static_cast<size_t>(a)].name < t.rows[static_cast<size_t>(b)].name;
    });
    t.best[static_cast<size_t>(col)] = order[0];
    t.second[static_cast<size_t>(col)] = order[1];
  }
  return t;
}

// --- report serialization ---

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  j["success_curve"] = r.success_curve;
  j["success_auc"] = r.success_auc;
  j["precision_curve"] = r.precision_curve;
  j["precision_at_20"] = r.precision_at_20;
  j["norm_precision"] = r.norm_precision;
  j["fps"] = r.fps;
  j["frames"] = r.frames;
  for (const auto& [attr, sub] : r.per_attribute) j["per_attribute"][attr] = report_json(sub);
  return j;
}

inline std::string report_csv_row(const std::string& name, const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,%.1f\n", name.c_str(), r.success_auc,
                r.norm_precision, r.precision_at_20, r.fps);
  return buf;
}

}  // namespace mlkd
