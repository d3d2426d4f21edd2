// SPDX-License-Identifier: Apache-2.0
//
// Metric oracles: hand-geometry IoU/CLE cases, pooled-curve closed forms,
// the Riemann-sum property tying AUC to mean IoU, attribute-subset
// isolation, and comparison-table ranking.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "mlkd/eval.hpp"
#include "mlkd/rng.hpp"

using namespace mlkd;
using Catch::Approx;

namespace {

BBox random_box(Rng& rng) {
  return {rng.uniform(10.0, 80.0), rng.uniform(10.0, 80.0), rng.uniform(4.0, 30.0),
          rng.uniform(4.0, 30.0)};
}

}  // namespace

TEST_CASE("iou hand geometry") {
  BBox a = BBox::from_tlwh(0, 0, 2, 2);
  BBox b = BBox::from_tlwh(1, 1, 2, 2);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, b) == Approx(1.0 / 7.0));
  CHECK(iou(a, BBox::from_tlwh(10, 10, 2, 2)) == 0.0);
  // corner touch has zero area overlap
  CHECK(iou(a, BBox::from_tlwh(2, 2, 2, 2)) == 0.0);

  for (uint64_t s = 0; s < 50; ++s) {
    Rng rng(mix_seed(70, s));
    BBox x = random_box(rng), y = random_box(rng);
    const double v = iou(x, y);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(iou(y, x) == v);
  }
}

TEST_CASE("center errors") {
  BBox a{0, 0, 4, 4}, b{3, 4, 4, 4};
  CHECK(cle(a, a) == 0.0);
  CHECK(cle(a, b) == Approx(5.0));
  CHECK(cle(b, a) == cle(a, b));

  BBox gt{10, 10, 8, 2};
  CHECK(norm_cle(gt, gt) == 0.0);
  CHECK(norm_cle(BBox{18, 10, 8, 2}, gt) == Approx(1.0));  // dx equals gt width
  // uniform rescale of the scene leaves the ratio alone
  BBox p{13, 11, 8, 2};
  const double before = norm_cle(p, gt);
  BBox p2{26, 22, 16, 4}, gt2{20, 20, 16, 4};
  CHECK(norm_cle(p2, gt2) == Approx(before));
  CHECK_THROWS_WITH(norm_cle(p, BBox{1, 1, 0, 2}),
                    Catch::Matchers::ContainsSubstring("positive"));
}

TEST_CASE("evaluate pooled closed forms") {
  SECTION("perfect predictions") {
    EvalSequence s;
    s.name = "seq";
    for (int t = 0; t < 10; ++t) {
      BBox b{20.0 + t, 30.0, 10, 12};
      s.pred.push_back(b);
      s.gt.push_back(b);
    }
    EvalReport r = evaluate({s});
    CHECK(r.frames == 10);
    CHECK(r.precision_at_20 == 1.0);
    CHECK(r.norm_precision == 1.0);
    // IoU 1 fails only the t=1 threshold: AUC loses half the last step
    CHECK(r.success_auc == Approx(0.975));
    CHECK(std::abs(r.success_auc - 1.0) <= 0.025);
  }

  SECTION("all predictions far away") {
    EvalSequence s;
    s.name = "seq";
    for (int t = 0; t < 8; ++t) {
      s.gt.push_back({20, 20, 10, 10});
      s.pred.push_back({90, 90, 10, 10});  // 98 px off, disjoint
    }
    EvalReport r = evaluate({s});
    CHECK(r.success_auc == 0.0);
    CHECK(r.precision_at_20 == 0.0);
    CHECK(r.norm_precision == 0.0);
  }

  SECTION("two frames, IoU one and zero") {
    EvalSequence s;
    s.name = "seq";
    s.gt = {BBox{20, 20, 10, 10}, BBox{20, 20, 10, 10}};
    s.pred = {BBox{20, 20, 10, 10}, BBox{60, 60, 10, 10}};
    EvalReport r = evaluate({s});
    for (int i = 1; i < kSuccessSteps - 1; ++i)
      CHECK(r.success_curve[static_cast<size_t>(i)] == 0.5);
    CHECK(r.success_auc == Approx(0.4875));
    CHECK(std::abs(r.success_auc - 0.5) <= 0.025);
  }
}

TEST_CASE("curve invariants and the Riemann-sum property") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(mix_seed(71, trial));
    EvalSequence s;
    s.name = "rand";
    double mean_iou = 0.0;
    const int n = 40;
    for (int t = 0; t < n; ++t) {
      BBox gt = random_box(rng);
      BBox p = gt;
      p.cx += rng.uniform(-10.0, 10.0);
      p.cy += rng.uniform(-10.0, 10.0);
      p.w = std::max(2.0, p.w + rng.uniform(-4.0, 4.0));
      p.h = std::max(2.0, p.h + rng.uniform(-4.0, 4.0));
      s.gt.push_back(gt);
      s.pred.push_back(p);
      mean_iou += iou(p, gt);
    }
    mean_iou /= n;
    EvalReport r = evaluate({s});
    for (int i = 1; i < kSuccessSteps; ++i)
      CHECK(r.success_curve[static_cast<size_t>(i)] <=
            r.success_curve[static_cast<size_t>(i - 1)]);
    for (int i = 1; i < kPrecisionSteps; ++i)
      CHECK(r.precision_curve[static_cast<size_t>(i)] >=
            r.precision_curve[static_cast<size_t>(i - 1)]);
    for (double v : r.success_curve) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(std::abs(r.success_auc - mean_iou) <= 0.025);
  }
}

TEST_CASE("evaluate validation and throughput") {
  EvalSequence bad;
  bad.name = "broken-seq";
  bad.gt = {BBox{1, 1, 2, 2}, BBox{1, 1, 2, 2}};
  bad.pred = {BBox{1, 1, 2, 2}};
  CHECK_THROWS_WITH(evaluate({bad}), Catch::Matchers::ContainsSubstring("broken-seq"));

  EvalSequence s;
  s.name = "seq";
  for (int t = 0; t < 11; ++t) {
    s.gt.push_back({20, 20, 10, 10});
    s.pred.push_back({20, 20, 10, 10});
  }
  s.track_ms = 50.0;  // 10 tracked frames in 50 ms
  CHECK(evaluate({s}).fps == Approx(200.0));
  s.track_ms = 0.0;
  CHECK(evaluate({s}).fps == 0.0);
}

TEST_CASE("per-attribute metrics ignore frames outside the subset") {
  auto make_seq = [](const std::string& name, const std::string& attr, double offset) {
    EvalSequence s;
    s.name = name;
    s.attributes = {attr};
    for (int t = 0; t < 6; ++t) {
      s.gt.push_back({30, 30, 12, 12});
      s.pred.push_back({30 + offset, 30, 12, 12});
    }
    return s;
  };
  EvalSequence a = make_seq("a", "fast-motion", 2.0);
  EvalSequence b = make_seq("b", "occlusion", 1.0);
  EvalReport before = evaluate({a, b});
  REQUIRE(before.per_attribute.count("fast-motion") == 1);
  REQUIRE(before.per_attribute.count("occlusion") == 1);

  // poison the occlusion sequence; fast-motion numbers must not move
  EvalSequence poisoned = b;
  for (auto& p : poisoned.pred) p = BBox{90, 90, 3, 3};
  EvalReport after = evaluate({a, poisoned});
  const auto& fm0 = before.per_attribute.at("fast-motion");
  const auto& fm1 = after.per_attribute.at("fast-motion");
  CHECK(fm0.success_curve == fm1.success_curve);
  CHECK(fm0.precision_curve == fm1.precision_curve);
  CHECK(fm0.success_auc == fm1.success_auc);
  CHECK(fm0.norm_precision == fm1.norm_precision);
  CHECK(before.per_attribute.at("occlusion").success_auc >
        after.per_attribute.at("occlusion").success_auc);
}

TEST_CASE("comparison table ranking") {
  auto rep = [](double auc, double norm, double prec, double fps) {
    EvalReport r;
    r.success_auc = auc;
    r.norm_precision = norm;
    r.precision_at_20 = prec;
    r.fps = fps;
    return r;
  };
  SECTION("dominant model flagged best everywhere") {
    CompareTable t = compare({{"alpha", rep(0.3, 0.3, 0.3, 50)},
                              {"bravo", rep(0.6, 0.7, 0.8, 200)},
                              {"charlie", rep(0.4, 0.5, 0.6, 100)}});
    for (int col = 0; col < 4; ++col) {
      CHECK(t.rows[static_cast<size_t>(t.best[static_cast<size_t>(col)])].name == "bravo");
      CHECK(t.rows[static_cast<size_t>(t.second[static_cast<size_t>(col)])].name == "charlie");
    }
    const std::string text = t.to_text();
    CHECK(text.find("[1]") != std::string::npos);
    CHECK(text.find("[2]") != std::string::npos);
    CHECK(t.to_csv().rfind("model,succ,norm,prec,speed\n", 0) == 0);
    CHECK(t.to_csv().find("bravo,0.6000,0.7000,0.8000,200.0") != std::string::npos);
  }
  SECTION("ties break toward the lexicographically earlier name") {
    CompareTable t = compare({{"zeta", rep(0.5, 0.5, 0.5, 100)},
                              {"alpha", rep(0.5, 0.5, 0.5, 100)}});
    for (int col = 0; col < 4; ++col)
      CHECK(t.rows[static_cast<size_t>(t.best[static_cast<size_t>(col)])].name == "alpha");
  }
  CHECK_THROWS_WITH(compare({{"only", rep(0.5, 0.5, 0.5, 1)}}),
                    Catch::Matchers::ContainsSubstring("2 reports"));
}

TEST_CASE("report serialization") {
  EvalSequence s;
  s.name = "seq";
  s.attributes = {"low-resolution"};
  for (int t = 0; t < 4; ++t) {
    s.gt.push_back({20, 20, 10, 10});
    s.pred.push_back({21, 20, 10, 10});
  }
  s.track_ms = 30.0;
  EvalReport r = evaluate({s});
  nlohmann::json j = report_json(r);
  CHECK(j["success_curve"].size() == kSuccessSteps);
  CHECK(j["precision_curve"].size() == kPrecisionSteps);
  CHECK(j["per_attribute"].contains("low-resolution"));
  CHECK(j["fps"].get<double>() == Approx(100.0));
  CHECK(report_csv_row("m", r).rfind("m,", 0) == 0);
}
