#include <gtest/gtest.h>

#include <sstream>

#include "fidplan/plan_checker.hpp"

using namespace fidplan;

namespace {

EigenvaluePredictor flat(double lambda_star = 1e-5) {
  return EigenvaluePredictor::constant(lambda_star, 1e-7, 0.01, 5.0, 85.0 * M_PI / 180.0);
}

}  // namespace

TEST(LineOfSight, BlockOnSegmentHides) {
  const std::set<Slot> placed{{0, 0, 1}};
  EXPECT_FALSE(line_of_sight(placed, Vec3(0, 0, 4), Vec3(0, 0, 0.5)));
  EXPECT_TRUE(line_of_sight(placed, Vec3(3, 0, 4), Vec3(3, 0, 0.5)));
  EXPECT_TRUE(line_of_sight({}, Vec3(0, 0, 4), Vec3(0, 0, 0)));
}

TEST(LineOfSight, AgreesWithSegmentSampling) {
  Rng rng(4);
  int checked = 0;
  for (int t = 0; t < 400; ++t) {
    std::set<Slot> placed;
    for (int b = 0; b < 6; ++b)
      placed.insert({static_cast<int>(rng.index(5)), static_cast<int>(rng.index(5)), static_cast<int>(rng.index(3))});
    const Vec3 cam(rng.uniform(-1, 5), rng.uniform(-1, 5), 4.5);
    const Vec3 pt(rng.uniform(-1, 5), rng.uniform(-1, 5), rng.uniform(-0.5, 3.5));
    bool hit = false;
    double closest = 1e9;
    for (int s = 0; s <= 4000; ++s) {
      const Vec3 p = cam + (pt - cam) * (s / 4000.0);
      for (const Slot& b : placed) {
        const Vec3 lo(b.i - 0.5, b.j - 0.5, b.k), hi(b.i + 0.5, b.j + 0.5, b.k + 1.0);
        const double gap = (lo - p).cwiseMax(p - hi).cwiseMax(Vec3::Zero()).norm();
        closest = std::min(closest, gap);
        hit = hit || gap == 0.0;
      }
    }
    if (!hit && closest < 1e-3) continue;
    ++checked;
    EXPECT_EQ(line_of_sight(placed, cam, pt), !hit) << "trial " << t;
  }
  EXPECT_GT(checked, 300);
}

TEST(VisibleMarkers, DomainAndOcclusion) {
  WorldState w;
  w.markers = {{0, Vec3(0, 0, 0)}, {1, Vec3(1, 0, 0)}, {2, Vec3(0, 0, 5)}};
  const auto pred = flat();
  // Marker 2 sits above the camera, outside the view cone.
  EXPECT_EQ(visible_markers(w, Vec3(0, 1, 3), pred), (std::vector<int>{0, 1}));
  EXPECT_EQ(visible_markers(w, Vec3(0, 1, 3), pred, {}, 1), (std::vector<int>{0}));
  w.placed.insert({1, 0, 2});
  EXPECT_EQ(visible_markers(w, Vec3(1, 0, 4), pred), (std::vector<int>{}));
}

TEST(CheckPlan, EmptyPlan) {
  const CheckReport rep = check_plan(Structure{}, Plan{}, flat(), CertaintyParams{});
  EXPECT_DOUBLE_EQ(rep.p_success, 1.0);
  EXPECT_TRUE(rep.steps.empty());
}

TEST(CheckPlan, ProductOfStepsAndScaledPredictorNeverHelps) {
  const Structure s = Structure::box(5, 5, 2);
  const Plan plan = plan_assembly(s, default_markers(s, 3), 1.5);
  const CertaintyParams params{0.02, 0.5};
  const auto pred = flat(4e-5);
  const CheckReport rep = check_plan(s, plan, pred, params);
  ASSERT_EQ(rep.steps.size(), plan.actions.size());
  double prod = 1.0;
  for (const auto& st : rep.steps) prod *= st.c_star;
  EXPECT_NEAR(rep.p_success, prod, 1e-12);
  EXPECT_GE(rep.p_success, 0.0);
  EXPECT_LE(rep.p_success, 1.0);
  EXPECT_GE(rep.min_visible, 2u);

  const CheckReport worse = check_plan(s, plan, pred.scaled(4.0), params);
  for (std::size_t i = 0; i < rep.steps.size(); ++i) EXPECT_LE(worse.steps[i].c_star, rep.steps[i].c_star);
  EXPECT_LT(worse.p_success, rep.p_success);
}

TEST(CheckPlan, WalledInMarkersFail) {
  // A marker ringed by stacked blocks is hidden from a camera off to the side.
  Structure s;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      if (i || j)
        for (int k = 0; k < 3; ++k) s.slots.push_back({i, j, k});
  s.slots.push_back({5, 0, 0});
  Plan plan;
  plan.initial_markers = {{0, Vec3(0, 0, 0)}, {1, Vec3(6, 0, 0)}};
  for (const Slot& sl : s.slots) plan.actions.push_back(PlaceBlock{sl});
  const CheckReport rep = check_plan(s, plan, flat(), CertaintyParams{});
  EXPECT_FALSE(rep.steps.back().ok);
  EXPECT_EQ(rep.steps.back().visible, std::vector<int>{1});
}

TEST(CheckPlan, ValidationErrors) {
  const Structure s = Structure::box(2, 1, 1);
  Plan plan;
  plan.initial_markers = {{0, Vec3(0, 0, 0)}, {1, Vec3(1, 0, 0)}};
  plan.actions = {PlaceBlock{{7, 7, 0}}};
  EXPECT_THROW(check_plan(s, plan, flat(), CertaintyParams{}), Error);
  plan.actions = {PlaceBlock{{0, 0, 0}}};
  EXPECT_THROW(check_plan(s, plan, flat(), CertaintyParams{}), Error);
  plan.actions = {MoveMarker{9, Vec3(0, 0, 0), Vec3(0, 1, 0)}};
  EXPECT_THROW(check_plan(s, plan, flat(), CertaintyParams{}), Error);
  plan.actions = {MoveMarker{0, Vec3(0, 0, 0), Vec3(0, 2, 0)}};
  try {
    check_plan(s, plan, flat(), CertaintyParams{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
    EXPECT_NE(std::string(e.what()).find("never fills"), std::string::npos);
  }
}

TEST(CheckReport, JsonRoundTrip) {
  const Structure s = Structure::box(4, 3, 1);
  const Plan plan = plan_assembly(s, default_markers(s, 2), 2.0);
  const CheckReport rep = check_plan(s, plan, flat(), CertaintyParams{});
  const auto j = rep.to_json("x");
  EXPECT_EQ(CheckReport::from_json(j).to_json("x").dump(), j.dump());
}

TEST(Sweep, CsvRoundTripAndSvg) {
  std::vector<SweepRow> rows(3);
  rows[0] = {1.0, 0.987654321, 40, true, ""};
  rows[1] = {1.5, 1.0 / 3.0, 30, true, ""};
  rows[2] = {2.0, 0.0, 0, false, "layer 0: no k, \"quoted\""};
  std::ostringstream os;
  write_sweep_csv(os, rows, "demo");
  std::istringstream in(os.str());
  const auto back = read_sweep_csv(in);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].r, rows[i].r);
    EXPECT_EQ(back[i].p_success, rows[i].p_success);
    EXPECT_EQ(back[i].steps, rows[i].steps);
    EXPECT_EQ(back[i].feasible, rows[i].feasible);
  }
  std::ostringstream svg;
  write_sweep_svg(svg, rows, "demo <&>");
  const std::string t = svg.str();
  EXPECT_EQ(t.rfind("<svg", 0) == 0 || t.rfind("<?xml", 0) == 0, true);
  EXPECT_NE(t.find("</svg>"), std::string::npos);
  EXPECT_EQ(t.find("<&>"), std::string::npos);
}

TEST(Sweep, TinyStructureSingleRow) {
  const Structure s = Structure::box(3, 3, 1);
  SweepConfig cfg;
  cfg.threads = 1;
  const auto rows = sweep_radius(s, {1.0}, flat(), CertaintyParams{0.02, 0.5}, cfg);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].feasible);
  EXPECT_GT(rows[0].p_success, 0.0);
  EXPECT_THROW(sweep_radius(s, {2.0, 1.0}, flat(), CertaintyParams{}, cfg), Error);
}

TEST(RadiusLimit, HalfTheMatchedCoverage) {
  const CheckConfig cc;
  const auto pred = flat(1e-5);
  const CertaintyParams params{0.02, 0.9};
  const double rc = coverage_radius_3d(pred, params, 3, matched_probe(cc, 0.15));
  EXPECT_NEAR(radius_limit(pred, params, 3, cc, 0.15), rc / 0.3, 1e-12);
}
