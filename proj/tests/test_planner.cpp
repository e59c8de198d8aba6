#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "fidplan/planner.hpp"
#include "oracles.hpp"

using namespace fidplan;

namespace {

Layer grid_layer(int nx, int ny, int k = 0) {
  Layer l;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) l.push_back({i, j, k});
  return l;
}

std::string plan_bytes(const Plan& p) {
  std::ostringstream os;
  p.write_jsonl(os);
  return os.str();
}

}  // namespace

TEST(DivideLayers, SizesAndPartition) {
  EXPECT_EQ(divide_layers(Structure::box(5, 5, 1)).size(), 1u);
  EXPECT_EQ(divide_layers(Structure::box(5, 5, 1))[0].size(), 25u);
  const auto pl = divide_layers(Structure::pyramid(3));
  ASSERT_EQ(pl.size(), 2u);
  EXPECT_EQ(pl[0].size(), 9u);
  EXPECT_EQ(pl[1].size(), 1u);

  Structure s = Structure::pyramid(9);
  std::vector<Slot> all;
  for (const auto& l : divide_layers(s)) all.insert(all.end(), l.begin(), l.end());
  std::sort(all.begin(), all.end());
  std::sort(s.slots.begin(), s.slots.end());
  EXPECT_EQ(all, s.slots);
  EXPECT_EQ(Structure::pyramid(21).slots.size(), 1771u);
}

TEST(ClusterUntilRadius, CompactLayerIsOneCluster) {
  const ClusterSet cs = cluster_until_radius(grid_layer(2, 2), 1.0, 2, 1);
  EXPECT_EQ(cs.k(), 1u);
}

TEST(ClusterUntilRadius, SeparatedGroupsSplitNaturally) {
  Layer l = grid_layer(2, 2);
  for (const Slot& s : grid_layer(2, 2)) l.push_back({s.i + 20, s.j, 0});
  const ClusterSet cs = cluster_until_radius(l, 1.0, 3, 4);
  ASSERT_EQ(cs.k(), 2u);
  for (const auto& c : cs.clusters) {
    EXPECT_EQ(c.slots.size(), 4u);
    const bool left = c.slots.front().i < 10;
    for (const Slot& s : c.slots) EXPECT_EQ(s.i < 10, left);
  }
}

TEST(ClusterUntilRadius, MatchesExhaustivePartitionOnSmallLayers) {
  Rng rng(31);
  int feasible = 0;
  for (int t = 0; t < 60; ++t) {
    const auto inst = oracle::random_layer(rng);
    std::vector<Vec3> pts;
    for (const Slot& s : inst.layer) pts.push_back(s.position());
    const int want = oracle::min_partition_k(pts, inst.r, inst.m);
    if (want == 0) {
      EXPECT_THROW(cluster_until_radius(inst.layer, inst.r, inst.m, 7), Error) << "instance " << t;
      continue;
    }
    ++feasible;
    const ClusterSet cs = cluster_until_radius(inst.layer, inst.r, inst.m, 7);
    EXPECT_EQ(static_cast<int>(cs.k()), want) << "instance " << t;
    std::size_t total = 0;
    for (const auto& c : cs.clusters) {
      EXPECT_LE(c.width, inst.r + kWidthSlack);
      EXPECT_GE(c.slots.size(), inst.m);
      total += c.slots.size();
    }
    EXPECT_EQ(total, inst.layer.size());
  }
  EXPECT_GT(feasible, 20);
}

TEST(ClusterUntilRadius, InfeasibleLayerNamesTheLayer) {
  const Layer l{{0, 0, 3}, {10, 0, 3}};
  try {
    cluster_until_radius(l, 1.0, 2, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Infeasible);
    EXPECT_NE(std::string(e.what()).find("k=3"), std::string::npos);
  }
  EXPECT_THROW(cluster_until_radius(l, 1.0, 3, 1), Error);
}

TEST(SelectMarkerDestinations, ExtremalCases) {
  const Layer line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}, {4, 0, 0}};
  auto two = select_marker_destinations(line, 2);
  std::sort(two.begin(), two.end(), lex_less);
  EXPECT_EQ(two[0], Vec3(0, 0, 0));
  EXPECT_EQ(two[1], Vec3(4, 0, 0));
  EXPECT_EQ(select_marker_destinations(line, 5).size(), 5u);
  EXPECT_THROW(select_marker_destinations(line, 6), Error);
}

TEST(SelectMarkerDestinations, MatchesBestTripleOnGrid) {
  const Layer g = grid_layer(4, 4);
  const auto got = select_marker_destinations(g, 3);
  const double spacing = std::min({(got[0] - got[1]).norm(), (got[0] - got[2]).norm(), (got[1] - got[2]).norm()});
  std::vector<Vec3> pts;
  for (const Slot& s : g) pts.push_back(s.position());
  EXPECT_NEAR(spacing, oracle::best_triple_spacing(pts), 1e-12);
}

TEST(FindTour, SmallCases) {
  EXPECT_EQ(find_tour({Vec3(3, 3, 0)}, Vec3::Zero()), std::vector<std::size_t>{0});
  const std::vector<Vec3> c{Vec3(0, 0, 0), Vec3(10, 0, 0), Vec3(1, 0, 0)};
  EXPECT_EQ(find_tour(c, Vec3::Zero()), (std::vector<std::size_t>{0, 2, 1}));
}

TEST(FindTour, NearBruteForceOptimum) {
  Rng rng(8);
  for (int t = 0; t < 40; ++t) {
    const int n = 1 + static_cast<int>(rng.index(8));
    std::vector<Vec3> c;
    for (int i = 0; i < n; ++i) c.emplace_back(rng.uniform(0, 10), rng.uniform(0, 10), 0);
    const Vec3 start(rng.uniform(0, 10), rng.uniform(0, 10), 0);
    const auto order = find_tour(c, start);
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < n; ++i) ASSERT_EQ(sorted[static_cast<std::size_t>(i)], static_cast<std::size_t>(i));
    EXPECT_LE(tour_length(c, start, order), 1.25 * oracle::best_path(c, start) + 1e-9);
  }
}

TEST(WalkToCoverage, TargetsAlreadyReached) {
  std::vector<MarkerState> ms{{0, Vec3(0, 0, 0)}, {1, Vec3(1, 0, 0)}};
  EXPECT_TRUE(walk_to_coverage(ms, {Vec3(1, 0, 0), Vec3(0, 0, 0)}, 1.0).empty());
}

TEST(WalkToCoverage, StraightLineHopsFollowGait) {
  // Two markers a small gap apart, shifted by d along x. Matching sends
  // marker 1 to d and marker 0 to d + gap. Hand simulation: the marker with
  // more ground left hops (lower id on ties) as far as reach from the other
  // one allows.
  const double reach = 1.0, gap = 0.1;
  for (double d : {0.5, 1.0, 2.0}) {
    std::vector<MarkerState> ms{{0, Vec3(0, 0, 0)}, {1, Vec3(gap, 0, 0)}};
    const auto acts = walk_to_coverage(ms, {Vec3(d, 0, 0), Vec3(d + gap, 0, 0)}, reach);

    double x[2] = {0.0, gap};
    const double goal[2] = {d + gap, d};
    std::vector<std::pair<int, double>> expect;
    while (std::abs(x[0] - goal[0]) > 1e-12 || std::abs(x[1] - goal[1]) > 1e-12) {
      const int i = goal[1] - x[1] > goal[0] - x[0] + 1e-12 ? 1 : 0;
      x[i] = std::min(goal[i], x[1 - i] + reach);
      expect.emplace_back(i, x[i]);
    }
    ASSERT_EQ(acts.size(), expect.size()) << "d = " << d;
    for (std::size_t h = 0; h < acts.size(); ++h) {
      const auto& mm = std::get<MoveMarker>(acts[h]);
      EXPECT_EQ(mm.id, expect[h].first);
      EXPECT_NEAR(mm.to.x(), expect[h].second, 1e-12);
    }
    EXPECT_EQ(acts.size(), d < 2.0 ? 2u : 3u);
  }
}

TEST(WalkToCoverage, StrandedMarkerIsNamed) {
  std::vector<MarkerState> ms{{0, Vec3(0, 0, 0)}, {5, Vec3(1, 0, 0)}};
  const std::vector<Vec3> cand{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(9, 0, 0)};
  try {
    walk_to_coverage(ms, {Vec3(0, 0, 0), Vec3(9, 0, 0)}, 1.5, &cand);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Infeasible);
    EXPECT_NE(std::string(e.what()).find("marker 5"), std::string::npos);
  }
}

TEST(PlanAssembly, EmptyStructureGivesEmptyPlan) {
  Structure s;
  const Plan p = plan_assembly(s, {{0, Vec3(0, 0, 0)}, {1, Vec3(1, 0, 0)}}, 1.0);
  EXPECT_TRUE(p.actions.empty());
}

TEST(PlanAssembly, TwoByTwoLayer) {
  const Structure s = Structure::box(2, 2, 1);
  const Plan p = plan_assembly(s, default_markers(s, 2), 5.0);
  EXPECT_EQ(p.clusters_per_layer, std::vector<int>{1});
  EXPECT_EQ(p.place_count(), 4u);
  std::size_t lifted = 0;
  for (const Action& a : p.actions)
    if (const auto* mm = std::get_if<MoveMarker>(&a)) lifted += mm->to.z() > mm->from.z();
  EXPECT_EQ(lifted, 2u);
  for (const auto& mk : p.final_markers) EXPECT_DOUBLE_EQ(mk.position.z(), 1.0);
}

class PlanProperties : public ::testing::TestWithParam<std::tuple<int, double>> {};

TEST_P(PlanProperties, CompleteLayeredCoveredDeterministic) {
  const auto [shape, r] = GetParam();
  const Structure s = shape == 0 ? Structure::box(6, 5, 2) : Structure::pyramid(7);
  const auto markers = default_markers(s, 3);
  const Plan p = plan_assembly(s, markers, r);

  // Every slot exactly once, layers in order.
  std::multiset<Slot> placed;
  int layer = -1;
  std::map<int, std::size_t> per_layer;
  for (const Slot& sl : s.slots) ++per_layer[sl.k];
  std::map<int, std::size_t> done;
  for (const Action& a : p.actions) {
    const auto* pb = std::get_if<PlaceBlock>(&a);
    if (!pb) continue;
    placed.insert(pb->slot);
    if (pb->slot.k != layer) {
      if (layer >= 0) EXPECT_EQ(done[layer], per_layer[layer]) << "layer " << layer << " left unfinished";
      EXPECT_GT(pb->slot.k, layer);
      layer = pb->slot.k;
    }
    ++done[layer];
  }
  EXPECT_EQ(placed, std::multiset<Slot>(s.slots.begin(), s.slots.end()));

  // Each landing is within hop reach of a stationary marker.
  std::map<int, Vec3> at;
  for (const auto& m : markers) at[m.id] = m.position;
  for (const Action& a : p.actions) {
    const auto* mm = std::get_if<MoveMarker>(&a);
    if (!mm) continue;
    ASSERT_LT((at[mm->id] - mm->from).norm(), 1e-9);
    bool near = false;
    for (const auto& [id, pos] : at)
      if (id != mm->id) near = near || horizontal_distance(pos, mm->to) <= p.hop_radius + 1e-9;
    EXPECT_TRUE(near);
    at[mm->id] = mm->to;
  }

  const std::string bytes = plan_bytes(p);
  EXPECT_EQ(bytes, plan_bytes(plan_assembly(s, markers, r)));
  std::istringstream in(bytes);
  EXPECT_EQ(plan_bytes(Plan::read_jsonl(in)), bytes);
}

INSTANTIATE_TEST_SUITE_P(Fixtures, PlanProperties,
                         ::testing::Combine(::testing::Values(0, 1), ::testing::Values(1.5, 2.0)));

TEST(PlanAssembly, StepsShrinkAsRadiusGrows) {
  const Structure s = Structure::box(10, 10, 2);
  const auto markers = default_markers(s, 3);
  std::size_t prev = SIZE_MAX;
  for (double r : {1.0, 1.5, 2.0}) {
    const std::size_t n = plan_assembly(s, markers, r).actions.size();
    EXPECT_LT(n, prev) << "r = " << r;
    prev = n;
  }
}

TEST(PlanAssembly, RejectsBadInput) {
  const Structure s = Structure::box(3, 3, 1);
  EXPECT_THROW(plan_assembly(s, {{0, Vec3(0, 0, 0)}}, 1.0), Error);
  EXPECT_THROW(plan_assembly(s, {{0, Vec3(0, 0, 0)}, {0, Vec3(1, 0, 0)}}, 1.0), Error);
  EXPECT_THROW(plan_assembly(s, {{0, Vec3(0, 0, 0)}, {1, Vec3(9, 0, 0)}}, 1.0), Error);
  std::istringstream junk("{\"kind\":\"other\"}\n");
  EXPECT_THROW(Plan::read_jsonl(junk), Error);
}
