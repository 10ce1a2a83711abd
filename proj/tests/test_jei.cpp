#include <gtest/gtest.h>

#include <set>

#include "logismos/jei.hpp"
#include "test_util.hpp"

using namespace logismos;

namespace {

/// n x n grid of vertical columns, 4-neighbour adjacency, one object with
/// `surfaces` surfaces. Column i sits at (x, y) = (i % n, i / n) mm.
ColumnGraph sheet(int n, int surfaces = 2, int size = 21, double spacing = 0.5) {
  GraphParams p;
  p.column_size = size;
  p.node_spacing = spacing;
  p.smoothness = 2;
  p.inter_surface_min = 2;
  p.inter_surface_max = 10;
  ObjectColumns oc;
  oc.surfaces = surfaces;
  for (int i = 0; i < n * n; ++i)
    oc.columns.push_back(straight_column(i, 0, {double(i % n), double(i / n), 0.0}, {0, 0, 1}, size, spacing));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      if (x + 1 < n) oc.adjacency.push_back({y * n + x, y * n + x + 1});
      if (y + 1 < n) oc.adjacency.push_back({y * n + x, (y + 1) * n + x});
    }
  AssembleOptions opt;
  opt.couple_objects = false;
  return assemble_graph({oc}, p, opt);
}

/// Costs with a single cheap valley per surface at node `at[s]`.
CostField valley(const ColumnGraph& g, std::array<int, 2> at) {
  CostField cf(g, 1.0);
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i)
      for (int j = 0; j < g.column_size(); ++j) cf.at(s, i, j) = std::min(10000, std::abs(j - at[s]) * 1000) / kCostScale;
  return cf;
}

VolumeGeometry geometry_for_sheet(int n) { return {{n, n, 24}, {1.0, 1.0, 0.5}, {0, 0, 0}}; }

}  // namespace

TEST(KdTree, MatchesLinearScan) {
  Rng rng = make_rng(61);
  std::vector<Vec3> pts(2000);
  for (auto& p : pts) p = {uniform(rng, -10, 10), uniform(rng, -10, 10), uniform(rng, -3, 3)};
  // duplicated points exercise the tie rule
  for (int k = 0; k < 50; ++k) pts.push_back(pts[k]);
  const KdTree tree(pts);
  std::vector<int> seen(tree.order());
  std::sort(seen.begin(), seen.end());
  for (int i = 0; i < static_cast<int>(pts.size()); ++i) ASSERT_EQ(seen[i], i);
  for (int t = 0; t < 300; ++t) {
    const Vec3 q{uniform(rng, -12, 12), uniform(rng, -12, 12), uniform(rng, -4, 4)};
    const int n = 1 + static_cast<int>(uniform_index(rng, 12));
    std::vector<std::pair<double, int>> ref;
    for (int i = 0; i < static_cast<int>(pts.size()); ++i) ref.push_back({norm2(pts[i] - q), i});
    std::sort(ref.begin(), ref.end());
    const auto hits = tree.nearest(q, n);
    ASSERT_EQ(static_cast<int>(hits.size()), n);
    for (int k = 0; k < n; ++k) {
      ASSERT_EQ(hits[k].index, ref[k].second) << "query " << t << " rank " << k;
      ASSERT_NEAR(hits[k].distance, std::sqrt(ref[k].first), 1e-12);
    }
  }
}

TEST(KdTree, FilteredQueryAndNodeIndex) {
  const ColumnGraph g = sheet(4);
  const NodeIndexKD kd(g);
  EXPECT_EQ(kd.size(), g.node_count());
  const auto r = kd.query({1.1, 2.0, 3.0}, 3, 1);
  ASSERT_EQ(r.size(), 3u);
  for (const auto& x : r) EXPECT_EQ(x.ref.surface, 1);
  EXPECT_EQ(r[0].ref.column, 2 * 4 + 1);
  EXPECT_EQ(r[0].ref.node, 6);
  EXPECT_THROW(KdTree(std::vector<Vec3>{}), Error);
}

TEST(Jei, NudgeRewritesIntersectedColumnsAndMovesTheSurface) {
  const int n = 6;
  const ColumnGraph g = sheet(n);
  FlowState fs(g, valley(g, {4, 10}));
  const auto before = fs.solve();
  for (int v : before.index[1]) ASSERT_EQ(v, 10);
  const NodeIndexKD kd(g);
  EditHistory hist;
  // Contour across the row y = 2 at height z = 3.0 (node 6) on the outer surface.
  NudgeContour nc;
  nc.object = 0;
  nc.surface = 1;
  nc.axis = 1;
  nc.slice = 2;
  nc.points = {{0, 2, 3.0}, {double(n - 1), 2, 3.0}};
  const auto res = apply_nudge(fs, kd, nc, hist, JeiOptions{}, nullptr);
  // Every column of row 2 is hit at node 6; ties at 1 mm may pull in adjacent rows.
  std::set<int> row2;
  for (std::size_t k = 0; k < res.record.columns.size(); ++k) {
    const int col = res.record.columns[k];
    EXPECT_LE(std::abs(col / n - 2), 1);
    if (col / n == 2) {
      row2.insert(col);
      EXPECT_EQ(res.record.intersections[k], 6);
    }
  }
  EXPECT_EQ(row2.size(), static_cast<std::size_t>(n));
  const int s = res.record.surface;
  for (std::size_t k = 0; k < res.record.columns.size(); ++k)
    for (int j = 0; j < g.column_size(); ++j)
      EXPECT_EQ(fs.cost(s, res.record.columns[k], j), std::abs(j - res.record.intersections[k]) < 2 ? 0.0 : 1.0);
  // Untouched columns keep their costs.
  EXPECT_DOUBLE_EQ(fs.cost(s, 0, 10), 0.0);
  EXPECT_DOUBLE_EQ(fs.cost(s, 0, 9), 0.1);
  // Edited columns land within Delta of the drawn node.
  for (int col : row2) EXPECT_LE(std::abs(res.solution.index[s][col] - 6), 1);
  EXPECT_TRUE(g.feasible(g.flatten(res.solution)));
  EXPECT_TRUE(fs.last_stats().warm);
}

TEST(Jei, WarmResultEqualsColdSolveOnEditedCosts) {
  const ColumnGraph g = sheet(8);
  Rng rng = make_rng(3);
  FlowState fs(g, logismos::testing::random_costs(g, rng));
  fs.solve();
  const NodeIndexKD kd(g);
  EditHistory hist;
  for (int round = 0; round < 15; ++round) {
    NudgeContour nc;
    nc.axis = 0;
    nc.slice = static_cast<int>(uniform_index(rng, 8));
    const double z = uniform(rng, 1.0, 9.0);
    nc.points = {{double(nc.slice), 0.0, z}, {double(nc.slice), 3.5, z + 1}, {double(nc.slice), 7.0, z}};
    const auto res = apply_nudge(fs, kd, nc, hist, JeiOptions{}, nullptr);
    FlowState cold(g, fs.cost_field());
    const auto c = cold.solve();
    ASSERT_EQ(fs.quantized_objective(res.solution), cold.quantized_objective(c)) << "round " << round;
  }
}

TEST(Jei, UndoRestoresCostsAndSolution) {
  const ColumnGraph g = sheet(5);
  const CostField initial = valley(g, {3, 9});
  FlowState fs(g, initial);
  const auto base = fs.solve();
  const NodeIndexKD kd(g);
  EditHistory hist;
  NudgeContour a;
  a.axis = 1;
  a.slice = 1;
  a.points = {{0, 1, 2.0}, {4, 1, 2.0}};
  NudgeContour b = a;
  b.slice = 3;
  b.points = {{0, 3, 7.0}, {4, 3, 7.5}};
  const auto ra = apply_nudge(fs, kd, a, hist);
  const auto after_a = fs.cost_field();
  apply_nudge(fs, kd, b, hist);
  EXPECT_EQ(hist.size(), 2u);
  EXPECT_EQ(hist.sequence(), 2);
  EXPECT_EQ(hist.replay(initial), fs.cost_field(CostProvenance::Gradient));

  const auto ua = undo(fs, hist);
  EXPECT_EQ(fs.cost_field(), after_a);
  EXPECT_EQ(ua.index, ra.solution.index);
  const auto u0 = undo(fs, hist);
  EXPECT_EQ(fs.cost_field(CostProvenance::Gradient), initial);
  EXPECT_EQ(u0.index, base.index);
  EXPECT_THROW(undo(fs, hist), Error);
  // Sequence numbers never go backwards.
  apply_nudge(fs, kd, a, hist);
  EXPECT_EQ(hist.records().back().sequence, 3);
}

TEST(Jei, ValidationErrors) {
  const ColumnGraph g = sheet(4);
  FlowState fs(g, valley(g, {3, 9}));
  const NodeIndexKD kd(g);
  EditHistory hist;
  const VolumeGeometry geom = geometry_for_sheet(4);
  auto code_of = [&](const NudgeContour& nc, const FlowState* state = nullptr) {
    try {
      FlowState& f = state ? const_cast<FlowState&>(*state) : fs;
      apply_nudge(f, kd, nc, hist, JeiOptions{}, &geom);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Internal;
  };
  NudgeContour nc;
  nc.axis = 2;
  nc.slice = 6;
  nc.points = {{0, 0, 3.0}, {3, 0, 3.0}};
  EXPECT_EQ(code_of(nc), ErrorCode::FailedPrecondition);  // not solved yet
  fs.solve();
  NudgeContour empty = nc;
  empty.points.clear();
  EXPECT_EQ(code_of(empty), ErrorCode::InvalidArgument);
  NudgeContour off = nc;
  off.slice = 40;
  EXPECT_EQ(code_of(off), ErrorCode::OutOfRange);
  NudgeContour offplane = nc;
  offplane.points[1].z = 4.0;
  EXPECT_EQ(code_of(offplane), ErrorCode::InvalidArgument);
  NudgeContour badsurf = nc;
  badsurf.object = 1;
  EXPECT_EQ(code_of(badsurf), ErrorCode::NotFound);
  NudgeContour far = nc;
  far.slice = 6;
  far.points = {{40, 40, 3.0}};
  EXPECT_EQ(code_of(far), ErrorCode::NoIntersection);
  EXPECT_TRUE(hist.empty());
  JeiOptions zero;
  zero.tolerance = 0;
  EXPECT_THROW(apply_nudge(fs, kd, nc, hist, zero, &geom), Error);
}

TEST(Jei, DensifiedPolylineRespectsStep) {
  const auto pts = densify_polyline({{0, 0, 0}, {1, 0, 0}, {1, 2.5, 0}}, 0.2);
  EXPECT_EQ(pts.front(), (Vec3{0, 0, 0}));
  EXPECT_EQ(pts.back(), (Vec3{1, 2.5, 0}));
  for (std::size_t k = 1; k < pts.size(); ++k) EXPECT_LE(distance(pts[k], pts[k - 1]), 0.2 + 1e-12);
}
