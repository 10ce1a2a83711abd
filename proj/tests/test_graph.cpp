#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "logismos/elf.hpp"
#include "logismos/graph.hpp"
#include "logismos/mesh.hpp"
#include "test_util.hpp"

using namespace logismos;
using logismos::testing::random_small_graph;

namespace {

TriangleMesh scaled_sphere(int level, double r, const Vec3& c = {}) {
  TriangleMesh m = icosphere(level);
  for (auto& v : m.vertices) v = c + v * r;
  compute_normals(m);
  return m;
}

GraphParams small_params() {
  GraphParams p = GraphParams::gradient();
  p.column_size = 31;
  p.inter_surface_max = 15;
  p.inter_object_max = 30;
  return p;
}

}  // namespace

TEST(Elf, ColumnsHaveExactSpacingAndAnchor) {
  const TriangleMesh m = scaled_sphere(2, 6.0);
  const GraphParams p = small_params();
  const auto cols = build_elf_columns(m, p);
  ASSERT_EQ(cols.size(), m.vertices.size());
  const int A = p.anchor_index();
  for (std::size_t v = 0; v < cols.size(); ++v) {
    const auto& c = cols[v];
    ASSERT_EQ(c.size(), p.column_size);
    EXPECT_EQ(c.vertex, static_cast<int>(v));
    EXPECT_EQ(c.nodes[A].x, m.vertices[v].x);
    for (int j = 1; j < c.size(); ++j) EXPECT_NEAR(distance(c.nodes[j], c.nodes[j - 1]), p.node_spacing, 1e-9);
  }
}

TEST(Elf, SphereColumnsAreRadial) {
  // The field of a uniformly charged sphere is radial; the faceted mesh only
  // tilts it slightly.
  const TriangleMesh m = scaled_sphere(3, 6.0);
  const GraphParams p = small_params();
  const int A = p.anchor_index();
  for (const auto& c : build_elf_columns(m, p)) {
    const Vec3 u = normalized(c.nodes[A]);
    for (int j = 0; j < c.size(); ++j)
      if (j != A) EXPECT_GT(std::abs(dot(normalized(c.nodes[j] - c.nodes[A]), u)), std::cos(0.05));
  }
}

TEST(Elf, NeighbouringColumnsDoNotCross) {
  const TriangleMesh m = scaled_sphere(2, 5.0);
  const GraphParams p = small_params();
  const auto cols = build_elf_columns(m, p);
  // Outward nodes of adjacent columns keep a positive separation that grows outward.
  for (const auto& [a, b] : mesh_edges(m)) {
    double prev = 0;
    for (int j = p.anchor_index(); j < p.column_size; ++j) {
      const double d = distance(cols[a].nodes[j], cols[b].nodes[j]);
      EXPECT_GT(d, prev - 1e-9);
      prev = d;
    }
  }
}

TEST(Elf, BoundsViolationIsReported) {
  const TriangleMesh m = scaled_sphere(1, 4.0);
  ElfOptions opt;
  opt.bounds = Box3{{-5, -5, -5}, {5, 5, 5}};
  try {
    build_elf_columns(m, small_params(), 0, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::OutOfRange);
  }
  opt.bounds = Box3{{-20, -20, -20}, {20, 20, 20}};
  EXPECT_NO_THROW(build_elf_columns(m, small_params(), 0, opt));
}

TEST(Graph, ConstraintCountsFollowTopology) {
  const TriangleMesh m = scaled_sphere(1, 5.0);
  const GraphParams p = small_params();
  std::vector<ObjectColumns> objs{object_columns(build_elf_columns(m, p), m, 2)};
  const ColumnGraph g = assemble_graph(objs, p);
  const std::size_t edges = mesh_edges(m).size();
  EXPECT_EQ(g.surface_count(), 2);
  EXPECT_EQ(g.var_count(), static_cast<int>(2 * m.vertices.size()));
  EXPECT_EQ(g.constraints.size(), 2 * 2 * edges + 2 * m.vertices.size());
}

TEST(Graph, FacingObjectsArePaired) {
  const GraphParams p = small_params();
  const TriangleMesh a = scaled_sphere(2, 5.0, {0, 0, 5.6}), b = scaled_sphere(2, 5.0, {0, 0, -5.6});
  std::vector<ObjectColumns> objs{object_columns(build_elf_columns(a, p, 0), a, 2),
                                  object_columns(build_elf_columns(b, p, 1), b, 2)};
  const ColumnGraph g = assemble_graph(objs, p);
  ASSERT_FALSE(g.couplings.empty());
  std::set<int> ua, ub;
  for (const auto& c : g.couplings) {
    EXPECT_TRUE(ua.insert(c.column_a).second);
    EXPECT_TRUE(ub.insert(c.column_b).second);
    // Anchor-to-anchor separation in nodes equals offset - 2A.
    const double gap = distance(g.objects[0].columns[c.column_a].nodes[p.anchor_index()],
                                g.objects[1].columns[c.column_b].nodes[p.anchor_index()]);
    EXPECT_NEAR(c.offset - 2 * p.anchor_index(), gap / p.node_spacing, 1.0 + 2.0);
  }
}

TEST(Graph, RejectsBadAdjacencyAndSizes) {
  const GraphParams p = small_params();
  ObjectColumns oc;
  oc.columns.push_back(straight_column(0, 0, {}, {0, 0, 1}, p.column_size, p.node_spacing));
  oc.adjacency.push_back({0, 3});
  EXPECT_THROW(assemble_graph({oc}, p), Error);
  oc.adjacency.clear();
  oc.columns.push_back(straight_column(1, 0, {}, {0, 0, 1}, p.column_size - 1, p.node_spacing));
  EXPECT_THROW(assemble_graph({oc}, p), Error);
  GraphParams bad = p;
  bad.inter_surface_min = 5;
  bad.inter_surface_max = 2;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Graph, FeasiblePredicateAgreesWithDirectCheck) {
  Rng rng = make_rng(17);
  int feasible = 0;
  for (int t = 0; t < 200; ++t) {
    const ColumnGraph g = random_small_graph(rng);
    for (int k = 0; k < 20; ++k) {
      std::vector<int> x(g.var_count());
      for (auto& v : x) v = static_cast<int>(uniform_index(rng, g.column_size()));
      const bool direct = constraint_violations(g, g.unflatten(x)).empty();
      EXPECT_EQ(g.feasible(x), direct);
      feasible += direct;
    }
  }
  EXPECT_GT(feasible, 0);
}

TEST(Graph, CacheRoundTrip) {
  TempDir dir;
  Rng rng = make_rng(5);
  const GraphParams p = small_params();
  const TriangleMesh a = scaled_sphere(1, 5.0, {0, 0, 5.6}), b = scaled_sphere(1, 5.0, {0, 0, -5.6});
  const ColumnGraph g = assemble_graph(
      {object_columns(build_elf_columns(a, p, 0), a, 2), object_columns(build_elf_columns(b, p, 1), b, 2)}, p);
  save_graph_cache(g, dir.path / "g.lgcg");
  const ColumnGraph r = load_graph_cache(dir.path / "g.lgcg");
  EXPECT_EQ(r.params, g.params);
  EXPECT_EQ(r.couplings, g.couplings);
  ASSERT_EQ(r.constraints.size(), g.constraints.size());
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i)
      for (int j = 0; j < g.column_size(); ++j) ASSERT_EQ(r.column(s, i).nodes[j].x, g.column(s, i).nodes[j].x);
}

TEST(Graph, CorruptCacheIsRejected) {
  TempDir dir;
  { std::ofstream(dir.path / "bad.lgcg") << "not a graph"; }
  EXPECT_THROW(load_graph_cache(dir.path / "bad.lgcg"), Error);
}

TEST(Graph, SurfaceMeshUsesChosenNodes) {
  const TriangleMesh m = scaled_sphere(1, 5.0);
  const GraphParams p = small_params();
  const ColumnGraph g = assemble_graph({object_columns(build_elf_columns(m, p), m, 1)}, p);
  SurfaceSolution sol;
  sol.index.assign(1, std::vector<int>(m.vertices.size(), p.anchor_index() + 3));
  const TriangleMesh out = surface_mesh(g, sol, 0);
  EXPECT_EQ(out.faces, m.faces);
  for (std::size_t v = 0; v < m.vertices.size(); ++v)
    EXPECT_NEAR(norm(out.vertices[v]), 5.0 + 3 * p.node_spacing, 0.02);
}
