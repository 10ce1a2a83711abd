#include <gtest/gtest.h>

#include <set>

#include "logismos/mesh.hpp"
#include "test_util.hpp"

using namespace logismos;

TEST(Mesh, IcosphereCountsAndClosure) {
  for (int level = 0; level <= 3; ++level) {
    const TriangleMesh m = icosphere(level);
    const std::size_t f = 20u << (2 * level);
    EXPECT_EQ(m.faces.size(), f);
    EXPECT_EQ(m.vertices.size(), f / 2 + 2);  // Euler: V - E + F = 2 with E = 3F/2
    EXPECT_EQ(mesh_edges(m).size(), 3 * f / 2);
    validate_closed_manifold(m);
    for (const auto& v : m.vertices) EXPECT_NEAR(norm(v), 1.0, 1e-12);
  }
}

TEST(Mesh, NormalsPointOutwardOnSphere) {
  const TriangleMesh m = icosphere(2);
  ASSERT_EQ(m.normals.size(), m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) EXPECT_GT(dot(m.normals[i], m.vertices[i]), 0.99);
}

TEST(Mesh, OpenMeshFailsManifoldCheck) {
  TriangleMesh m = icosphere(1);
  m.faces.pop_back();
  EXPECT_THROW(validate_closed_manifold(m), Error);
}

TEST(Mesh, ObjAndClusterRoundTrip) {
  TempDir dir;
  TriangleMesh m = kmeans_parcellate(icosphere(2), 5, 3);
  for (auto& v : m.vertices) v = v * 3.3 + Vec3{1.0 / 3, 2.0 / 7, -5.0 / 11};
  write_obj(m, dir.path / "m.obj");
  write_clusters(m, dir.path / "m.clusters");
  TriangleMesh r = read_obj(dir.path / "m.obj");
  read_clusters(r, dir.path / "m.clusters");
  ASSERT_EQ(r.vertices.size(), m.vertices.size());
  EXPECT_EQ(r.faces, m.faces);
  EXPECT_EQ(r.clusters, m.clusters);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    EXPECT_EQ(r.vertices[i].x, m.vertices[i].x);
    EXPECT_EQ(r.vertices[i].z, m.vertices[i].z);
  }
}

TEST(Mesh, MeanShapeRequiresSharedTopology) {
  TriangleMesh a = icosphere(1), b = icosphere(1);
  for (auto& v : b.vertices) v = v * 3.0;
  const TriangleMesh m = mean_shape({a, b});
  for (std::size_t i = 0; i < m.vertices.size(); ++i) EXPECT_NEAR(norm(m.vertices[i]), 2.0, 1e-12);
  EXPECT_THROW(mean_shape({a, icosphere(2)}), Error);
}

TEST(Mesh, FitToVoiMatchesBoxExactly) {
  const TriangleMesh s0 = icosphere(2);
  const VOIBox voi{{{1, 2, 3}, {4, 8, 5}}, 0};
  const Box3 b = bounding_box(fit_to_voi(s0, voi));
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(b.lo[a], voi.box.lo[a]);
    EXPECT_EQ(b.hi[a], voi.box.hi[a]);
  }
  EXPECT_THROW(fit_to_voi(s0, {{{1, 2, 3}, {1, 8, 5}}, 0}), Error);
}

TEST(Mesh, KMeansIsDeterministicAndNonIncreasing) {
  const TriangleMesh m = icosphere(3);
  KMeansReport rep;
  const TriangleMesh a = kmeans_parcellate(m, 8, 42, &rep);
  const TriangleMesh b = kmeans_parcellate(m, 8, 42);
  EXPECT_EQ(a.clusters, b.clusters);
  for (std::size_t i = 1; i < rep.sse_per_iteration.size(); ++i)
    EXPECT_LE(rep.sse_per_iteration[i], rep.sse_per_iteration[i - 1] + 1e-9);
  std::set<int> used(a.clusters.begin(), a.clusters.end());
  EXPECT_EQ(used.size(), 8u);
  EXPECT_THROW(kmeans_parcellate(icosphere(0), 13, 1), Error);
}

TEST(Mesh, KMeansAssignsEachVertexToNearestCentre) {
  const TriangleMesh m = kmeans_parcellate(icosphere(3), 6, 9);
  std::vector<Vec3> c(6);
  std::vector<int> n(6, 0);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    c[m.clusters[i]] += m.vertices[i];
    ++n[m.clusters[i]];
  }
  for (int k = 0; k < 6; ++k) c[k] /= n[k];
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    for (int k = 0; k < 6; ++k)
      EXPECT_LE(norm2(m.vertices[i] - c[m.clusters[i]]), norm2(m.vertices[i] - c[k]) + 1e-9);
}
