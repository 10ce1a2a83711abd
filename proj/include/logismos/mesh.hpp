#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/geometry.hpp"
#include "logismos/random.hpp"

namespace logismos {

using Face = std::array<int, 3>;

/// Closed triangle surface. `clusters` is either empty or holds one id per vertex.
struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<Vec3> normals;
  std::vector<int> clusters;

  std::size_t vertex_count() const { return vertices.size(); }
  bool has_clusters() const { return !clusters.empty(); }
};

/// Axis-aligned volume of interest for one object.
struct VOIBox {
  Box3 box;
  int object = 0;
};

inline Box3 bounding_box(const TriangleMesh& m) {
  Box3 b;
  for (const auto& v : m.vertices) b.expand(v);
  return b;
}

inline Vec3 centroid(const TriangleMesh& m) {
  Vec3 c;
  for (const auto& v : m.vertices) c += v;
  return m.vertices.empty() ? c : c / static_cast<double>(m.vertices.size());
}

/// Area-weighted vertex normals, unit length.
inline void compute_normals(TriangleMesh& m) {
  m.normals.assign(m.vertices.size(), Vec3{});
  for (const auto& f : m.faces) {
    const Vec3 n = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
    for (int c = 0; c < 3; ++c) m.normals[f[c]] += n;
  }
  for (auto& n : m.normals) n = normalized(n);
}

inline double face_area(const TriangleMesh& m, const Face& f) {
  return 0.5 * norm(cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]));
}

/// Unique undirected vertex pairs (a < b) connected by a mesh edge, sorted.
inline std::vector<std::pair<int, int>> mesh_edges(const TriangleMesh& m) {
  std::vector<std::pair<int, int>> e;
  e.reserve(m.faces.size() * 3);
  for (const auto& f : m.faces)
    for (int c = 0; c < 3; ++c) {
      int a = f[c], b = f[(c + 1) % 3];
      if (a > b) std::swap(a, b);
      e.emplace_back(a, b);
    }
  std::sort(e.begin(), e.end());
  e.erase(std::unique(e.begin(), e.end()), e.end());
  return e;
}

/// Throws unless every face index is valid and every edge is shared by exactly
/// two faces with opposite orientation.
inline void validate_closed_manifold(const TriangleMesh& m) {
  const int n = static_cast<int>(m.vertices.size());
  std::map<std::pair<int, int>, int> directed;
  for (const auto& f : m.faces) {
    for (int c = 0; c < 3; ++c) {
      require(f[c] >= 0 && f[c] < n, ErrorCode::InvalidArgument, "face index out of range");
      const int a = f[c], b = f[(c + 1) % 3];
      require(a != b, ErrorCode::InvalidArgument, "degenerate face");
      if (++directed[{a, b}] > 1) fail(ErrorCode::InvalidArgument, "mesh is not manifold (duplicated directed edge)");
    }
  }
  for (const auto& [edge, count] : directed) {
    if (!directed.count({edge.second, edge.first}))
      fail(ErrorCode::InvalidArgument, "mesh is not closed (boundary edge)");
  }
}

/// Subdivided icosahedron on the unit sphere; level 0 has 12 vertices, level L
/// has 10*4^L + 2. Faces are counter-clockwise seen from outside.
inline TriangleMesh icosphere(int level) {
  require(level >= 0 && level <= 7, ErrorCode::InvalidArgument, "icosphere level out of range");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : m.vertices) v = normalized(v);
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      m.vertices.push_back(normalized((m.vertices[a] + m.vertices[b]) * 0.5));
      const int id = static_cast<int>(m.vertices.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      const int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.faces = std::move(next);
  }
  compute_normals(m);
  return m;
}

// ---------------------------------------------------------------------------
// OBJ subset (v / f lines) and the per-vertex cluster sidecar

inline void write_obj(const TriangleMesh& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write mesh: " + path.string());
  out.precision(17);
  for (const auto& v : m.vertices) out << "v " << v.x << ' ' << v.y << ' ' << v.z << '\n';
  for (const auto& f : m.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!out) fail(ErrorCode::Io, "write failed: " + path.string());
}

inline TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open mesh: " + path.string());
  TriangleMesh m;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x >> v.y >> v.z)) fail(ErrorCode::InvalidArgument, "malformed vertex line: " + line);
      m.vertices.push_back(v);
    } else if (tag == "f") {
      Face f{};
      for (int c = 0; c < 3; ++c) {
        std::string tok;
        if (!(ls >> tok)) fail(ErrorCode::InvalidArgument, "malformed face line: " + line);
        f[c] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      std::string extra;
      if (ls >> extra) fail(ErrorCode::InvalidArgument, "only triangle faces are supported");
      m.faces.push_back(f);
    }
  }
  for (const auto& f : m.faces)
    for (int c : f)
      require(c >= 0 && c < static_cast<int>(m.vertices.size()), ErrorCode::InvalidArgument,
              "face index out of range in " + path.string());
  compute_normals(m);
  return m;
}

inline void write_clusters(const TriangleMesh& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write cluster file: " + path.string());
  for (int c : m.clusters) out << c << '\n';
  if (!out) fail(ErrorCode::Io, "write failed: " + path.string());
}

inline void read_clusters(TriangleMesh& m, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open cluster file: " + path.string());
  std::vector<int> ids;
  int c;
  while (in >> c) ids.push_back(c);
  require(ids.size() == m.vertices.size(), ErrorCode::InvalidArgument,
          "cluster file has " + std::to_string(ids.size()) + " entries for " + std::to_string(m.vertices.size()) +
              " vertices");
  m.clusters = std::move(ids);
}

// ---------------------------------------------------------------------------
// Shape operations

/// Vertex-wise mean of meshes that share topology.
inline TriangleMesh mean_shape(const std::vector<TriangleMesh>& meshes) {
  require(!meshes.empty(), ErrorCode::InvalidArgument, "mean_shape needs at least one mesh");
  const auto& ref = meshes.front();
  for (const auto& m : meshes) {
    if (m.vertices.size() != ref.vertices.size() || m.faces != ref.faces)
      fail(ErrorCode::InvalidArgument, "mean_shape: topology mismatch");
  }
  TriangleMesh out;
  out.faces = ref.faces;
  out.vertices.assign(ref.vertices.size(), Vec3{});
  for (const auto& m : meshes)
    for (std::size_t i = 0; i < m.vertices.size(); ++i) out.vertices[i] += m.vertices[i];
  const double inv = 1.0 / static_cast<double>(meshes.size());
  for (auto& v : out.vertices) v *= inv;
  compute_normals(out);
  return out;
}

/// Per-axis scale + translation taking one box onto another.
struct AxisAffine {
  Vec3 scale{1, 1, 1};
  Vec3 offset{0, 0, 0};
  Vec3 apply(const Vec3& p) const { return hadamard(p, scale) + offset; }

  static AxisAffine box_to_box(const Box3& from, const Box3& to) {
    const Vec3 e = from.extent();
    require(e.x > 0 && e.y > 0 && e.z > 0, ErrorCode::InvalidArgument, "degenerate source box (zero extent)");
    AxisAffine a;
    const Vec3 t = to.extent();
    a.scale = {t.x / e.x, t.y / e.y, t.z / e.z};
    a.offset = to.lo - hadamard(from.lo, a.scale);
    return a;
  }
};

/// Maps `s0`'s bounding box onto the VOI with an anisotropic scale + translation.
inline TriangleMesh fit_to_voi(const TriangleMesh& s0, const VOIBox& voi) {
  const Vec3 ve = voi.box.extent();
  require(ve.x > 0 && ve.y > 0 && ve.z > 0, ErrorCode::InvalidArgument, "VOI box must have max > min");
  const AxisAffine a = AxisAffine::box_to_box(bounding_box(s0), voi.box);
  TriangleMesh out = s0;
  for (auto& v : out.vertices) v = a.apply(v);
  // Snap extreme coordinates so the fitted box matches the VOI to rounding.
  const Box3 b = bounding_box(s0);
  for (std::size_t i = 0; i < out.vertices.size(); ++i)
    for (int ax = 0; ax < 3; ++ax) {
      if (s0.vertices[i][ax] == b.lo[ax]) out.vertices[i][ax] = voi.box.lo[ax];
      if (s0.vertices[i][ax] == b.hi[ax]) out.vertices[i][ax] = voi.box.hi[ax];
    }
  compute_normals(out);
  return out;
}

struct KMeansReport {
  std::vector<double> sse_per_iteration;  ///< objective after each assignment step
  int iterations = 0;
  int reseeded_clusters = 0;
};

/// Lloyd's k-means on vertex coordinates with k-means++ seeding. Empty clusters
/// are re-seeded at the vertex farthest from its centre.
inline TriangleMesh kmeans_parcellate(const TriangleMesh& mesh, int k, std::uint64_t seed,
                                      KMeansReport* report = nullptr, int max_iterations = 100,
                                      double tolerance_mm = 1e-6) {
  const int n = static_cast<int>(mesh.vertices.size());
  require(k >= 1, ErrorCode::InvalidArgument, "k must be positive");
  require(k <= n, ErrorCode::InvalidArgument, "k exceeds vertex count");
  const auto& pts = mesh.vertices;
  Rng rng = make_rng(seed, 0x6b6d);

  std::vector<Vec3> centers;
  centers.reserve(k);
  centers.push_back(pts[uniform_index(rng, n)]);
  std::vector<double> d2(n);
  for (int i = 0; i < n; ++i) d2[i] = norm2(pts[i] - centers[0]);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (double d : d2) total += d;
    int pick = 0;
    if (total > 0.0) {
      double r = uniform01(rng) * total;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<int>(uniform_index(rng, n));
    }
    centers.push_back(pts[pick]);
    for (int i = 0; i < n; ++i) d2[i] = std::min(d2[i], norm2(pts[i] - centers.back()));
  }

  std::vector<int> assign(n, 0);
  KMeansReport local;
  auto assign_step = [&]() {
    double sse = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = norm2(pts[i] - centers[c]);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      assign[i] = arg;
      sse += best;
    }
    return sse;
  };
  auto fix_empty = [&]() {
    bool changed = true;
    while (changed) {
      changed = false;
      std::vector<int> counts(k, 0);
      for (int a : assign) ++counts[a];
      for (int c = 0; c < k; ++c) {
        if (counts[c] > 0) continue;
        int far = -1;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          if (counts[assign[i]] <= 1) continue;
          const double d = norm2(pts[i] - centers[assign[i]]);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        if (far < 0) continue;
        --counts[assign[far]];
        assign[far] = c;
        counts[c] = 1;
        centers[c] = pts[far];
        ++local.reseeded_clusters;
        changed = true;
      }
    }
  };

  double sse = assign_step();
  fix_empty();
  local.sse_per_iteration.push_back(sse);
  for (int it = 0; it < max_iterations; ++it) {
    std::vector<Vec3> next(k, Vec3{});
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      next[assign[i]] += pts[i];
      ++counts[assign[i]];
    }
    double moved = 0.0;
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      next[c] /= counts[c];
      moved = std::max(moved, distance(next[c], centers[c]));
      centers[c] = next[c];
    }
    sse = assign_step();
    fix_empty();
    // Re-seeding can only lower the objective, so recompute after it.
    double after = 0.0;
    for (int i = 0; i < n; ++i) after += norm2(pts[i] - centers[assign[i]]);
    local.sse_per_iteration.push_back(std::min(sse, after));
    local.iterations = it + 1;
    if (moved < tolerance_mm) break;
  }

  TriangleMesh out = mesh;
  out.clusters = assign;
  if (report) *report = std::move(local);
  return out;
}

}  // namespace logismos
