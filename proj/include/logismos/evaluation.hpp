#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/geometry.hpp"
#include "logismos/graph.hpp"
#include "logismos/mesh.hpp"

namespace logismos {

/// Moller-Trumbore: parameter t in [0, 1] where segment a->b crosses triangle (p0, p1, p2).
inline std::optional<double> segment_triangle(const Vec3& a, const Vec3& b, const Vec3& p0, const Vec3& p1,
                                              const Vec3& p2) {
  const Vec3 d = b - a;
  const Vec3 e1 = p1 - p0, e2 = p2 - p0;
  const Vec3 h = cross(d, e2);
  const double det = dot(e1, h);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 s = a - p0;
  const double u = inv * dot(s, h);
  if (u < -1e-12 || u > 1 + 1e-12) return std::nullopt;
  const Vec3 q = cross(s, e1);
  const double v = inv * dot(d, q);
  if (v < -1e-12 || u + v > 1 + 1e-12) return std::nullopt;
  const double t = inv * dot(e2, q);
  if (t < 0 || t > 1) return std::nullopt;
  return t;
}

/// Uniform-grid bucket index over triangle bounding boxes.
class TriangleIndex {
 public:
  explicit TriangleIndex(const TriangleMesh& mesh, double cell_mm = 1.5) : mesh_(&mesh), cell_(cell_mm) {
    require(!mesh.faces.empty(), ErrorCode::InvalidArgument, "cannot index a mesh without faces");
    for (int f = 0; f < static_cast<int>(mesh.faces.size()); ++f) {
      Box3 b;
      for (int v : mesh.faces[f]) b.expand(mesh.vertices[v]);
      const auto lo = key(b.lo), hi = key(b.hi);
      for (int z = lo[2]; z <= hi[2]; ++z)
        for (int y = lo[1]; y <= hi[1]; ++y)
          for (int x = lo[0]; x <= hi[0]; ++x) buckets_[hash({x, y, z})].push_back(f);
    }
  }

  /// Every crossing parameter t of segment a->b with the mesh.
  void crossings(const Vec3& a, const Vec3& b, std::vector<double>& out) const {
    Box3 sb;
    sb.expand(a);
    sb.expand(b);
    const auto lo = key(sb.lo), hi = key(sb.hi);
    seen_.clear();
    for (int z = lo[2]; z <= hi[2]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[0]; x <= hi[0]; ++x) {
          const auto it = buckets_.find(hash({x, y, z}));
          if (it == buckets_.end()) continue;
          for (int f : it->second) {
            if (std::find(seen_.begin(), seen_.end(), f) != seen_.end()) continue;
            seen_.push_back(f);
            const auto& F = mesh_->faces[f];
            if (auto t = segment_triangle(a, b, mesh_->vertices[F[0]], mesh_->vertices[F[1]], mesh_->vertices[F[2]]))
              out.push_back(*t);
          }
        }
  }

 private:
  std::array<int, 3> key(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x / cell_)), static_cast<int>(std::floor(p.y / cell_)),
            static_cast<int>(std::floor(p.z / cell_))};
  }
  static long long hash(std::array<int, 3> k) {
    return (static_cast<long long>(k[0]) * 73856093LL) ^ (static_cast<long long>(k[1]) * 19349663LL) ^
           (static_cast<long long>(k[2]) * 83492791LL);
  }
  const TriangleMesh* mesh_;
  double cell_;
  std::unordered_map<long long, std::vector<int>> buckets_;
  mutable std::vector<int> seen_;
};

/// Arc-length positions (mm from node 0) of every crossing of a column with the mesh.
inline std::vector<double> column_crossings(const Column& c, const TriangleIndex& index) {
  std::vector<double> out, ts;
  double arc = 0;
  for (int j = 0; j + 1 < c.size(); ++j) {
    ts.clear();
    index.crossings(c.nodes[j], c.nodes[j + 1], ts);
    const double len = distance(c.nodes[j], c.nodes[j + 1]);
    for (double t : ts) out.push_back(arc + t * len);
    arc += len;
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Per column, the crossing nearest the anchor node; nullopt when the column misses the mesh.
inline std::vector<std::optional<double>> truth_positions(const ColumnGraph& g, int s, const TriangleMesh& truth) {
  const TriangleIndex index(truth);
  const double anchor = g.params.anchor_index() * g.params.node_spacing;
  std::vector<std::optional<double>> out(g.columns_of_surface(s));
  for (int i = 0; i < g.columns_of_surface(s); ++i) {
    const auto xs = column_crossings(g.column(s, i), index);
    for (double x : xs)
      if (!out[i] || std::abs(x - anchor) < std::abs(*out[i] - anchor)) out[i] = x;
  }
  return out;
}

struct ErrorStats {
  double signed_mean = 0, signed_sd = 0;
  double unsigned_mean = 0, unsigned_sd = 0;
  int count = 0;
  int missing = 0;
};

inline ErrorStats summarize(const std::vector<double>& signed_errors, int missing = 0) {
  ErrorStats st;
  st.count = static_cast<int>(signed_errors.size());
  st.missing = missing;
  if (st.count == 0) return st;
  for (double e : signed_errors) {
    st.signed_mean += e;
    st.unsigned_mean += std::abs(e);
  }
  st.signed_mean /= st.count;
  st.unsigned_mean /= st.count;
  for (double e : signed_errors) {
    st.signed_sd += (e - st.signed_mean) * (e - st.signed_mean);
    st.unsigned_sd += (std::abs(e) - st.unsigned_mean) * (std::abs(e) - st.unsigned_mean);
  }
  st.signed_sd = std::sqrt(st.signed_sd / st.count);
  st.unsigned_sd = std::sqrt(st.unsigned_sd / st.count);
  return st;
}

struct SurfaceErrors {
  std::vector<double> signed_mm;         ///< per column; NaN where the truth is missed
  ErrorStats stats;
};

/// Along-column error of surface s: chosen node arc position minus truth crossing,
/// positive outside the truth. A column without a crossing is an error unless
/// allow_missing, in which case it is skipped and counted.
inline SurfaceErrors surface_error(const ColumnGraph& g, const SurfaceSolution& sol, int s,
                                   const std::vector<std::optional<double>>& truth, bool allow_missing = false) {
  require(static_cast<int>(truth.size()) == g.columns_of_surface(s), ErrorCode::InvalidArgument,
          "truth positions do not match the surface");
  SurfaceErrors out;
  out.signed_mm.assign(truth.size(), std::nan(""));
  std::vector<double> valid;
  int missing = 0;
  for (int i = 0; i < static_cast<int>(truth.size()); ++i) {
    if (!truth[i]) {
      if (!allow_missing)
        fail(ErrorCode::NoIntersection, "column " + std::to_string(i) + " of surface " + std::to_string(s) +
                                            " does not cross the truth surface");
      ++missing;
      continue;
    }
    const double e = sol.index[s][i] * g.column(s, i).spacing - *truth[i];
    out.signed_mm[i] = e;
    valid.push_back(e);
  }
  out.stats = summarize(valid, missing);
  return out;
}

inline SurfaceErrors surface_error(const ColumnGraph& g, const SurfaceSolution& sol, int s, const TriangleMesh& truth,
                                   bool allow_missing = false) {
  return surface_error(g, sol, s, truth_positions(g, s, truth), allow_missing);
}

/// One (object, surface) row of one volume.
struct ErrorRow {
  std::string volume;
  int object = 0;
  int surface = 0;
  ErrorStats stats;
};

/// Error rows of one cost mode plus per-(object, surface) aggregates, which are
/// mean and sd across volumes of the per-volume means.
struct ErrorReport {
  std::string mode;
  std::vector<ErrorRow> rows;

  std::vector<ErrorRow> aggregate() const {
    std::vector<ErrorRow> agg;
    for (int o = 0; o < 2; ++o)
      for (int s = 0; s < 2; ++s) {
        std::vector<double> sm, um;
        for (const auto& r : rows)
          if (r.object == o && r.surface == s) {
            sm.push_back(r.stats.signed_mean);
            um.push_back(r.stats.unsigned_mean);
          }
        if (sm.empty()) continue;
        ErrorRow a;
        a.volume = "aggregate";
        a.object = o;
        a.surface = s;
        const auto ss = summarize(sm), us = summarize(um);
        a.stats.signed_mean = ss.signed_mean;
        a.stats.signed_sd = ss.signed_sd;
        a.stats.unsigned_mean = us.signed_mean;  // the values are already non-negative
        a.stats.unsigned_sd = us.signed_sd;
        a.stats.count = static_cast<int>(sm.size());
        agg.push_back(a);
      }
    return agg;
  }
};

}  // namespace logismos
