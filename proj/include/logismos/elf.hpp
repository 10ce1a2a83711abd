#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/geometry.hpp"
#include "logismos/graph.hpp"
#include "logismos/mesh.hpp"

namespace logismos {

/// Point charges at face centroids, charge = face area. Stored as separate
/// coordinate arrays so the field sum vectorises.
class ChargeField {
 public:
  explicit ChargeField(const TriangleMesh& mesh) {
    const std::size_t n = mesh.faces.size();
    x_.reserve(n);
    y_.reserve(n);
    z_.reserve(n);
    q_.reserve(n);
    for (const auto& f : mesh.faces) {
      const Vec3 c = (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0;
      x_.push_back(c.x);
      y_.push_back(c.y);
      z_.push_back(c.z);
      q_.push_back(face_area(mesh, f));
    }
  }

  struct Sample {
    Vec3 field;
    double nearest = 0.0;  ///< distance to the closest charge
  };

  Sample operator()(const Vec3& p) const {
    double ex = 0, ey = 0, ez = 0, dmin2 = std::numeric_limits<double>::infinity();
    const std::size_t n = q_.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = p.x - x_[i], dy = p.y - y_[i], dz = p.z - z_[i];
      const double r2 = dx * dx + dy * dy + dz * dz;
      dmin2 = std::min(dmin2, r2);
      const double inv = q_[i] / (r2 * std::sqrt(r2));
      ex += dx * inv;
      ey += dy * inv;
      ez += dz * inv;
    }
    return {{ex, ey, ez}, std::sqrt(dmin2)};
  }

  std::size_t size() const { return q_.size(); }

 private:
  std::vector<double> x_, y_, z_, q_;
};

struct ElfOptions {
  /// When set, a column node outside this box is a hard error.
  std::optional<Box3> bounds;
  double singular_distance = 1e-6;
  /// Traces longer than this multiple of the required length are rejected.
  double max_length_factor = 8.0;
};

namespace detail {

/// Next node at chord distance `step` from `from` along segment a->b, if any.
inline std::optional<Vec3> chord_hit(const Vec3& from, double step, const Vec3& a, const Vec3& b) {
  const Vec3 d = b - a, f = a - from;
  const double A = dot(d, d);
  if (A == 0) return std::nullopt;
  const double B = 2 * dot(f, d), C = dot(f, f) - step * step;
  const double disc = B * B - 4 * A * C;
  if (disc < 0) return std::nullopt;
  const double t = (-B + std::sqrt(disc)) / (2 * A);
  if (t < 0 || t > 1) return std::nullopt;
  return a + d * t;
}

}  // namespace detail

/// Traces the outward field line from `start` and returns `count` nodes
/// spaced exactly `spacing` apart (chord length), excluding `start`.
inline std::vector<Vec3> trace_field_line(const ChargeField& field, const Vec3& start, const Vec3& fallback_dir,
                                          int count, double spacing, const ElfOptions& opt = {}) {
  std::vector<Vec3> nodes;
  if (count <= 0) return nodes;
  nodes.reserve(count);
  auto unit_field = [&](const Vec3& p, double& nearest) -> std::optional<Vec3> {
    const auto s = field(p);
    nearest = s.nearest;
    if (s.nearest < opt.singular_distance) return std::nullopt;
    const double n = norm(s.field);
    if (!(n > 0) || !std::isfinite(n)) return std::nullopt;
    return s.field / n;
  };

  Vec3 p = start, node = start;
  double nearest = 0;
  auto dir0 = unit_field(p, nearest);
  Vec3 prev_dir = dir0 && dot(*dir0, fallback_dir) > 0 ? *dir0 : normalized(fallback_dir);
  const double hmin = spacing / 4, hmax = 2 * spacing;
  const double max_len = opt.max_length_factor * spacing * count + 10 * spacing;
  double travelled = 0;
  double h = -1;  // negative: pick a fresh step from the charge distance

  while (static_cast<int>(nodes.size()) < count) {
    if (travelled > max_len) fail(ErrorCode::Internal, "field line failed to reach the required column length");
    // RK4 on the unit direction field. At the seed point the field of the
    // adjacent charges is ill-conditioned, so the first stage reuses prev_dir.
    std::optional<Vec3> k1 = unit_field(p, nearest), k2, k3, k4;
    if (h < 0) h = std::clamp(0.25 * nearest, hmin, hmax);
    if (travelled == 0) k1 = prev_dir;
    if (k1) k2 = unit_field(p + *k1 * (h / 2), nearest);
    if (k2) k3 = unit_field(p + *k2 * (h / 2), nearest);
    if (k3) k4 = unit_field(p + *k3 * h, nearest);
    Vec3 step;
    if (k4) step = (*k1 + *k2 * 2.0 + *k3 * 2.0 + *k4) * (h / 6.0);
    if (!k4 || dot(step, prev_dir) <= 0) {
      h /= 2;
      if (h >= hmin / 64) continue;
      // The field turns back on itself here, which happens in sharp dents of
      // a folded surface. Step straight on and retry beyond the dent.
      step = prev_dir * hmin;
    }
    const Vec3 q = p + step;
    // Emit every node whose sphere around the previous node the segment crosses.
    while (static_cast<int>(nodes.size()) < count && distance(q, node) >= spacing) {
      auto hit = detail::chord_hit(node, spacing, p, q);
      if (!hit) break;
      nodes.push_back(*hit);
      node = *hit;
    }
    prev_dir = normalized(step);
    travelled += norm(step);
    p = q;
    h = -1;
  }
  return nodes;
}

/// Builds one ELF column per mesh vertex with the vertex at anchor_index().
/// Inward nodes continue the initial outward tangent backwards in a straight
/// line: the field of a closed charged surface vanishes inside it, so the
/// reversed trace has no usable direction there.
inline std::vector<Column> build_elf_columns(const TriangleMesh& mesh, const GraphParams& params,
                                             int object = 0, const ElfOptions& opt = {}) {
  params.validate();
  require(!mesh.faces.empty(), ErrorCode::InvalidArgument, "mesh has no faces");
  TriangleMesh m = mesh;
  if (m.normals.size() != m.vertices.size()) compute_normals(m);
  const ChargeField field(m);
  const int A = params.anchor_index();
  const int n_out = params.column_size - 1 - A;
  const double s = params.node_spacing;

  std::vector<Column> cols(m.vertices.size());
  for (std::size_t v = 0; v < m.vertices.size(); ++v) {
    Column& c = cols[v];
    c.id = static_cast<int>(v);
    c.object = object;
    c.vertex = static_cast<int>(v);
    c.spacing = s;
    const Vec3 start = m.vertices[v];
    const auto outward = trace_field_line(field, start, m.normals[v], n_out, s, opt);
    const Vec3 t0 = n_out > 0 ? normalized(outward.front() - start) : m.normals[v];
    c.nodes.resize(params.column_size);
    for (int k = 0; k < A; ++k) c.nodes[k] = start - t0 * (s * (A - k));
    c.nodes[A] = start;
    for (int k = 0; k < n_out; ++k) c.nodes[A + 1 + k] = outward[k];
    if (opt.bounds)
      for (const auto& p : c.nodes)
        if (!opt.bounds->contains(p, 1e-9))
          fail(ErrorCode::OutOfRange, "column " + std::to_string(v) +
                                          " leaves the volume bounds; shrink the column size or node spacing");
  }
  return cols;
}

}  // namespace logismos
