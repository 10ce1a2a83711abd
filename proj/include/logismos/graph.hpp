#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/geometry.hpp"
#include "logismos/mesh.hpp"
#include "logismos/serialize.hpp"

namespace logismos {

/// Search-graph sizing. All separations are in nodes.
struct GraphParams {
  int smoothness = 2;
  int inter_surface_min = 0;
  int inter_surface_max = 20;
  int inter_object_min = 0;
  int inter_object_max = 60;
  int column_size = 61;
  double node_spacing = 0.20;

  static GraphParams learned() { return {4, 0, 40, 0, 120, 121, 0.15}; }
  static GraphParams gradient() { return {2, 0, 20, 0, 60, 61, 0.20}; }

  /// Index of the node that sits on the pre-segmentation vertex.
  int anchor_index() const { return column_size / 3; }
  double column_length() const { return (column_size - 1) * node_spacing; }

  void validate() const {
    require(smoothness >= 0 && inter_surface_min >= 0 && inter_surface_max >= 0 && inter_object_min >= 0 &&
                inter_object_max >= 0,
            ErrorCode::InvalidArgument, "graph separations must be non-negative");
    require(inter_surface_min <= inter_surface_max && inter_object_min <= inter_object_max,
            ErrorCode::InvalidArgument, "separation min exceeds max");
    require(column_size >= 1, ErrorCode::InvalidArgument, "column size must be positive");
    require(column_size >= inter_surface_max, ErrorCode::InvalidArgument, "column size must be >= inter-surface max");
    require(node_spacing > 0, ErrorCode::InvalidArgument, "node spacing must be positive");
  }

  bool operator==(const GraphParams&) const = default;
};

/// Search column: node positions ordered inside to outside.
struct Column {
  int id = 0;
  int object = 0;
  int vertex = 0;
  double spacing = 0.0;
  std::vector<Vec3> nodes;

  int size() const { return static_cast<int>(nodes.size()); }

  /// Unit tangent (inside to outside) at node j.
  Vec3 direction(int j) const {
    const int n = size();
    const int a = std::max(0, j - 1), b = std::min(n - 1, j + 1);
    return normalized(nodes[b] - nodes[a]);
  }
};

/// Straight column with node 0 at `base`, useful for synthetic graphs.
inline Column straight_column(int id, int object, const Vec3& base, const Vec3& dir, int size, double spacing) {
  Column c;
  c.id = id;
  c.object = object;
  c.vertex = id;
  c.spacing = spacing;
  const Vec3 u = normalized(dir);
  c.nodes.reserve(size);
  for (int j = 0; j < size; ++j) c.nodes.push_back(base + u * (spacing * j));
  return c;
}

/// Columns of one object together with the mesh topology they were traced from.
struct ObjectColumns {
  std::vector<Column> columns;
  std::vector<std::pair<int, int>> adjacency;
  std::vector<Face> faces;
  int surfaces = 2;  ///< 1 = bone only, 2 = bone + cartilage
};

struct SurfaceDescriptor {
  int object = 0;
  int surface = 0;
  bool operator==(const SurfaceDescriptor&) const = default;
};

/// Pairs column `column_a` of object 0 with `column_b` of object 1. With node
/// indices ka, kb on the outermost surfaces, their separation in nodes is
/// offset - ka - kb.
struct ObjectCoupling {
  int column_a = 0;
  int column_b = 0;
  int offset = 0;
  bool operator==(const ObjectCoupling&) const = default;
};

/// coef_u * x_u + coef_v * x_v <= bound over surface variables.
struct LinearConstraint {
  int u = 0;
  int v = 0;
  int coef_u = 1;
  int coef_v = -1;
  int bound = 0;
};

/// Chosen node index per (surface, column).
struct SurfaceSolution {
  std::vector<std::vector<int>> index;
  double objective = 0.0;
  std::int64_t quantized_objective = 0;
};

class ColumnGraph {
 public:
  GraphParams params;
  std::vector<ObjectColumns> objects;
  std::vector<SurfaceDescriptor> surfaces;
  std::vector<ObjectCoupling> couplings;
  std::vector<LinearConstraint> constraints;

  int column_size() const { return params.column_size; }
  int surface_count() const { return static_cast<int>(surfaces.size()); }
  int columns_of_surface(int s) const { return static_cast<int>(objects[surfaces[s].object].columns.size()); }
  const Column& column(int s, int i) const { return objects[surfaces[s].object].columns[i]; }

  int surface_index(int object, int surface) const {
    for (int s = 0; s < surface_count(); ++s)
      if (surfaces[s].object == object && surfaces[s].surface == surface) return s;
    return -1;
  }
  /// Outermost surface of an object (the one that touches the other object).
  int outer_surface(int object) const {
    int best = -1;
    for (int s = 0; s < surface_count(); ++s)
      if (surfaces[s].object == object && (best < 0 || surfaces[s].surface > surfaces[best].surface)) best = s;
    return best;
  }

  int var(int s, int i) const { return var_offset_[s] + i; }
  int var_count() const { return var_offset_.empty() ? 0 : var_offset_.back(); }
  std::pair<int, int> var_to_surface_column(int v) const {
    const auto it = std::upper_bound(var_offset_.begin(), var_offset_.end(), v);
    const int s = static_cast<int>(it - var_offset_.begin()) - 1;
    return {s, v - var_offset_[s]};
  }
  std::size_t node_count() const { return static_cast<std::size_t>(var_count()) * column_size(); }
  std::size_t column_count() const {
    std::size_t n = 0;
    for (const auto& o : objects) n += o.columns.size();
    return n;
  }

  /// Flattens per-surface indices into the variable order.
  std::vector<int> flatten(const SurfaceSolution& sol) const {
    std::vector<int> x(var_count());
    for (int s = 0; s < surface_count(); ++s)
      for (int i = 0; i < columns_of_surface(s); ++i) x[var(s, i)] = sol.index[s][i];
    return x;
  }
  SurfaceSolution unflatten(const std::vector<int>& x) const {
    SurfaceSolution sol;
    sol.index.resize(surface_count());
    for (int s = 0; s < surface_count(); ++s) {
      sol.index[s].resize(columns_of_surface(s));
      for (int i = 0; i < columns_of_surface(s); ++i) sol.index[s][i] = x[var(s, i)];
    }
    return sol;
  }

  /// Feasibility predicate over the emitted linear constraints.
  bool feasible(const std::vector<int>& x) const {
    if (static_cast<int>(x.size()) != var_count()) return false;
    for (int v : x)
      if (v < 0 || v >= column_size()) return false;
    for (const auto& c : constraints)
      if (c.coef_u * x[c.u] + c.coef_v * x[c.v] > c.bound) return false;
    return true;
  }

  /// Rebuilds surfaces, variable numbering and the linear constraint list.
  void rebuild_constraints();

 private:
  std::vector<int> var_offset_;
};

inline void ColumnGraph::rebuild_constraints() {
  surfaces.clear();
  for (int o = 0; o < static_cast<int>(objects.size()); ++o)
    for (int s = 0; s < objects[o].surfaces; ++s) surfaces.push_back({o, s});
  var_offset_.assign(1, 0);
  for (const auto& sd : surfaces)
    var_offset_.push_back(var_offset_.back() + static_cast<int>(objects[sd.object].columns.size()));

  constraints.clear();
  const int ds = params.smoothness;
  for (int s = 0; s < surface_count(); ++s) {
    const auto& obj = objects[surfaces[s].object];
    for (const auto& [a, b] : obj.adjacency) {
      constraints.push_back({var(s, a), var(s, b), 1, -1, ds});
      constraints.push_back({var(s, b), var(s, a), 1, -1, ds});
    }
  }
  for (int o = 0; o < static_cast<int>(objects.size()); ++o) {
    const int bone = surface_index(o, 0), cart = surface_index(o, 1);
    if (bone < 0 || cart < 0) continue;
    for (int i = 0; i < static_cast<int>(objects[o].columns.size()); ++i) {
      // inter_surface_min <= x_cart - x_bone <= inter_surface_max
      constraints.push_back({var(bone, i), var(cart, i), 1, -1, -params.inter_surface_min});
      constraints.push_back({var(cart, i), var(bone, i), 1, -1, params.inter_surface_max});
    }
  }
  if (objects.size() >= 2 && !couplings.empty()) {
    const int sa = outer_surface(0), sb = outer_surface(1);
    for (const auto& c : couplings) {
      // inter_object_min <= offset - xa - xb <= inter_object_max
      constraints.push_back({var(sa, c.column_a), var(sb, c.column_b), 1, 1, c.offset - params.inter_object_min});
      constraints.push_back({var(sa, c.column_a), var(sb, c.column_b), -1, -1, params.inter_object_max - c.offset});
    }
  }
}

// ---------------------------------------------------------------------------
// Inter-object pairing

/// Pairs antiparallel columns of object 0 and object 1 whose anchors face each
/// other, one to one, nearest lateral offset first, within `gate_mm`.
inline std::vector<ObjectCoupling> pair_facing_columns(const std::vector<Column>& a, const std::vector<Column>& b,
                                                       const GraphParams& params, double gate_mm) {
  struct Candidate {
    double lateral;
    int ia, ib, offset;
  };
  const int A = params.anchor_index();
  const double s = params.node_spacing;
  std::vector<Candidate> cand;
  for (int ia = 0; ia < static_cast<int>(a.size()); ++ia) {
    const Vec3 pa = a[ia].nodes[A];
    const Vec3 da = normalized(a[ia].nodes.back() - pa);
    for (int ib = 0; ib < static_cast<int>(b.size()); ++ib) {
      const Vec3 pb = b[ib].nodes[A];
      const Vec3 db = normalized(b[ib].nodes.back() - pb);
      if (dot(da, db) > -0.5) continue;
      const Vec3 d = pb - pa;
      const double t = dot(d, da);
      if (t <= 0) continue;
      const double lateral = norm(d - da * t);
      if (lateral > gate_mm) continue;
      const int offset = static_cast<int>(std::floor(t / s)) + 2 * A;
      // The pair must admit at least one configuration on its own.
      if (offset - params.inter_object_max > 2 * (params.column_size - 1)) continue;
      if (offset - params.inter_object_min < 0) continue;
      cand.push_back({lateral, ia, ib, offset});
    }
  }
  std::sort(cand.begin(), cand.end(), [](const Candidate& x, const Candidate& y) {
    if (x.lateral != y.lateral) return x.lateral < y.lateral;
    return std::pair(x.ia, x.ib) < std::pair(y.ia, y.ib);
  });
  std::vector<char> used_a(a.size(), 0), used_b(b.size(), 0);
  std::vector<ObjectCoupling> out;
  for (const auto& c : cand) {
    if (used_a[c.ia] || used_b[c.ib]) continue;
    used_a[c.ia] = used_b[c.ib] = 1;
    out.push_back({c.ia, c.ib, c.offset});
  }
  std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) { return x.column_a < y.column_a; });
  return out;
}

struct AssembleOptions {
  bool couple_objects = true;
  double coupling_gate_mm = -1.0;  ///< negative: 2 x node spacing
  std::optional<std::vector<ObjectCoupling>> couplings;  ///< explicit pairing overrides the search
};

inline ColumnGraph assemble_graph(std::vector<ObjectColumns> objects, const GraphParams& params,
                                  const AssembleOptions& options = {}) {
  params.validate();
  require(!objects.empty(), ErrorCode::InvalidArgument, "assemble_graph needs at least one object");
  for (std::size_t o = 0; o < objects.size(); ++o) {
    auto& obj = objects[o];
    require(obj.surfaces == 1 || obj.surfaces == 2, ErrorCode::InvalidArgument, "objects carry one or two surfaces");
    const int n = static_cast<int>(obj.columns.size());
    for (int i = 0; i < n; ++i) {
      require(obj.columns[i].size() == params.column_size, ErrorCode::InvalidArgument,
              "column " + std::to_string(i) + " has the wrong node count");
      obj.columns[i].object = static_cast<int>(o);
    }
    for (const auto& [p, q] : obj.adjacency)
      if (p < 0 || q < 0 || p >= n || q >= n || p == q)
        fail(ErrorCode::InvalidArgument, "adjacency references unknown column (" + std::to_string(p) + ", " +
                                             std::to_string(q) + ") in object " + std::to_string(o));
  }
  ColumnGraph g;
  g.params = params;
  g.objects = std::move(objects);
  if (options.couplings) {
    require(g.objects.size() >= 2 || options.couplings->empty(), ErrorCode::InvalidArgument,
            "couplings need two objects");
    for (const auto& c : *options.couplings)
      require(c.column_a >= 0 && c.column_b >= 0 && c.column_a < static_cast<int>(g.objects[0].columns.size()) &&
                  c.column_b < static_cast<int>(g.objects[1].columns.size()),
              ErrorCode::InvalidArgument, "coupling references unknown column");
    g.couplings = *options.couplings;
  } else if (options.couple_objects && g.objects.size() >= 2) {
    const double gate = options.coupling_gate_mm < 0 ? 2.0 * params.node_spacing : options.coupling_gate_mm;
    g.couplings = pair_facing_columns(g.objects[0].columns, g.objects[1].columns, params, gate);
  }
  g.rebuild_constraints();
  return g;
}

/// Convenience for one object: columns plus unique mesh edges as adjacency.
inline ObjectColumns object_columns(std::vector<Column> columns, const TriangleMesh& mesh, int surfaces) {
  ObjectColumns oc;
  oc.columns = std::move(columns);
  oc.adjacency = mesh_edges(mesh);
  oc.faces = mesh.faces;
  oc.surfaces = surfaces;
  return oc;
}

// ---------------------------------------------------------------------------
// Direct constraint audit

/// Counts every audited solution and every violation found, process-wide.
struct SolutionAudit {
  static std::atomic<long long>& checked() {
    static std::atomic<long long> n{0};
    return n;
  }
  static std::atomic<long long>& violations() {
    static std::atomic<long long> n{0};
    return n;
  }
};

/// Checks a solution against the constraint semantics directly (without the
/// emitted linear constraint list). Returns human-readable violations.
inline std::vector<std::string> constraint_violations(const ColumnGraph& g, const SurfaceSolution& sol) {
  std::vector<std::string> out;
  const auto& p = g.params;
  if (static_cast<int>(sol.index.size()) != g.surface_count()) {
    out.push_back("surface count mismatch");
    return out;
  }
  for (int s = 0; s < g.surface_count(); ++s) {
    const auto& x = sol.index[s];
    if (static_cast<int>(x.size()) != g.columns_of_surface(s)) {
      out.push_back("column count mismatch on surface " + std::to_string(s));
      return out;
    }
    for (int i = 0; i < static_cast<int>(x.size()); ++i)
      if (x[i] < 0 || x[i] >= p.column_size)
        out.push_back("index out of range at surface " + std::to_string(s) + " column " + std::to_string(i));
    for (const auto& [a, b] : g.objects[g.surfaces[s].object].adjacency)
      if (std::abs(x[a] - x[b]) > p.smoothness)
        out.push_back("smoothness violated on surface " + std::to_string(s) + " between columns " +
                      std::to_string(a) + " and " + std::to_string(b));
  }
  if (!out.empty()) return out;
  for (int o = 0; o < static_cast<int>(g.objects.size()); ++o) {
    const int bone = g.surface_index(o, 0), cart = g.surface_index(o, 1);
    if (bone < 0 || cart < 0) continue;
    for (std::size_t i = 0; i < g.objects[o].columns.size(); ++i) {
      const int d = sol.index[cart][i] - sol.index[bone][i];
      if (d < p.inter_surface_min || d > p.inter_surface_max)
        out.push_back("inter-surface separation " + std::to_string(d) + " at object " + std::to_string(o) +
                      " column " + std::to_string(i));
    }
  }
  if (g.objects.size() >= 2) {
    const int sa = g.outer_surface(0), sb = g.outer_surface(1);
    for (const auto& c : g.couplings) {
      const int sep = c.offset - sol.index[sa][c.column_a] - sol.index[sb][c.column_b];
      if (sep < p.inter_object_min || sep > p.inter_object_max)
        out.push_back("inter-object separation " + std::to_string(sep) + " at pair (" + std::to_string(c.column_a) +
                      ", " + std::to_string(c.column_b) + ")");
    }
  }
  return out;
}

/// Audits a solution and throws on any violation.
inline void audit_solution(const ColumnGraph& g, const SurfaceSolution& sol) {
  const auto v = constraint_violations(g, sol);
  ++SolutionAudit::checked();
  if (!v.empty()) {
    SolutionAudit::violations() += static_cast<long long>(v.size());
    fail(ErrorCode::Internal, "solution violates graph constraints: " + v.front());
  }
}

/// World position of the chosen node on every column of surface s.
inline std::vector<Vec3> surface_points(const ColumnGraph& g, const SurfaceSolution& sol, int s) {
  std::vector<Vec3> pts;
  pts.reserve(sol.index[s].size());
  for (int i = 0; i < g.columns_of_surface(s); ++i) pts.push_back(g.column(s, i).nodes[sol.index[s][i]]);
  return pts;
}

/// Surface mesh of a solution: chosen nodes with the pre-segmentation topology.
inline TriangleMesh surface_mesh(const ColumnGraph& g, const SurfaceSolution& sol, int s) {
  TriangleMesh m;
  m.vertices = surface_points(g, sol, s);
  m.faces = g.objects[g.surfaces[s].object].faces;
  if (!m.faces.empty()) compute_normals(m);
  return m;
}

// ---------------------------------------------------------------------------
// Binary cache: "LGCG", version, params, objects (columns, adjacency, faces),
// couplings. Constraints are re-derived on load.

inline constexpr std::uint32_t kGraphCacheVersion = 1;

inline void write_graph(BinaryWriter& w, const ColumnGraph& g) {
  w.put_magic("LGCG", kGraphCacheVersion);
  const auto& p = g.params;
  for (int v : {p.smoothness, p.inter_surface_min, p.inter_surface_max, p.inter_object_min, p.inter_object_max,
                p.column_size})
    w.put(static_cast<std::int32_t>(v));
  w.put(p.node_spacing);
  w.put(static_cast<std::uint32_t>(g.objects.size()));
  for (const auto& o : g.objects) {
    w.put(static_cast<std::int32_t>(o.surfaces));
    w.put(static_cast<std::uint32_t>(o.columns.size()));
    for (const auto& c : o.columns) {
      w.put(static_cast<std::int32_t>(c.id));
      w.put(static_cast<std::int32_t>(c.object));
      w.put(static_cast<std::int32_t>(c.vertex));
      w.put(c.spacing);
      w.put(static_cast<std::uint32_t>(c.nodes.size()));
      for (const auto& n : c.nodes) w.put(n);
    }
    w.put(static_cast<std::uint32_t>(o.adjacency.size()));
    for (const auto& [a, b] : o.adjacency) {
      w.put(static_cast<std::int32_t>(a));
      w.put(static_cast<std::int32_t>(b));
    }
    w.put(static_cast<std::uint32_t>(o.faces.size()));
    for (const auto& f : o.faces)
      for (int c = 0; c < 3; ++c) w.put(static_cast<std::int32_t>(f[c]));
  }
  w.put(static_cast<std::uint32_t>(g.couplings.size()));
  for (const auto& c : g.couplings) {
    w.put(static_cast<std::int32_t>(c.column_a));
    w.put(static_cast<std::int32_t>(c.column_b));
    w.put(static_cast<std::int32_t>(c.offset));
  }
}

inline ColumnGraph read_graph(BinaryReader& r) {
  const auto version = r.expect_magic("LGCG");
  require(version == kGraphCacheVersion, ErrorCode::InvalidArgument,
          "unsupported graph cache version " + std::to_string(version));
  GraphParams p;
  p.smoothness = r.get<std::int32_t>();
  p.inter_surface_min = r.get<std::int32_t>();
  p.inter_surface_max = r.get<std::int32_t>();
  p.inter_object_min = r.get<std::int32_t>();
  p.inter_object_max = r.get<std::int32_t>();
  p.column_size = r.get<std::int32_t>();
  p.node_spacing = r.get<double>();
  std::vector<ObjectColumns> objects(r.get<std::uint32_t>());
  for (auto& o : objects) {
    o.surfaces = r.get<std::int32_t>();
    o.columns.resize(r.get<std::uint32_t>());
    for (auto& c : o.columns) {
      c.id = r.get<std::int32_t>();
      c.object = r.get<std::int32_t>();
      c.vertex = r.get<std::int32_t>();
      c.spacing = r.get<double>();
      c.nodes.resize(r.get<std::uint32_t>());
      for (auto& n : c.nodes) n = r.get_vec3();
    }
    o.adjacency.resize(r.get<std::uint32_t>());
    for (auto& [a, b] : o.adjacency) {
      a = r.get<std::int32_t>();
      b = r.get<std::int32_t>();
    }
    o.faces.resize(r.get<std::uint32_t>());
    for (auto& f : o.faces)
      for (int c = 0; c < 3; ++c) f[c] = r.get<std::int32_t>();
  }
  std::vector<ObjectCoupling> couplings(r.get<std::uint32_t>());
  for (auto& c : couplings) {
    c.column_a = r.get<std::int32_t>();
    c.column_b = r.get<std::int32_t>();
    c.offset = r.get<std::int32_t>();
  }
  AssembleOptions opt;
  opt.couplings = std::move(couplings);
  return assemble_graph(std::move(objects), p, opt);
}

inline void save_graph_cache(const ColumnGraph& g, const std::filesystem::path& path) {
  BinaryWriter w;
  write_graph(w, g);
  w.save(path);
}

inline ColumnGraph load_graph_cache(const std::filesystem::path& path) {
  auto r = BinaryReader::load(path);
  return read_graph(r);
}

}  // namespace logismos
