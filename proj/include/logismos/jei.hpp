#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "logismos/costs.hpp"
#include "logismos/error.hpp"
#include "logismos/graph.hpp"
#include "logismos/kdtree.hpp"
#include "logismos/maxflow.hpp"
#include "logismos/volume.hpp"

namespace logismos {

/// Approximately correct boundary points drawn on one slice.
struct NudgeContour {
  std::string session_id;
  int object = 0;
  int surface = 1;
  int axis = 2;   ///< 0 = x, 1 = y, 2 = z
  int slice = 0;  ///< voxel index along `axis`
  std::vector<Vec3> points;
};

struct JeiOptions {
  int nearest = 4;       ///< N nearest graph nodes per contour sample
  int tolerance = 2;     ///< Delta, in nodes along the column
  double gate_mm = 3.0;  ///< samples farther than this from every node edit nothing
};

struct NodeCostChange {
  NodeRef node;
  double old_cost = 0.0;
  double new_cost = 0.0;
};

struct EditRecord {
  long long sequence = 0;
  int surface = 0;                 ///< graph surface index that was edited
  std::vector<int> columns;        ///< intersected columns
  std::vector<int> intersections;  ///< intersecting node per column
  std::vector<NodeCostChange> changes;
  double objective = 0.0;
};

/// Undo stack of applied edits with a monotone sequence number.
class EditHistory {
 public:
  long long next_sequence() { return ++sequence_; }
  long long sequence() const { return sequence_; }
  void push(EditRecord r) { records_.push_back(std::move(r)); }
  EditRecord pop() {
    require(!records_.empty(), ErrorCode::FailedPrecondition, "edit history is empty");
    EditRecord r = std::move(records_.back());
    records_.pop_back();
    return r;
  }
  bool empty() const { return records_.empty(); }
  std::size_t size() const { return records_.size(); }
  const std::vector<EditRecord>& records() const { return records_; }

  /// Replays the new costs of every record on top of `initial`.
  CostField replay(CostField initial) const {
    for (const auto& r : records_)
      for (const auto& c : r.changes) initial.at(c.node.surface, c.node.column, c.node.node) = c.new_cost;
    return initial;
  }

 private:
  std::vector<EditRecord> records_;
  long long sequence_ = 0;
};

struct NudgeResult {
  SurfaceSolution solution;
  EditRecord record;
  double resolve_ms = 0.0;
};

/// Resamples a polyline so consecutive samples are at most `step` apart.
inline std::vector<Vec3> densify_polyline(const std::vector<Vec3>& pts, double step) {
  std::vector<Vec3> out;
  if (pts.empty()) return out;
  out.push_back(pts.front());
  for (std::size_t k = 1; k < pts.size(); ++k) {
    const Vec3 a = pts[k - 1], b = pts[k];
    const double len = distance(a, b);
    const int pieces = std::max(1, static_cast<int>(std::ceil(len / step)));
    for (int m = 1; m <= pieces; ++m) out.push_back(a + (b - a) * (static_cast<double>(m) / pieces));
  }
  return out;
}

/// Checks slice bounds and that every point lies on the slice plane.
inline void validate_nudge(const NudgeContour& nudge, const VolumeGeometry& geom) {
  require(!nudge.points.empty(), ErrorCode::InvalidArgument, "nudge contour has no points");
  require(nudge.axis >= 0 && nudge.axis < 3, ErrorCode::InvalidArgument, "slice axis must be x, y or z");
  if (nudge.slice < 0 || nudge.slice >= geom.dims[nudge.axis])
    fail(ErrorCode::OutOfRange, "nudge slice " + std::to_string(nudge.slice) + " is outside the volume");
  const double plane = geom.origin[nudge.axis] + nudge.slice * geom.spacing[nudge.axis];
  const double half = 0.5 * geom.spacing[nudge.axis];
  for (const auto& p : nudge.points)
    if (std::abs(p[nudge.axis] - plane) > half + 1e-9)
      fail(ErrorCode::InvalidArgument, "nudge point does not lie on the stated slice plane");
}

/// Intersecting node per column: for every contour sample, the N nearest
/// target-surface nodes within the gate; per column the closest one wins.
inline std::map<int, int> nudge_intersections(const ColumnGraph& g, const NodeIndexKD& kd, int surface,
                                              const std::vector<Vec3>& samples, const JeiOptions& opt) {
  std::map<int, std::pair<double, int>> best;
  for (const auto& p : samples)
    for (const auto& r : kd.query(p, opt.nearest, surface)) {
      if (r.distance > opt.gate_mm) continue;
      auto it = best.find(r.ref.column);
      if (it == best.end() || r.distance < it->second.first ||
          (r.distance == it->second.first && r.ref.node < it->second.second))
        best[r.ref.column] = {r.distance, r.ref.node};
    }
  (void)g;
  std::map<int, int> out;
  for (const auto& [col, v] : best) out[col] = v.second;
  return out;
}

/// Rewrites costs on intersected columns to 0 within `tolerance` nodes of the
/// intersecting node and 1 elsewhere, then warm-resolves.
inline NudgeResult apply_nudge(FlowState& fs, const NodeIndexKD& kd, const NudgeContour& nudge, EditHistory& history,
                               const JeiOptions& opt = {}, const VolumeGeometry* geom = nullptr) {
  const ColumnGraph& g = fs.graph();
  if (geom)
    validate_nudge(nudge, *geom);
  else
    require(!nudge.points.empty(), ErrorCode::InvalidArgument, "nudge contour has no points");
  require(opt.nearest >= 1 && opt.tolerance >= 1, ErrorCode::InvalidArgument, "N and Delta must be positive");
  const int s = g.surface_index(nudge.object, nudge.surface);
  if (s < 0)
    fail(ErrorCode::NotFound, "unknown target surface (object " + std::to_string(nudge.object) + ", surface " +
                                  std::to_string(nudge.surface) + ")");
  require(fs.solved(), ErrorCode::FailedPrecondition, "apply_nudge requires a solved flow state");

  const auto samples = densify_polyline(nudge.points, g.params.node_spacing);
  const auto hits = nudge_intersections(g, kd, s, samples, opt);
  if (hits.empty()) fail(ErrorCode::NoIntersection, "no graph column within the gating radius of the nudge");

  EditRecord rec;
  rec.sequence = history.next_sequence();
  rec.surface = s;
  std::vector<CostEdit> edits;
  for (const auto& [col, n] : hits) {
    rec.columns.push_back(col);
    rec.intersections.push_back(n);
    for (int j = 0; j < g.column_size(); ++j) {
      const double c = std::abs(j - n) < opt.tolerance ? 0.0 : 1.0;
      rec.changes.push_back({{s, col, j}, fs.cost(s, col, j), c});
      edits.push_back({s, col, j, c});
    }
  }
  fs.update_costs(edits);
  NudgeResult res;
  res.solution = fs.resolve();
  res.resolve_ms = fs.last_stats().wall_ms;
  rec.objective = res.solution.objective;
  res.record = rec;
  history.push(std::move(rec));
  return res;
}

/// Reverts the most recent edit and resolves.
inline SurfaceSolution undo(FlowState& fs, EditHistory& history) {
  require(!history.empty(), ErrorCode::FailedPrecondition, "nothing to undo");
  const EditRecord r = history.pop();
  std::vector<CostEdit> edits;
  edits.reserve(r.changes.size());
  for (const auto& c : r.changes) edits.push_back({c.node.surface, c.node.column, c.node.node, c.old_cost});
  fs.update_costs(edits);
  return fs.resolve();
}

}  // namespace logismos
