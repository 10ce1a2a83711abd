#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <queue>
#include <utility>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/geometry.hpp"
#include "logismos/graph.hpp"

namespace logismos {

/// Identifies one graph node.
struct NodeRef {
  int surface = 0;
  int column = 0;
  int node = 0;
  bool operator==(const NodeRef&) const = default;
};

/// Balanced k-d tree over points with median splits on the widest axis.
/// Stored implicitly: the subtree over [lo, hi) has its split point at the
/// midpoint.
class KdTree {
 public:
  struct Hit {
    double distance;
    int index;  ///< index into the original point list
  };

  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    require(!points_.empty(), ErrorCode::InvalidArgument, "k-d tree needs at least one point");
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    axis_.assign(points_.size(), 0);
    build(0, static_cast<int>(order_.size()));
  }

  std::size_t size() const { return points_.size(); }
  const Vec3& point(int i) const { return points_[i]; }
  /// Original indices in tree order; each index appears exactly once.
  const std::vector<int>& order() const { return order_; }

  /// The n nearest points accepted by `keep`, ascending by distance (ties by index).
  std::vector<Hit> nearest(const Vec3& q, int n, const std::function<bool(int)>& keep = {}) const {
    std::vector<Hit> out;
    if (n <= 0 || points_.empty()) return out;
    auto cmp = [](const Hit& a, const Hit& b) {
      return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
    };
    std::priority_queue<Hit, std::vector<Hit>, decltype(cmp)> heap(cmp);
    search(q, n, keep, 0, static_cast<int>(order_.size()), heap);
    out.reserve(heap.size());
    while (!heap.empty()) {
      out.push_back(heap.top());
      heap.pop();
    }
    std::reverse(out.begin(), out.end());
    for (auto& h : out) h.distance = std::sqrt(h.distance);
    return out;
  }

 private:
  void build(int lo, int hi) {
    if (hi - lo <= 1) return;
    Box3 b;
    for (int k = lo; k < hi; ++k) b.expand(points_[order_[k]]);
    const Vec3 e = b.extent();
    const int ax = e.x >= e.y && e.x >= e.z ? 0 : (e.y >= e.z ? 1 : 2);
    const int mid = (lo + hi) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi, [&](int a, int c) {
      const double pa = points_[a][ax], pc = points_[c][ax];
      return pa != pc ? pa < pc : a < c;
    });
    axis_[mid] = ax;
    build(lo, mid);
    build(mid + 1, hi);
  }

  template <typename Heap>
  void search(const Vec3& q, int n, const std::function<bool(int)>& keep, int lo, int hi, Heap& heap) const {
    if (lo >= hi) return;
    const int mid = (lo + hi) / 2;
    const int idx = order_[mid];
    const Vec3& p = points_[idx];
    if (!keep || keep(idx)) {
      const Hit h{norm2(p - q), idx};
      if (static_cast<int>(heap.size()) < n) {
        heap.push(h);
      } else {
        const Hit& worst = heap.top();
        if (h.distance < worst.distance || (h.distance == worst.distance && h.index < worst.index)) {
          heap.pop();
          heap.push(h);
        }
      }
    }
    if (hi - lo == 1) return;
    const int ax = axis_[mid];
    const double diff = q[ax] - p[ax];
    const bool left_first = diff <= 0;
    if (left_first)
      search(q, n, keep, lo, mid, heap);
    else
      search(q, n, keep, mid + 1, hi, heap);
    if (static_cast<int>(heap.size()) < n || diff * diff <= heap.top().distance) {
      if (left_first)
        search(q, n, keep, mid + 1, hi, heap);
      else
        search(q, n, keep, lo, mid, heap);
    }
  }

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<int> axis_;
};

/// k-d tree over every node of a ColumnGraph with NodeRef payloads.
class NodeIndexKD {
 public:
  NodeIndexKD() = default;
  explicit NodeIndexKD(const ColumnGraph& g) {
    std::vector<Vec3> pts;
    pts.reserve(g.node_count());
    refs_.reserve(g.node_count());
    for (int s = 0; s < g.surface_count(); ++s)
      for (int i = 0; i < g.columns_of_surface(s); ++i) {
        const auto& c = g.column(s, i);
        for (int j = 0; j < c.size(); ++j) {
          pts.push_back(c.nodes[j]);
          refs_.push_back({s, i, j});
        }
      }
    require(!pts.empty(), ErrorCode::InvalidArgument, "cannot index an empty graph");
    tree_ = KdTree(std::move(pts));
  }

  struct Result {
    NodeRef ref;
    double distance;
  };

  std::size_t size() const { return refs_.size(); }
  const KdTree& tree() const { return tree_; }
  const NodeRef& ref(int index) const { return refs_[index]; }

  /// n nearest nodes, optionally restricted to one surface.
  std::vector<Result> query(const Vec3& p, int n, int surface = -1) const {
    std::function<bool(int)> keep;
    if (surface >= 0) keep = [&](int i) { return refs_[i].surface == surface; };
    std::vector<Result> out;
    for (const auto& h : tree_.nearest(p, n, keep)) out.push_back({refs_[h.index], h.distance});
    return out;
  }

 private:
  KdTree tree_;
  std::vector<NodeRef> refs_;
};

inline NodeIndexKD build_kd(const ColumnGraph& g) { return NodeIndexKD(g); }

}  // namespace logismos
