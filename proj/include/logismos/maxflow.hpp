#pragma once

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "logismos/costs.hpp"
#include "logismos/error.hpp"
#include "logismos/graph.hpp"

namespace logismos {

struct SolverStats {
  long long augmentations = 0;
  long long orphans = 0;
  double wall_ms = 0.0;
  std::int64_t flow = 0;
  bool warm = false;
  /// Total flow after each augmentation (only when tracing is enabled).
  std::vector<std::int64_t> flow_trace;
};

/// Augmenting-path max-flow with persistent search trees (Boykov-Kolmogorov).
/// Terminal capacities are stored as one signed residual per node: positive
/// means residual capacity from the source, negative to the sink.
class MaxFlowGraph {
 public:
  using cap_t = std::int64_t;
  static constexpr cap_t kInfinite = 1'000'000'000'000LL;

  explicit MaxFlowGraph(int nodes = 0) : nodes_(nodes), tr0_(nodes, 0) {}

  int node_count() const { return static_cast<int>(nodes_.size()); }
  std::size_t arc_count() const { return arcs_.size(); }
  void reserve_arcs(std::size_t pairs) {
    arcs_.reserve(2 * pairs);
    cap0_.reserve(2 * pairs);
  }

  /// Arc i->j with capacity `cap` and its reverse j->i with `rev_cap`.
  void add_edge(int i, int j, cap_t cap, cap_t rev_cap) {
    const int a = static_cast<int>(arcs_.size());
    arcs_.push_back({j, nodes_[i].first, cap});
    nodes_[i].first = a;
    arcs_.push_back({i, nodes_[j].first, rev_cap});
    nodes_[j].first = a + 1;
    cap0_.push_back(cap);
    cap0_.push_back(rev_cap);
  }

  /// Adds `delta` to the net terminal capacity of node i. After a solve the
  /// node is queued for the next warm restart.
  void add_terminal(int i, cap_t delta) {
    if (delta == 0) return;
    nodes_[i].tr_cap += delta;
    tr0_[i] += delta;
    if (solved_) mark_node(i);
  }
  cap_t terminal(int i) const { return nodes_[i].tr_cap; }

  void set_tracing(bool on) { trace_ = on; }

  /// Runs max-flow; with `reuse_trees` the trees of the previous call are kept
  /// and only marked nodes are revisited.
  cap_t maxflow(bool reuse_trees, SolverStats* stats = nullptr) {
    stats_ = stats;
    if (!solved_ || !reuse_trees)
      init();
    else
      reuse_trees_init();

    int current = kNone;
    for (;;) {
      int i = current;
      if (i != kNone) {
        nodes_[i].next = kNone;
        if (nodes_[i].parent == kNone) i = kNone;
      }
      if (i == kNone) {
        i = next_active();
        if (i == kNone) break;
      }
      Node& ni = nodes_[i];
      int a = kNone;
      if (!ni.is_sink) {
        for (a = ni.first; a != kNone; a = arcs_[a].next) {
          if (arcs_[a].r_cap == 0) continue;
          const int j = arcs_[a].head;
          Node& nj = nodes_[j];
          if (nj.parent == kNone) {
            nj.is_sink = 0;
            nj.parent = sister(a);
            nj.ts = ni.ts;
            nj.dist = ni.dist + 1;
            set_active(j);
          } else if (nj.is_sink) {
            break;
          } else if (nj.ts <= ni.ts && nj.dist > ni.dist) {
            nj.parent = sister(a);
            nj.ts = ni.ts;
            nj.dist = ni.dist + 1;
          }
        }
      } else {
        for (a = ni.first; a != kNone; a = arcs_[a].next) {
          if (arcs_[sister(a)].r_cap == 0) continue;
          const int j = arcs_[a].head;
          Node& nj = nodes_[j];
          if (nj.parent == kNone) {
            nj.is_sink = 1;
            nj.parent = sister(a);
            nj.ts = ni.ts;
            nj.dist = ni.dist + 1;
            set_active(j);
          } else if (!nj.is_sink) {
            a = sister(a);
            break;
          } else if (nj.ts <= ni.ts && nj.dist > ni.dist) {
            nj.parent = sister(a);
            nj.ts = ni.ts;
            nj.dist = ni.dist + 1;
          }
        }
      }
      ++time_;
      if (a != kNone) {
        ni.next = i;  // keeps i out of the active queue while it is current
        current = i;
        augment(a);
        adopt_orphans();
      } else {
        current = kNone;
      }
    }
    solved_ = true;
    if (stats_) stats_->flow = flow_;
    stats_ = nullptr;
    return flow_;
  }

  /// Source side of the minimum cut: nodes in the source search tree, which at
  /// termination is exactly the set reachable from the source.
  bool source_side(int i) const { return nodes_[i].parent != kNone && !nodes_[i].is_sink; }

  cap_t flow() const { return flow_; }

  /// Structural checks: antisymmetric residuals, non-negative residuals, and
  /// conservation at every node.
  std::vector<std::string> check_invariants() const {
    std::vector<std::string> out;
    std::vector<cap_t> net_out(nodes_.size(), 0);
    for (std::size_t a = 0; a < arcs_.size(); a += 2) {
      if (arcs_[a].r_cap < 0 || arcs_[a + 1].r_cap < 0) out.push_back("negative residual on arc " + std::to_string(a));
      if (arcs_[a].r_cap + arcs_[a + 1].r_cap != cap0_[a] + cap0_[a + 1])
        out.push_back("capacity not conserved on arc pair " + std::to_string(a));
      const cap_t f = cap0_[a] - arcs_[a].r_cap;  // flow tail -> head
      net_out[arcs_[a + 1].head] += f;
      net_out[arcs_[a].head] -= f;
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (net_out[i] != tr0_[i] - nodes_[i].tr_cap) out.push_back("flow not conserved at node " + std::to_string(i));
    return out;
  }

  /// True when the residual network still has a source-to-sink path.
  bool has_augmenting_path() const {
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<int> stack;
    for (int i = 0; i < node_count(); ++i)
      if (nodes_[i].tr_cap > 0) {
        seen[i] = 1;
        stack.push_back(i);
      }
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      if (nodes_[i].tr_cap < 0) return true;
      for (int a = nodes_[i].first; a != kNone; a = arcs_[a].next)
        if (arcs_[a].r_cap > 0 && !seen[arcs_[a].head]) {
          seen[arcs_[a].head] = 1;
          stack.push_back(arcs_[a].head);
        }
    }
    return false;
  }

  /// Nodes reachable from the source in the residual network.
  std::vector<char> residual_reachable() const {
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<int> stack;
    for (int i = 0; i < node_count(); ++i)
      if (nodes_[i].tr_cap > 0) {
        seen[i] = 1;
        stack.push_back(i);
      }
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      for (int a = nodes_[i].first; a != kNone; a = arcs_[a].next)
        if (arcs_[a].r_cap > 0 && !seen[arcs_[a].head]) {
          seen[arcs_[a].head] = 1;
          stack.push_back(arcs_[a].head);
        }
    }
    return seen;
  }

  /// Visits every arc pair as (tail, head, original capacity, original reverse capacity).
  template <typename Fn>
  void for_each_arc(Fn&& fn) const {
    for (std::size_t a = 0; a < arcs_.size(); a += 2) fn(arcs_[a + 1].head, arcs_[a].head, cap0_[a], cap0_[a + 1]);
  }

 private:
  static constexpr int kNone = -1;
  static constexpr int kTerminal = -2;
  static constexpr int kOrphan = -3;
  static constexpr int kInfiniteDist = INT_MAX;

  struct Node {
    int first = kNone;
    int parent = kNone;
    int next = kNone;
    int ts = 0;
    int dist = 0;
    std::uint8_t is_sink = 0;
    std::uint8_t is_marked = 0;
    cap_t tr_cap = 0;
  };
  struct Arc {
    int head;
    int next;
    cap_t r_cap;
  };

  static int sister(int a) { return a ^ 1; }

  void set_active(int i) {
    if (nodes_[i].next != kNone) return;
    if (q_last_[1] != kNone)
      nodes_[q_last_[1]].next = i;
    else
      q_first_[1] = i;
    q_last_[1] = i;
    nodes_[i].next = i;
  }

  int next_active() {
    for (;;) {
      int i = q_first_[0];
      if (i == kNone) {
        q_first_[0] = i = q_first_[1];
        q_last_[0] = q_last_[1];
        q_first_[1] = q_last_[1] = kNone;
        if (i == kNone) return kNone;
      }
      if (nodes_[i].next == i)
        q_first_[0] = q_last_[0] = kNone;
      else
        q_first_[0] = nodes_[i].next;
      nodes_[i].next = kNone;
      if (nodes_[i].parent != kNone) return i;
    }
  }

  void mark_node(int i) {
    if (nodes_[i].next == kNone) {
      if (q_last_[1] != kNone)
        nodes_[q_last_[1]].next = i;
      else
        q_first_[1] = i;
      q_last_[1] = i;
      nodes_[i].next = i;
    }
    nodes_[i].is_marked = 1;
  }

  void set_orphan_front(int i) {
    nodes_[i].parent = kOrphan;
    orphans_.push_front(i);
  }
  void set_orphan_rear(int i) {
    nodes_[i].parent = kOrphan;
    orphans_.push_back(i);
  }

  void init() {
    q_first_[0] = q_last_[0] = q_first_[1] = q_last_[1] = kNone;
    orphans_.clear();
    time_ = 0;
    flow_ = 0;
    for (int i = 0; i < node_count(); ++i) {
      Node& n = nodes_[i];
      n.next = kNone;
      n.is_marked = 0;
      n.ts = time_;
      if (n.tr_cap > 0) {
        n.is_sink = 0;
        n.parent = kTerminal;
        set_active(i);
        n.dist = 1;
      } else if (n.tr_cap < 0) {
        n.is_sink = 1;
        n.parent = kTerminal;
        set_active(i);
        n.dist = 1;
      } else {
        n.parent = kNone;
      }
    }
  }

  void reuse_trees_init() {
    int queue = q_first_[1];
    q_first_[0] = q_last_[0] = q_first_[1] = q_last_[1] = kNone;
    orphans_.clear();
    ++time_;
    while (queue != kNone) {
      const int i = queue;
      queue = nodes_[i].next;
      if (queue == i) queue = kNone;
      Node& n = nodes_[i];
      n.next = kNone;
      n.is_marked = 0;
      set_active(i);
      if (n.tr_cap == 0) {
        if (n.parent != kNone) set_orphan_rear(i);
        continue;
      }
      if (n.tr_cap > 0) {
        if (n.parent == kNone || n.is_sink) {
          n.is_sink = 0;
          for (int a = n.first; a != kNone; a = arcs_[a].next) {
            const int j = arcs_[a].head;
            Node& nj = nodes_[j];
            if (nj.is_marked) continue;
            if (nj.parent == sister(a)) set_orphan_rear(j);
            if (nj.parent != kNone && nj.is_sink && arcs_[a].r_cap > 0) set_active(j);
          }
        }
      } else {
        if (n.parent == kNone || !n.is_sink) {
          n.is_sink = 1;
          for (int a = n.first; a != kNone; a = arcs_[a].next) {
            const int j = arcs_[a].head;
            Node& nj = nodes_[j];
            if (nj.is_marked) continue;
            if (nj.parent == sister(a)) set_orphan_rear(j);
            if (nj.parent != kNone && !nj.is_sink && arcs_[sister(a)].r_cap > 0) set_active(j);
          }
        }
      }
      n.parent = kTerminal;
      n.ts = time_;
      n.dist = 1;
    }
    adopt_orphans();
  }

  void augment(int middle) {
    cap_t bottleneck = arcs_[middle].r_cap;
    int i, a;
    for (i = arcs_[sister(middle)].head;; i = arcs_[a].head) {
      a = nodes_[i].parent;
      if (a == kTerminal) break;
      bottleneck = std::min(bottleneck, arcs_[sister(a)].r_cap);
    }
    bottleneck = std::min(bottleneck, nodes_[i].tr_cap);
    for (i = arcs_[middle].head;; i = arcs_[a].head) {
      a = nodes_[i].parent;
      if (a == kTerminal) break;
      bottleneck = std::min(bottleneck, arcs_[a].r_cap);
    }
    bottleneck = std::min(bottleneck, -nodes_[i].tr_cap);

    arcs_[sister(middle)].r_cap += bottleneck;
    arcs_[middle].r_cap -= bottleneck;
    for (i = arcs_[sister(middle)].head;; i = arcs_[a].head) {
      a = nodes_[i].parent;
      if (a == kTerminal) break;
      arcs_[a].r_cap += bottleneck;
      arcs_[sister(a)].r_cap -= bottleneck;
      if (arcs_[sister(a)].r_cap == 0) set_orphan_front(i);
    }
    nodes_[i].tr_cap -= bottleneck;
    if (nodes_[i].tr_cap == 0) set_orphan_front(i);
    for (i = arcs_[middle].head;; i = arcs_[a].head) {
      a = nodes_[i].parent;
      if (a == kTerminal) break;
      arcs_[sister(a)].r_cap += bottleneck;
      arcs_[a].r_cap -= bottleneck;
      if (arcs_[a].r_cap == 0) set_orphan_front(i);
    }
    nodes_[i].tr_cap += bottleneck;
    if (nodes_[i].tr_cap == 0) set_orphan_front(i);

    flow_ += bottleneck;
    if (stats_) {
      ++stats_->augmentations;
      if (trace_) stats_->flow_trace.push_back(flow_);
    }
  }

  void adopt_orphans() {
    while (!orphans_.empty()) {
      const int i = orphans_.front();
      orphans_.pop_front();
      if (stats_) ++stats_->orphans;
      process_orphan(i, nodes_[i].is_sink != 0);
    }
  }

  /// Looks for a new valid parent for orphan i in its own tree; otherwise
  /// frees it and orphans its children.
  void process_orphan(int i, bool sink_tree) {
    auto residual_toward_i = [&](int a0) {
      // Arc usable to carry flow along the tree direction between i and head(a0).
      return sink_tree ? arcs_[a0].r_cap : arcs_[sister(a0)].r_cap;
    };
    int a0_min = kNone;
    int d_min = kInfiniteDist;
    for (int a0 = nodes_[i].first; a0 != kNone; a0 = arcs_[a0].next) {
      if (residual_toward_i(a0) == 0) continue;
      int j = arcs_[a0].head;
      if ((nodes_[j].is_sink != 0) != sink_tree || nodes_[j].parent == kNone) continue;
      int d = 0;
      for (;;) {
        Node& nj = nodes_[j];
        if (nj.ts == time_) {
          d += nj.dist;
          break;
        }
        const int a = nj.parent;
        ++d;
        if (a == kTerminal) {
          nj.ts = time_;
          nj.dist = 1;
          break;
        }
        if (a == kOrphan) {
          d = kInfiniteDist;
          break;
        }
        j = arcs_[a].head;
      }
      if (d < kInfiniteDist) {
        if (d < d_min) {
          a0_min = a0;
          d_min = d;
        }
        for (j = arcs_[a0].head; nodes_[j].ts != time_; j = arcs_[nodes_[j].parent].head) {
          nodes_[j].ts = time_;
          nodes_[j].dist = d--;
        }
      }
    }
    nodes_[i].parent = a0_min;
    if (a0_min != kNone) {
      nodes_[i].ts = time_;
      nodes_[i].dist = d_min + 1;
      return;
    }
    for (int a0 = nodes_[i].first; a0 != kNone; a0 = arcs_[a0].next) {
      const int j = arcs_[a0].head;
      const int a = nodes_[j].parent;
      if ((nodes_[j].is_sink != 0) != sink_tree || a == kNone) continue;
      if (residual_toward_i(a0) != 0) set_active(j);
      if (a != kTerminal && a != kOrphan && arcs_[a].head == i) set_orphan_rear(j);
    }
  }

  std::vector<Node> nodes_;
  std::vector<Arc> arcs_;
  std::vector<cap_t> cap0_;
  std::vector<cap_t> tr0_;
  int q_first_[2] = {kNone, kNone};
  int q_last_[2] = {kNone, kNone};
  std::deque<int> orphans_;
  int time_ = 0;
  cap_t flow_ = 0;
  bool solved_ = false;
  bool trace_ = false;
  SolverStats* stats_ = nullptr;
};

// ---------------------------------------------------------------------------
// Optimal-surface transform

inline constexpr double kCostScale = 1e4;

inline std::int32_t quantize_cost(double c) {
  const double q = std::round(c * kCostScale);
  if (!std::isfinite(q) || std::abs(q) > static_cast<double>(INT32_MAX))
    fail(ErrorCode::InvalidArgument, "cost out of the quantizable range");
  return static_cast<std::int32_t>(q);
}

struct CostEdit {
  int surface = 0;
  int column = 0;
  int node = 0;
  double cost = 0.0;
};

struct FlowOptions {
  bool audit = true;        ///< check every returned solution against the constraints
  bool trace_flow = false;  ///< record total flow after every augmentation
};

/// Residual network for a ColumnGraph plus the quantized costs it encodes.
/// Node (v, k) means "surface variable v reaches at least k" (after the
/// per-variable flip that turns coupling sums into differences); the minimum
/// closed set is the source side of the minimum cut.
class FlowState {
 public:
  FlowState(std::shared_ptr<const ColumnGraph> graph, const CostField& costs, FlowOptions opt = {})
      : g_(std::move(graph)), opt_(opt) {
    require(g_ != nullptr, ErrorCode::InvalidArgument, "null graph");
    require(costs.congruent(*g_), ErrorCode::InvalidArgument, "cost field shape does not match the graph");
    n_ = g_->column_size();
    const int vars = g_->var_count();
    q_.resize(static_cast<std::size_t>(vars) * n_);
    for (int s = 0; s < g_->surface_count(); ++s)
      for (int i = 0; i < g_->columns_of_surface(s); ++i)
        for (int j = 0; j < n_; ++j) q_[node_id(g_->var(s, i), j)] = quantize_cost(costs.at(s, i, j));
    compute_flips();
    compile_arcs();
    build_network();
  }
  FlowState(const ColumnGraph& graph, const CostField& costs, FlowOptions opt = {})
      : FlowState(std::make_shared<const ColumnGraph>(graph), costs, opt) {}

  const ColumnGraph& graph() const { return *g_; }
  std::shared_ptr<const ColumnGraph> graph_ptr() const { return g_; }

  /// Cold solve from scratch on the current costs.
  SurfaceSolution solve() {
    if (solved_) build_network();
    stats_ = {};
    const auto t0 = std::chrono::steady_clock::now();
    net_->maxflow(false, &stats_);
    stats_.wall_ms = elapsed_ms(t0);
    solved_ = true;
    dirty_.clear();
    solution_ = extract();
    return solution_;
  }

  /// Rewrites node costs. A change at original index j touches the terminal
  /// weights of flipped nodes k and k + 1.
  void update_costs(std::span<const CostEdit> edits) {
    require(solved_, ErrorCode::FailedPrecondition, "update_costs requires a previous solve");
    for (const auto& e : edits) {
      if (e.surface < 0 || e.surface >= g_->surface_count() || e.column < 0 ||
          e.column >= g_->columns_of_surface(e.surface) || e.node < 0 || e.node >= n_)
        fail(ErrorCode::NotFound, "unknown graph node (" + std::to_string(e.surface) + ", " +
                                      std::to_string(e.column) + ", " + std::to_string(e.node) + ")");
    }
    for (const auto& e : edits) {
      const int v = g_->var(e.surface, e.column);
      const std::int32_t nq = quantize_cost(e.cost);
      const std::int64_t delta = static_cast<std::int64_t>(nq) - q_[node_id(v, e.node)];
      if (delta == 0) continue;
      q_[node_id(v, e.node)] = nq;
      const int k = flip_[v] ? n_ - 1 - e.node : e.node;
      // w(k) += delta and w(k+1) -= delta; terminal capacity is -w.
      if (k > 0) touch(node_id(v, k), -delta);
      if (k + 1 < n_) touch(node_id(v, k + 1), delta);
    }
  }
  void update_costs(std::initializer_list<CostEdit> edits) { update_costs(std::span(edits.begin(), edits.size())); }

  /// Warm restart from the current flow and search trees.
  SurfaceSolution resolve() {
    require(solved_, ErrorCode::FailedPrecondition, "resolve requires a previous solve");
    stats_ = {};
    stats_.warm = true;
    if (dirty_.empty()) return solution_;
    const auto t0 = std::chrono::steady_clock::now();
    net_->maxflow(true, &stats_);
    stats_.wall_ms = elapsed_ms(t0);
    dirty_.clear();
    solution_ = extract();
    return solution_;
  }

  const SurfaceSolution& solution() const { return solution_; }
  const SolverStats& last_stats() const { return stats_; }
  bool solved() const { return solved_; }
  /// Flow-network node ids whose terminal capacity changed since the last solve.
  const std::vector<int>& dirty() const { return dirty_; }

  double cost(int s, int i, int j) const { return quantized_cost(s, i, j) / kCostScale; }
  std::int32_t quantized_cost(int s, int i, int j) const { return q_[node_id(g_->var(s, i), j)]; }
  /// Current costs as a field (dequantized).
  CostField cost_field(CostProvenance p = CostProvenance::JeiModified) const {
    CostField cf(*g_, 0.0, p);
    for (int s = 0; s < g_->surface_count(); ++s)
      for (int i = 0; i < g_->columns_of_surface(s); ++i)
        for (int j = 0; j < n_; ++j) cf.at(s, i, j) = cost(s, i, j);
    return cf;
  }

  /// Exact objective of an arbitrary configuration in quantized units.
  std::int64_t quantized_objective(const SurfaceSolution& sol) const {
    std::int64_t total = 0;
    for (int s = 0; s < g_->surface_count(); ++s)
      for (int i = 0; i < g_->columns_of_surface(s); ++i) total += quantized_cost(s, i, sol.index[s][i]);
    return total;
  }

  const MaxFlowGraph& network() const { return *net_; }
  int network_node(int s, int i, int j) const {
    const int v = g_->var(s, i);
    return node_id(v, flip_[v] ? n_ - 1 - j : j);
  }
  bool flipped(int var) const { return flip_[var] != 0; }

  /// Difference constraints y_p - y_q <= d in flipped coordinates, deduplicated.
  struct Difference {
    int p, q, d;
  };
  const std::vector<Difference>& differences() const { return diffs_; }

 private:
  int node_id(int var, int k) const { return var * n_ + k; }

  static double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  void touch(int node, std::int64_t delta) {
    net_->add_terminal(node, delta);
    if (std::find(dirty_.begin(), dirty_.end(), node) == dirty_.end()) dirty_.push_back(node);
  }

  /// Two-colours the variables so that every constraint becomes a difference:
  /// a sum constraint needs exactly one flipped end, a difference needs both
  /// ends alike.
  void compute_flips() {
    const int vars = g_->var_count();
    std::vector<std::vector<std::pair<int, int>>> adj(vars);
    for (const auto& c : g_->constraints) {
      const int parity = c.coef_u == c.coef_v ? 1 : 0;
      adj[c.u].push_back({c.v, parity});
      adj[c.v].push_back({c.u, parity});
    }
    flip_.assign(vars, -1);
    for (int start = 0; start < vars; ++start) {
      if (flip_[start] >= 0) continue;
      flip_[start] = g_->surfaces[g_->var_to_surface_column(start).first].object % 2;
      std::vector<int> stack{start};
      while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (const auto& [v, parity] : adj[u]) {
          const int want = flip_[u] ^ parity;
          if (flip_[v] < 0) {
            flip_[v] = want;
            stack.push_back(v);
          } else if (flip_[v] != want) {
            fail(ErrorCode::Internal, "constraint system cannot be reduced to difference constraints");
          }
        }
      }
    }
  }

  void compile_arcs() {
    std::map<std::pair<int, int>, int> tightest;
    for (const auto& c : g_->constraints) {
      int cu = c.coef_u, cv = c.coef_v;
      long long b = c.bound;
      if (flip_[c.u]) {
        b -= static_cast<long long>(cu) * (n_ - 1);
        cu = -cu;
      }
      if (flip_[c.v]) {
        b -= static_cast<long long>(cv) * (n_ - 1);
        cv = -cv;
      }
      if (cu != -cv) fail(ErrorCode::Internal, "constraint did not reduce to a difference");
      const int p = cu > 0 ? c.u : c.v;
      const int q = cu > 0 ? c.v : c.u;
      const int d = static_cast<int>(std::clamp<long long>(b, -2LL * n_, 2LL * n_));
      auto [it, inserted] = tightest.try_emplace({p, q}, d);
      if (!inserted) it->second = std::min(it->second, d);
    }
    diffs_.clear();
    for (const auto& [pq, d] : tightest) diffs_.push_back({pq.first, pq.second, d});
  }

  void build_network() {
    const int vars = g_->var_count();
    const auto INF = MaxFlowGraph::kInfinite;
    net_ = std::make_unique<MaxFlowGraph>(vars * n_);
    net_->set_tracing(opt_.trace_flow);
    const std::size_t pairs = static_cast<std::size_t>(vars) * (n_ - 1) + diffs_.size() * static_cast<std::size_t>(n_);
    net_->reserve_arcs(pairs);

    std::int64_t total = 0;
    for (int v = 0; v < vars; ++v) {
      auto cq = [&](int k) -> std::int64_t { return q_[node_id(v, flip_[v] ? n_ - 1 - k : k)]; };
      net_->add_terminal(node_id(v, 0), INF);
      for (int k = 1; k < n_; ++k) {
        const std::int64_t w = cq(k) - cq(k - 1);
        total += std::abs(w);
        net_->add_terminal(node_id(v, k), -w);
        net_->add_edge(node_id(v, k), node_id(v, k - 1), INF, 0);
      }
    }
    if (total >= INF / 4) fail(ErrorCode::InvalidArgument, "cost range too large for the flow network");
    // y_p - y_q <= d: y_p >= k forces y_q >= k - d.
    for (const auto& df : diffs_)
      for (int k = 0; k < n_; ++k) {
        const int t = k - df.d;
        if (t <= 0) continue;
        if (t >= n_)
          net_->add_terminal(node_id(df.p, k), -INF);
        else
          net_->add_edge(node_id(df.p, k), node_id(df.q, t), INF, 0);
      }
  }

  SurfaceSolution extract() {
    const int vars = g_->var_count();
    std::vector<int> x(vars);
    for (int v = 0; v < vars; ++v) {
      if (!net_->source_side(node_id(v, 0)))
        fail(ErrorCode::Infeasible, "graph constraints admit no surface (base node cut)");
      int y = 0;
      while (y + 1 < n_ && net_->source_side(node_id(v, y + 1))) ++y;
      x[v] = flip_[v] ? n_ - 1 - y : y;
    }
    if (!g_->feasible(x)) fail(ErrorCode::Infeasible, "graph constraints admit no surface");
    SurfaceSolution sol = g_->unflatten(x);
    sol.quantized_objective = quantized_objective(sol);
    sol.objective = static_cast<double>(sol.quantized_objective) / kCostScale;
    if (opt_.audit) audit_solution(*g_, sol);
    return sol;
  }

  std::shared_ptr<const ColumnGraph> g_;
  FlowOptions opt_;
  int n_ = 0;
  std::vector<std::int32_t> q_;
  std::vector<int> flip_;
  std::vector<Difference> diffs_;
  std::unique_ptr<MaxFlowGraph> net_;
  std::vector<int> dirty_;
  SurfaceSolution solution_;
  SolverStats stats_;
  bool solved_ = false;
};

/// Builds the flow network for a graph and cost field (no solve yet).
inline FlowState build_flow(const ColumnGraph& g, const CostField& costs, FlowOptions opt = {}) {
  return FlowState(g, costs, opt);
}

}  // namespace logismos
