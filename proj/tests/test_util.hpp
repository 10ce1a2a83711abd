#pragma once

#include <array>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "logismos/costs.hpp"
#include "logismos/graph.hpp"
#include "logismos/maxflow.hpp"
#include "logismos/random.hpp"

namespace logismos::testing {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "logismos_test_XXXXXX").string();
    path = mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

/// Small random graph: 1-2 objects, 1-2 surfaces each, <= 3 columns per object,
/// <= 6 nodes per column, chain adjacency and random explicit couplings.
inline ColumnGraph random_small_graph(Rng& rng, int max_columns = 3, int max_nodes = 6, int max_vars = 6) {
  GraphParams p;
  p.column_size = 2 + static_cast<int>(uniform_index(rng, max_nodes - 1));
  p.node_spacing = 0.2;
  p.smoothness = static_cast<int>(uniform_index(rng, 4));
  p.inter_surface_min = static_cast<int>(uniform_index(rng, 3));
  p.inter_surface_max = std::min(p.column_size, p.inter_surface_min + static_cast<int>(uniform_index(rng, p.column_size)));
  p.inter_surface_min = std::min(p.inter_surface_min, p.inter_surface_max);
  p.inter_object_min = static_cast<int>(uniform_index(rng, 3));
  p.inter_object_max = p.inter_object_min + static_cast<int>(uniform_index(rng, 2 * p.column_size));
  const int objects = 1 + static_cast<int>(uniform_index(rng, 2));
  // At most max_vars surface variables in total keeps enumeration cheap.
  std::array<int, 2> surfs{}, cols{};
  do {
    for (int o = 0; o < objects; ++o) {
      surfs[o] = 1 + static_cast<int>(uniform_index(rng, 2));
      cols[o] = 1 + static_cast<int>(uniform_index(rng, max_columns));
    }
  } while (surfs[0] * cols[0] + (objects == 2 ? surfs[1] * cols[1] : 0) > max_vars);
  std::vector<ObjectColumns> objs;
  for (int o = 0; o < objects; ++o) {
    ObjectColumns oc;
    oc.surfaces = surfs[o];
    const int n = cols[o];
    for (int i = 0; i < n; ++i)
      oc.columns.push_back(straight_column(i, o, {static_cast<double>(i), 0.0, o * 10.0}, {0, 0, o == 0 ? 1.0 : -1.0},
                                           p.column_size, p.node_spacing));
    for (int i = 0; i + 1 < n; ++i) oc.adjacency.push_back({i, i + 1});
    if (n >= 3 && uniform01(rng) < 0.5) oc.adjacency.push_back({0, n - 1});
    objs.push_back(std::move(oc));
  }
  AssembleOptions opt;
  if (objects == 2) {
    std::vector<ObjectCoupling> cs;
    const int na = static_cast<int>(objs[0].columns.size()), nb = static_cast<int>(objs[1].columns.size());
    for (int i = 0; i < std::min(na, nb); ++i)
      if (uniform01(rng) < 0.7)
        cs.push_back({i, i, p.inter_object_min + static_cast<int>(uniform_index(rng, 2 * p.column_size))});
    opt.couplings = cs;
  } else {
    opt.couple_objects = false;
  }
  return assemble_graph(std::move(objs), p, opt);
}

/// Random costs, multiples of 1e-4 so quantization is exact.
inline CostField random_costs(const ColumnGraph& g, Rng& rng, int range = 10000) {
  CostField cf(g, 0.0);
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i)
      for (int j = 0; j < g.column_size(); ++j)
        cf.at(s, i, j) = static_cast<double>(static_cast<int>(uniform_index(rng, 2 * range + 1)) - range) / kCostScale;
  return cf;
}

/// Exhaustive minimum over every feasible configuration, in quantized units.
inline std::optional<std::int64_t> brute_force_minimum(const ColumnGraph& g, const CostField& cf) {
  const int vars = g.var_count(), n = g.column_size();
  std::vector<int> x(vars, 0);
  std::vector<std::pair<int, int>> sc(vars);
  for (int v = 0; v < vars; ++v) sc[v] = g.var_to_surface_column(v);
  std::optional<std::int64_t> best;
  for (;;) {
    if (g.feasible(x)) {
      std::int64_t total = 0;
      for (int v = 0; v < vars; ++v) total += quantize_cost(cf.at(sc[v].first, sc[v].second, x[v]));
      if (!best || total < *best) best = total;
    }
    int k = 0;
    while (k < vars && ++x[k] == n) x[k++] = 0;
    if (k == vars) break;
  }
  return best;
}

}  // namespace logismos::testing

using logismos::testing::TempDir;
