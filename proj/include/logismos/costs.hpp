#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/graph.hpp"
#include "logismos/serialize.hpp"
#include "logismos/volume.hpp"

namespace logismos {

enum class CostProvenance : std::uint8_t { Gradient = 0, Learned = 1, JeiModified = 2 };

inline std::string_view to_string(CostProvenance p) {
  switch (p) {
    case CostProvenance::Gradient: return "gradient";
    case CostProvenance::Learned: return "learned";
    case CostProvenance::JeiModified: return "jei-modified";
  }
  return "gradient";
}

/// Per-node unlikeliness, stored per surface as columns x column_size.
struct CostField {
  int column_size = 0;
  std::vector<std::vector<double>> values;
  CostProvenance provenance = CostProvenance::Gradient;

  CostField() = default;
  CostField(const ColumnGraph& g, double fill, CostProvenance p = CostProvenance::Gradient)
      : column_size(g.column_size()), provenance(p) {
    values.resize(g.surface_count());
    for (int s = 0; s < g.surface_count(); ++s)
      values[s].assign(static_cast<std::size_t>(g.columns_of_surface(s)) * column_size, fill);
  }

  int surface_count() const { return static_cast<int>(values.size()); }
  int columns(int s) const { return column_size == 0 ? 0 : static_cast<int>(values[s].size()) / column_size; }
  double at(int s, int i, int j) const { return values[s][static_cast<std::size_t>(i) * column_size + j]; }
  double& at(int s, int i, int j) { return values[s][static_cast<std::size_t>(i) * column_size + j]; }
  std::span<const double> column(int s, int i) const {
    return {values[s].data() + static_cast<std::size_t>(i) * column_size, static_cast<std::size_t>(column_size)};
  }
  std::span<double> column(int s, int i) {
    return {values[s].data() + static_cast<std::size_t>(i) * column_size, static_cast<std::size_t>(column_size)};
  }

  bool congruent(const ColumnGraph& g) const {
    if (column_size != g.column_size() || surface_count() != g.surface_count()) return false;
    for (int s = 0; s < g.surface_count(); ++s)
      if (values[s].size() != static_cast<std::size_t>(g.columns_of_surface(s)) * column_size) return false;
    return true;
  }

  bool operator==(const CostField&) const = default;
};

struct CostOptions {
  double cartilage_weight = 0.7;
  int bone_polarity = +1;       ///< +1: dark-to-bright going outward scores high
  int cartilage_polarity = -1;  ///< -1: bright-to-dark going outward scores high
};

/// Intensities sampled at the nodes of a column.
inline std::vector<double> sample_column(const Volume3& v, const Column& c) {
  std::vector<double> f(c.nodes.size());
  for (std::size_t j = 0; j < f.size(); ++j) f[j] = trilinear_sample(v, c.nodes[j]);
  return f;
}

/// First derivative by central differences with step h; one-sided at the ends.
inline std::vector<double> column_derivative(std::span<const double> f, double h) {
  const std::size_t n = f.size();
  std::vector<double> d(n, 0.0);
  if (n < 2) return d;
  d[0] = (f[1] - f[0]) / h;
  d[n - 1] = (f[n - 1] - f[n - 2]) / h;
  for (std::size_t j = 1; j + 1 < n; ++j) d[j] = (f[j + 1] - f[j - 1]) / (2 * h);
  return d;
}

/// Second derivative (f[j+1] - 2f[j] + f[j-1]) / h^2; end nodes copy their neighbour.
inline std::vector<double> column_second_derivative(std::span<const double> f, double h) {
  const std::size_t n = f.size();
  std::vector<double> d(n, 0.0);
  if (n < 3) return d;
  for (std::size_t j = 1; j + 1 < n; ++j) d[j] = (f[j + 1] - 2 * f[j] + f[j - 1]) / (h * h);
  d[0] = d[1];
  d[n - 1] = d[n - 2];
  return d;
}

/// Bone edge response in intensity/mm.
inline std::vector<double> bone_response(const Volume3& v, const Column& c, int polarity = +1) {
  auto d = column_derivative(sample_column(v, c), c.spacing);
  for (auto& x : d) x *= polarity;
  return d;
}

/// Cartilage response w*d1 + (1-w)*d2 with both derivatives taken per node
/// (unit step), so the weight mixes quantities of comparable magnitude.
inline std::vector<double> cartilage_response(const Volume3& v, const Column& c, double w, int polarity = -1) {
  require(w >= 0.0 && w <= 1.0, ErrorCode::InvalidArgument, "cartilage weight must lie in [0, 1]");
  const auto f = sample_column(v, c);
  const auto d1 = column_derivative(f, 1.0);
  const auto d2 = column_second_derivative(f, 1.0);
  std::vector<double> r(f.size());
  for (std::size_t j = 0; j < r.size(); ++j) r[j] = polarity * (w * d1[j] + (1 - w) * d2[j]);
  return r;
}

/// Normalisation (max, range) applied when converting responses to costs.
struct ResponseScale {
  double max = 0.0;
  double range = 0.0;

  static ResponseScale of(std::span<const double> r) {
    if (r.empty()) return {};
    const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
    return {*hi, *hi - *lo};
  }
};

/// Unlikeliness (M - r) / (M - m) in [0, 1]; low where the response is strong.
/// A flat response gives an all-zero column.
inline std::vector<double> unlikeliness(std::span<const double> r, std::optional<ResponseScale> shared = {}) {
  const ResponseScale sc = shared ? *shared : ResponseScale::of(r);
  std::vector<double> c(r.size(), 0.0);
  if (sc.range <= 0.0) return c;
  for (std::size_t j = 0; j < r.size(); ++j) c[j] = (sc.max - r[j]) / sc.range;
  return c;
}

namespace detail {

template <typename ResponseFn>
CostField fill_costs(const ColumnGraph& g, ResponseFn&& response, const std::vector<int>& surfaces) {
  CostField cf(g, 0.0, CostProvenance::Gradient);
  for (int s : surfaces)
    for (int i = 0; i < g.columns_of_surface(s); ++i) {
      const auto c = unlikeliness(response(g.column(s, i)));
      std::copy(c.begin(), c.end(), cf.column(s, i).begin());
    }
  return cf;
}

inline std::vector<int> all_surfaces(const ColumnGraph& g) {
  std::vector<int> s(g.surface_count());
  for (int i = 0; i < g.surface_count(); ++i) s[i] = i;
  return s;
}

}  // namespace detail

/// First-derivative cost on every surface of the graph.
inline CostField gradient_bone_cost(const Volume3& v, const ColumnGraph& g, int polarity = +1) {
  return detail::fill_costs(g, [&](const Column& c) { return bone_response(v, c, polarity); },
                            detail::all_surfaces(g));
}

/// Weighted first/second-derivative cost on every surface of the graph.
inline CostField gradient_cartilage_cost(const Volume3& v, const ColumnGraph& g, double w = 0.7, int polarity = -1) {
  require(w >= 0.0 && w <= 1.0, ErrorCode::InvalidArgument, "cartilage weight must lie in [0, 1]");
  return detail::fill_costs(g, [&](const Column& c) { return cartilage_response(v, c, w, polarity); },
                            detail::all_surfaces(g));
}

/// Bone surfaces get the bone cost, cartilage surfaces the cartilage cost.
inline CostField gradient_costs(const Volume3& v, const ColumnGraph& g, const CostOptions& opt = {}) {
  CostField cf(g, 0.0, CostProvenance::Gradient);
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i) {
      const Column& col = g.column(s, i);
      const auto r = g.surfaces[s].surface == 0 ? bone_response(v, col, opt.bone_polarity)
                                                : cartilage_response(v, col, opt.cartilage_weight,
                                                                     opt.cartilage_polarity);
      const auto c = unlikeliness(r);
      std::copy(c.begin(), c.end(), cf.column(s, i).begin());
    }
  return cf;
}

/// Cost 1 - p for per-node probabilities of one surface (columns x size).
inline std::vector<double> learned_cost(std::span<const double> prob) {
  std::vector<double> c(prob.size());
  for (std::size_t k = 0; k < prob.size(); ++k) {
    if (!(prob[k] >= 0.0 && prob[k] <= 1.0))
      fail(ErrorCode::InvalidArgument, "probability out of range at node " + std::to_string(k));
    c[k] = 1.0 - prob[k];
  }
  return c;
}

/// Cost field from per-surface probabilities; surfaces with no probabilities
/// (empty vector) keep the costs of `base`.
inline CostField learned_cost(const std::vector<std::vector<double>>& prob, const ColumnGraph& g,
                              const CostField* base = nullptr) {
  CostField cf = base ? *base : CostField(g, 0.0);
  require(cf.congruent(g), ErrorCode::InvalidArgument, "base cost field does not match the graph");
  require(static_cast<int>(prob.size()) == g.surface_count(), ErrorCode::InvalidArgument,
          "probabilities need one entry per surface");
  for (int s = 0; s < g.surface_count(); ++s) {
    if (prob[s].empty()) continue;
    require(prob[s].size() == cf.values[s].size(), ErrorCode::InvalidArgument, "probability shape mismatch");
    cf.values[s] = learned_cost(prob[s]);
  }
  cf.provenance = CostProvenance::Learned;
  return cf;
}

// ---------------------------------------------------------------------------
// Cache dump: graph block followed by an "LGCF" cost block.

inline void write_costs(BinaryWriter& w, const CostField& cf) {
  w.put_magic("LGCF", 1);
  w.put(static_cast<std::uint8_t>(cf.provenance));
  w.put(static_cast<std::int32_t>(cf.column_size));
  w.put(static_cast<std::uint32_t>(cf.values.size()));
  for (const auto& v : cf.values) w.put_vector(v);
}

inline CostField read_costs(BinaryReader& r) {
  const auto version = r.expect_magic("LGCF");
  require(version == 1, ErrorCode::InvalidArgument, "unsupported cost block version");
  CostField cf;
  cf.provenance = static_cast<CostProvenance>(r.get<std::uint8_t>());
  cf.column_size = r.get<std::int32_t>();
  cf.values.resize(r.get<std::uint32_t>());
  for (auto& v : cf.values) v = r.get_vector<double>();
  return cf;
}

inline void save_graph_cache(const ColumnGraph& g, const CostField& cf, const std::filesystem::path& path) {
  require(cf.congruent(g), ErrorCode::InvalidArgument, "cost field does not match the graph");
  BinaryWriter w;
  write_graph(w, g);
  w.put(static_cast<std::uint8_t>(1));
  write_costs(w, cf);
  w.save(path);
}

/// Loads a graph cache and its cost block when present.
inline std::pair<ColumnGraph, std::optional<CostField>> load_graph_cache_with_costs(const std::filesystem::path& path) {
  auto r = BinaryReader::load(path);
  ColumnGraph g = read_graph(r);
  std::optional<CostField> cf;
  if (!r.at_end() && r.get<std::uint8_t>() == 1) cf = read_costs(r);
  return {std::move(g), std::move(cf)};
}

}  // namespace logismos
