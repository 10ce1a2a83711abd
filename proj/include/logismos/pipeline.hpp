#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "logismos/adaboost.hpp"
#include "logismos/config.hpp"
#include "logismos/costs.hpp"
#include "logismos/elf.hpp"
#include "logismos/error.hpp"
#include "logismos/evaluation.hpp"
#include "logismos/features.hpp"
#include "logismos/graph.hpp"
#include "logismos/jei.hpp"
#include "logismos/kdtree.hpp"
#include "logismos/maxflow.hpp"
#include "logismos/mesh.hpp"
#include "logismos/naf.hpp"
#include "logismos/phantom.hpp"
#include "logismos/random_forest.hpp"
#include "logismos/volume.hpp"

namespace logismos {

enum class CostMode { Gradient, RfOnly, NafRf };

inline std::string to_string(CostMode m) {
  switch (m) {
    case CostMode::Gradient: return "gradient";
    case CostMode::RfOnly: return "rf-only";
    case CostMode::NafRf: return "naf+rf";
  }
  return "gradient";
}

inline CostMode parse_cost_mode(const std::string& s) {
  if (s == "gradient") return CostMode::Gradient;
  if (s == "rf-only" || s == "rf") return CostMode::RfOnly;
  if (s == "naf+rf" || s == "learned") return CostMode::NafRf;
  fail(ErrorCode::InvalidArgument, "unknown cost mode '" + s + "' (gradient, rf-only, naf+rf)");
}

/// 0-based feature columns usable without a probability map.
inline std::vector<int> rf_only_features() {
  std::vector<int> f;
  for (int k = 1; k <= kFeatureCount; ++k)
    if (std::find(kNafFeatureIndices.begin(), kNafFeatureIndices.end(), k) == kNafFeatureIndices.end())
      f.push_back(k - 1);
  return f;
}

struct PipelineConfig {
  GraphParams gradient_params = GraphParams::gradient();
  GraphParams learned_params = GraphParams::learned();
  CostOptions costs;
  FeatureOptions features;
  NafOptions naf;
  RFOptions rf;
  JeiOptions jei;
  VoiDetectorOptions voi;
  int clusters = 8;
  double voi_pad = 0.05;
  bool bypass_voi = true;
  double naf_roi_pad_mm = 3.0;
  int naf_patches_per_volume = 1000;
  int positive_band = 1;
  int negatives_per_column = 10;
  int jei_max_rounds = 25;
  double jei_stop_nodes = 2.0;
  bool jei_training = true;

  static GraphParams params_from(const KeyValueConfig& c, const std::string& prefix, GraphParams p) {
    p.smoothness = static_cast<int>(c.get_int(prefix + ".smoothness", p.smoothness));
    p.inter_surface_min = static_cast<int>(c.get_int(prefix + ".inter_surface_min", p.inter_surface_min));
    p.inter_surface_max = static_cast<int>(c.get_int(prefix + ".inter_surface_max", p.inter_surface_max));
    p.inter_object_min = static_cast<int>(c.get_int(prefix + ".inter_object_min", p.inter_object_min));
    p.inter_object_max = static_cast<int>(c.get_int(prefix + ".inter_object_max", p.inter_object_max));
    p.column_size = static_cast<int>(c.get_int(prefix + ".column_size", p.column_size));
    p.node_spacing = c.get_double(prefix + ".node_spacing", p.node_spacing);
    p.validate();
    return p;
  }

  static PipelineConfig from_config(const KeyValueConfig& c) {
    PipelineConfig p;
    if (c.get_string("graph.preset", "") == "paper-full") {
      p.naf.trees = 200;
      p.naf.patches_per_tree = 40000;
      p.rf.trees = 800;
      p.clusters = 40;
    }
    p.gradient_params = params_from(c, "graph.gradient", p.gradient_params);
    p.learned_params = params_from(c, "graph.learned", p.learned_params);
    p.costs.cartilage_weight = c.get_double("costs.cartilage_weight", p.costs.cartilage_weight);
    p.costs.bone_polarity = static_cast<int>(c.get_int("costs.bone_polarity", p.costs.bone_polarity));
    p.costs.cartilage_polarity = static_cast<int>(c.get_int("costs.cartilage_polarity", p.costs.cartilage_polarity));
    p.features.gabor_frequency = c.get_double("features.gabor_frequency", p.features.gabor_frequency);
    p.features.gabor_sigma = c.get_double("features.gabor_sigma", p.features.gabor_sigma);
    p.features.moment_box_mm = c.get_double("features.moment_box_mm", p.features.moment_box_mm);
    p.features.haar_mm = c.get_double("features.haar_mm", p.features.haar_mm);
    p.naf.trees = static_cast<int>(c.get_int("naf.trees", p.naf.trees));
    p.naf.patches_per_tree = static_cast<int>(c.get_int("naf.patches_per_tree", p.naf.patches_per_tree));
    p.naf.candidates = static_cast<int>(c.get_int("naf.candidates", p.naf.candidates));
    p.naf.max_depth = static_cast<int>(c.get_int("naf.max_depth", p.naf.max_depth));
    p.naf.min_samples = static_cast<int>(c.get_int("naf.min_samples", p.naf.min_samples));
    p.naf.patch_radius = static_cast<int>(c.get_int("naf.patch_radius", p.naf.patch_radius));
    p.naf.negative_band = static_cast<int>(c.get_int("naf.negative_band", p.naf.negative_band));
    p.naf_patches_per_volume = static_cast<int>(c.get_int("naf.patches_per_volume", p.naf_patches_per_volume));
    p.naf_roi_pad_mm = c.get_double("naf.roi_pad_mm", p.naf_roi_pad_mm);
    p.rf.trees = static_cast<int>(c.get_int("rf.trees", p.rf.trees));
    p.rf.mtry = static_cast<int>(c.get_int("rf.mtry", p.rf.mtry));
    p.rf.max_depth = static_cast<int>(c.get_int("rf.max_depth", p.rf.max_depth));
    p.rf.min_leaf = static_cast<int>(c.get_int("rf.min_leaf", p.rf.min_leaf));
    p.clusters = static_cast<int>(c.get_int("rf.clusters", p.clusters));
    p.positive_band = static_cast<int>(c.get_int("rf.positive_band", p.positive_band));
    p.negatives_per_column = static_cast<int>(c.get_int("rf.negatives_per_column", p.negatives_per_column));
    p.jei.nearest = static_cast<int>(c.get_int("jei.nearest", p.jei.nearest));
    p.jei.tolerance = static_cast<int>(c.get_int("jei.tolerance", p.jei.tolerance));
    p.jei.gate_mm = c.get_double("jei.gate_mm", p.jei.gate_mm);
    p.jei_max_rounds = static_cast<int>(c.get_int("jei.max_rounds", p.jei_max_rounds));
    p.jei_stop_nodes = c.get_double("jei.stop_nodes", p.jei_stop_nodes);
    p.jei_training = c.get_bool("jei.training", p.jei_training);
    p.voi_pad = c.get_double("voi.pad", p.voi_pad);
    p.bypass_voi = c.get_bool("voi.bypass", p.bypass_voi);
    p.voi.rounds = static_cast<int>(c.get_int("voi.rounds", p.voi.rounds));
    p.voi.cell_mm = c.get_double("voi.cell_mm", p.voi.cell_mm);
    p.voi.pad_fraction = p.voi_pad;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Cases: a volume with its truth, in memory or on disk.

struct Case {
  std::string name;
  Volume3 volume;
  Volume3 labels;
  std::array<std::array<TriangleMesh, 2>, 2> truth;  ///< [object][surface]
};

inline Case case_from_phantom(const std::string& name, const Phantom& ph) {
  Case c;
  c.name = name;
  c.volume = ph.volume;
  c.labels = ph.labels;
  for (int o = 0; o < 2; ++o)
    for (int s = 0; s < 2; ++s) c.truth[o][s] = ph.truth(o, s);
  return c;
}

inline std::string truth_file(int o, int s) {
  return std::string(o == 0 ? "femur" : "tibia") + (s == 0 ? "_bone" : "_cartilage") + ".obj";
}

inline void save_case(const Case& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_volume(c.volume, dir / "image.mhd");
  write_volume(c.labels, dir / "labels.mhd");
  for (int o = 0; o < 2; ++o)
    for (int s = 0; s < 2; ++s) write_obj(c.truth[o][s], dir / truth_file(o, s));
}

inline Case load_case(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "image.mhd"))
    fail(ErrorCode::NotFound, "no volume named '" + dir.filename().string() + "' under " + dir.parent_path().string());
  Case c;
  c.name = dir.filename().string();
  c.volume = read_volume(dir / "image.mhd");
  if (std::filesystem::exists(dir / "labels.mhd")) c.labels = read_volume(dir / "labels.mhd");
  for (int o = 0; o < 2; ++o)
    for (int s = 0; s < 2; ++s)
      if (std::filesystem::exists(dir / truth_file(o, s))) c.truth[o][s] = read_obj(dir / truth_file(o, s));
  return c;
}

inline bool has_truth(const Case& c) {
  for (const auto& o : c.truth)
    for (const auto& m : o)
      if (m.faces.empty()) return false;
  return true;
}

/// Truth VOI of one object: bone bounding box, padded.
inline VOIBox case_voi(const Case& c, int object, double pad) {
  require(!c.truth[object][0].vertices.empty(), ErrorCode::FailedPrecondition,
          "VOI bypass needs the truth bone surface of case " + c.name);
  return {bounding_box(c.truth[object][0]).padded(pad), object};
}

// ---------------------------------------------------------------------------
// Shape prior: mean bone shape per object with cluster labels.

struct ShapePrior {
  std::array<TriangleMesh, 2> s0;
};

inline ShapePrior build_prior(const std::vector<const Case*>& cases, int clusters, std::uint64_t seed) {
  require(!cases.empty(), ErrorCode::InvalidArgument, "the shape prior needs at least one training case");
  ShapePrior p;
  for (int o = 0; o < 2; ++o) {
    std::vector<TriangleMesh> ms;
    for (const auto* c : cases) ms.push_back(c->truth[o][kBoneSurface]);
    p.s0[o] = kmeans_parcellate(mean_shape(ms), clusters, mix_seed(seed, 0x5330 + o));
  }
  return p;
}

inline void save_prior(const ShapePrior& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (int o = 0; o < 2; ++o) {
    const std::string stem = o == 0 ? "s0_femur" : "s0_tibia";
    write_obj(p.s0[o], dir / (stem + ".obj"));
    write_clusters(p.s0[o], dir / (stem + ".clusters"));
  }
}

inline ShapePrior load_prior(const std::filesystem::path& dir) {
  ShapePrior p;
  for (int o = 0; o < 2; ++o) {
    const std::string stem = o == 0 ? "s0_femur" : "s0_tibia";
    if (!std::filesystem::exists(dir / (stem + ".obj")))
      fail(ErrorCode::FailedPrecondition, "missing shape prior " + (dir / (stem + ".obj")).string());
    p.s0[o] = read_obj(dir / (stem + ".obj"));
    read_clusters(p.s0[o], dir / (stem + ".clusters"));
  }
  return p;
}

struct LearnedModels {
  std::optional<NAFModel> naf;
  std::optional<ClusteredRFModel> rf_naf;   ///< all 30 features
  std::optional<ClusteredRFModel> rf_only;  ///< without the probability-map features
};

// ---------------------------------------------------------------------------
// Segmentation

/// Two-object graph from per-object bone meshes with both surfaces per object.
inline ColumnGraph build_object_graph(const std::array<TriangleMesh, 2>& meshes, const GraphParams& params,
                                      int surfaces = 2) {
  std::vector<ObjectColumns> objs;
  for (int o = 0; o < 2; ++o) objs.push_back(object_columns(build_elf_columns(meshes[o], params, o), meshes[o], surfaces));
  return assemble_graph(std::move(objs), params);
}

/// Single-surface, single-object gradient solve that adapts S0 to the image.
inline TriangleMesh presegment_bone(const Volume3& image, const TriangleMesh& s0_fit, const GraphParams& params,
                                    const CostOptions& opt) {
  std::vector<ObjectColumns> objs{object_columns(build_elf_columns(s0_fit, params, 0), s0_fit, 1)};
  auto g = std::make_shared<const ColumnGraph>(assemble_graph(std::move(objs), params));
  CostField cf(*g, 0.0);
  for (int i = 0; i < g->columns_of_surface(0); ++i) {
    const auto c = unlikeliness(bone_response(image, g->column(0, i), opt.bone_polarity));
    std::copy(c.begin(), c.end(), cf.column(0, i).begin());
  }
  FlowState fs(g, cf);
  TriangleMesh s = surface_mesh(*g, fs.solve(), 0);
  s.clusters = s0_fit.clusters;
  return s;
}

/// Union box of the object VOIs padded by `mm`.
inline Box3 voi_union(const std::array<VOIBox, 2>& voi, double mm = 0.0) {
  Box3 b;
  for (const auto& v : voi) {
    b.expand(v.box.lo);
    b.expand(v.box.hi);
  }
  return {b.lo - Vec3{mm, mm, mm}, b.hi + Vec3{mm, mm, mm}};
}

/// Per-node features of every object of g.
inline std::array<NodeFeatures, 2> graph_features(const Volume3& image, const Volume3& naf_map, const ColumnGraph& g,
                                                  const FeatureOptions& fo) {
  const auto vols = compute_feature_volumes(image, naf_map, fo);
  return {extract_features(vols, image, naf_map, g, 0), extract_features(vols, image, naf_map, g, 1)};
}

inline std::vector<int> column_clusters(const ColumnGraph& g, int object, const TriangleMesh& s0) {
  const auto& cols = g.objects.at(object).columns;
  require(s0.clusters.size() == s0.vertices.size(), ErrorCode::FailedPrecondition, "shape prior has no cluster labels");
  std::vector<int> out(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    require(cols[i].vertex >= 0 && cols[i].vertex < static_cast<int>(s0.clusters.size()), ErrorCode::InvalidArgument,
            "column vertex has no cluster");
    out[i] = s0.clusters[cols[i].vertex];
  }
  return out;
}

struct Segmentation {
  std::string name;
  CostMode mode = CostMode::Gradient;
  Volume3 image;  ///< intensity-normalised
  std::array<VOIBox, 2> voi;
  std::array<TriangleMesh, 2> presegmentation;
  std::shared_ptr<const ColumnGraph> graph;
  CostField costs;
  std::shared_ptr<FlowState> flow;
  SurfaceSolution solution;
  std::optional<Volume3> naf_map;
};

inline std::array<VOIBox, 2> find_voi(const Case& c, const PipelineConfig& cfg, const AdaBoostModel* detector) {
  if (cfg.bypass_voi || detector == nullptr) {
    require(cfg.bypass_voi || has_truth(c), ErrorCode::FailedPrecondition,
            "VOI detection needs a trained detector (train voi) or voi.bypass");
    return {case_voi(c, 0, cfg.voi_pad), case_voi(c, 1, cfg.voi_pad)};
  }
  const auto v = detect_voi(c.volume, *detector);
  require(v.size() == 2, ErrorCode::DetectionFailed, "detector must report two objects");
  return {v[0], v[1]};
}

inline Segmentation segment_case(const Case& c, const ShapePrior& prior, CostMode mode, const LearnedModels& models,
                                 const PipelineConfig& cfg, const AdaBoostModel* detector = nullptr) {
  Segmentation seg;
  seg.name = c.name;
  seg.mode = mode;
  std::string stage = "voi";
  try {
    seg.voi = find_voi(c, cfg, detector);
    stage = "normalize";
    seg.image = normalize_intensity(c.volume, voi_union(seg.voi));
    stage = "presegment";
    for (int o = 0; o < 2; ++o)
      seg.presegmentation[o] =
          presegment_bone(seg.image, fit_to_voi(prior.s0[o], seg.voi[o]), cfg.gradient_params, cfg.costs);
    stage = "graph";
    const GraphParams& params = mode == CostMode::Gradient ? cfg.gradient_params : cfg.learned_params;
    seg.graph = std::make_shared<const ColumnGraph>(build_object_graph(seg.presegmentation, params));
    stage = "costs";
    seg.costs = gradient_costs(seg.image, *seg.graph, cfg.costs);
    if (mode != CostMode::Gradient) {
      const ClusteredRFModel* rf = mode == CostMode::NafRf ? (models.rf_naf ? &*models.rf_naf : nullptr)
                                                           : (models.rf_only ? &*models.rf_only : nullptr);
      if (!rf) fail(ErrorCode::FailedPrecondition, "cost mode " + to_string(mode) + " needs a trained RF model");
      Volume3 pmap(seg.image.geometry(), ElementType::Float32, 0.0f);
      if (mode == CostMode::NafRf) {
        if (!models.naf) fail(ErrorCode::FailedPrecondition, "cost mode naf+rf needs a trained NAF model");
        stage = "naf";
        pmap = naf_probability_map(*models.naf, seg.image, voi_union(seg.voi, cfg.naf_roi_pad_mm));
        seg.naf_map = pmap;
      }
      stage = "features";
      const auto feats = graph_features(seg.image, pmap, *seg.graph, cfg.features);
      stage = "rf";
      std::vector<std::vector<double>> prob(seg.graph->surface_count());
      for (int o = 0; o < 2; ++o) {
        const int s = seg.graph->surface_index(o, kCartilageSurface);
        prob[s] = rf_node_probabilities(*rf, feats[o], column_clusters(*seg.graph, o, prior.s0[o]));
      }
      seg.costs = learned_cost(prob, *seg.graph, &seg.costs);
    }
    stage = "solve";
    seg.flow = std::make_shared<FlowState>(seg.graph, seg.costs);
    seg.solution = seg.flow->solve();
  } catch (const Error& e) {
    throw e.stage().empty() ? e.with_stage(stage) : e;
  }
  return seg;
}

// ---------------------------------------------------------------------------
// Truth comparison and scripted JEI

/// Truth crossing positions per graph surface.
inline std::vector<std::vector<std::optional<double>>> graph_truth(const ColumnGraph& g, const Case& c) {
  std::vector<std::vector<std::optional<double>>> t(g.surface_count());
  for (int s = 0; s < g.surface_count(); ++s)
    t[s] = truth_positions(g, s, c.truth[g.surfaces[s].object][g.surfaces[s].surface]);
  return t;
}

inline double mean_unsigned(const ColumnGraph& g, const SurfaceSolution& sol,
                            const std::vector<std::vector<std::optional<double>>>& truth) {
  double sum = 0;
  int n = 0;
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i)
      if (truth[s][i]) {
        sum += std::abs(sol.index[s][i] * g.column(s, i).spacing - *truth[s][i]);
        ++n;
      }
  return n ? sum / n : 0.0;
}

/// Plane-section points of a mesh within `radius` of `near`, placed exactly on
/// the plane and ordered by angle around the section's centre.
inline std::vector<Vec3> slice_section(const TriangleMesh& mesh, int axis, double plane, const Vec3& near,
                                       double radius) {
  std::vector<Vec3> pts;
  Vec3 center;
  int m = 0;
  for (const auto& f : mesh.faces)
    for (int e = 0; e < 3; ++e) {
      const Vec3 &a = mesh.vertices[f[e]], &b = mesh.vertices[f[(e + 1) % 3]];
      if (f[e] > f[(e + 1) % 3]) continue;  // each undirected edge once
      const double da = a[axis] - plane, db = b[axis] - plane;
      if ((da < 0) == (db < 0) || da == db) continue;
      Vec3 p = a + (b - a) * (da / (da - db));
      p[axis] = plane;
      center += p;
      ++m;
      if (distance(p, near) <= radius) pts.push_back(p);
    }
  if (m == 0) return pts;
  center = center / m;
  const int u = (axis + 1) % 3, v = (axis + 2) % 3;
  const double ref = std::atan2(near[v] - center[v], near[u] - center[u]);
  auto angle = [&](const Vec3& p) {
    double a = std::atan2(p[v] - center[v], p[u] - center[u]) - ref;
    while (a <= -kPi) a += 2 * kPi;
    while (a > kPi) a -= 2 * kPi;
    return a;
  };
  std::sort(pts.begin(), pts.end(), [&](const Vec3& a, const Vec3& b) { return angle(a) < angle(b); });
  std::vector<Vec3> out;
  for (const auto& p : pts)
    if (out.empty() || distance(out.back(), p) > 1e-3) out.push_back(p);
  return out;
}

struct WorstColumn {
  int surface = -1;
  int column = -1;
  double error_nodes = 0.0;
};

inline WorstColumn worst_column(const ColumnGraph& g, const SurfaceSolution& sol,
                                const std::vector<std::vector<std::optional<double>>>& truth,
                                const std::set<std::pair<int, int>>& skip = {}) {
  WorstColumn w;
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i) {
      if (!truth[s][i] || skip.count({s, i})) continue;
      const double e = std::abs(sol.index[s][i] - *truth[s][i] / g.column(s, i).spacing);
      if (e > w.error_nodes) w = {s, i, e};
    }
  return w;
}

/// Nudge along the truth section of the slice through a column's truth crossing.
/// The slice axis is the one most perpendicular to the column.
inline NudgeContour truth_nudge(const ColumnGraph& g, int s, int i, const std::vector<std::optional<double>>& truth,
                                const TriangleMesh& truth_mesh, const VolumeGeometry& geom, double radius_mm = 4.0) {
  require(truth[i].has_value(), ErrorCode::NoIntersection, "column has no truth crossing");
  const Column& c = g.column(s, i);
  const double arc = *truth[i];
  const int j = std::clamp(static_cast<int>(std::floor(arc / c.spacing)), 0, c.size() - 2);
  const double f = arc / c.spacing - j;
  const Vec3 p = c.nodes[j] + (c.nodes[j + 1] - c.nodes[j]) * f;
  const Vec3 d = c.direction(j);
  int axis = 0;
  for (int a = 1; a < 3; ++a)
    if (std::abs(d[a]) < std::abs(d[axis])) axis = a;
  NudgeContour n;
  n.object = g.surfaces[s].object;
  n.surface = g.surfaces[s].surface;
  n.axis = axis;
  n.slice = std::clamp(static_cast<int>(std::lround(geom.to_index(p)[axis])), 0, geom.dims[axis] - 1);
  const double plane = geom.origin[axis] + n.slice * geom.spacing[axis];
  n.points = slice_section(truth_mesh, axis, plane, p, radius_mm);
  if (n.points.empty()) {
    Vec3 q = p;
    q[axis] = plane;
    n.points.push_back(q);
  }
  return n;
}

struct ScriptedJeiReport {
  int rounds = 0;
  bool converged = false;
  std::vector<double> mean_unsigned_mm;  ///< before any edit, then after each round
  std::vector<double> max_error_nodes;
  std::vector<NudgeContour> nudges;
};

/// Repeats worst-slice truth nudges until every column is within
/// `stop_nodes` of the truth or the round cap is hit.
inline ScriptedJeiReport scripted_jei(FlowState& fs, const Case& c, EditHistory& history, const PipelineConfig& cfg,
                                      const VolumeGeometry& geom) {
  const ColumnGraph& g = fs.graph();
  const auto truth = graph_truth(g, c);
  const NodeIndexKD kd(g);
  ScriptedJeiReport rep;
  SurfaceSolution sol = fs.solution();
  std::set<std::pair<int, int>> exhausted;
  rep.mean_unsigned_mm.push_back(mean_unsigned(g, sol, truth));
  WorstColumn w = worst_column(g, sol, truth);
  rep.max_error_nodes.push_back(w.error_nodes);
  while (rep.rounds < cfg.jei_max_rounds) {
    w = worst_column(g, sol, truth, exhausted);
    if (w.surface < 0 || w.error_nodes < cfg.jei_stop_nodes) break;
    const auto& sd = g.surfaces[w.surface];
    NudgeContour n = truth_nudge(g, w.surface, w.column, truth[w.surface], c.truth[sd.object][sd.surface], geom);
    n.session_id = c.name;
    NudgeResult r;
    try {
      r = apply_nudge(fs, kd, n, history, cfg.jei, &geom);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoIntersection) throw;
      exhausted.insert({w.surface, w.column});
      continue;
    }
    ++rep.rounds;
    rep.nudges.push_back(n);
    const double before = std::abs(sol.index[w.surface][w.column] - *truth[w.surface][w.column] / g.column(w.surface, w.column).spacing);
    sol = r.solution;
    const double after = std::abs(sol.index[w.surface][w.column] - *truth[w.surface][w.column] / g.column(w.surface, w.column).spacing);
    if (after >= before) exhausted.insert({w.surface, w.column});
    rep.mean_unsigned_mm.push_back(mean_unsigned(g, sol, truth));
    rep.max_error_nodes.push_back(worst_column(g, sol, truth).error_nodes);
  }
  rep.converged = worst_column(g, sol, truth).error_nodes < cfg.jei_stop_nodes;
  return rep;
}

// ---------------------------------------------------------------------------
// Training

inline std::vector<PatchSample> naf_training_patches(const Case& c, const PipelineConfig& cfg, std::uint64_t seed) {
  require(!c.labels.data().empty(), ErrorCode::FailedPrecondition, "NAF training needs labels for " + c.name);
  const std::array<VOIBox, 2> voi{case_voi(c, 0, cfg.voi_pad), case_voi(c, 1, cfg.voi_pad)};
  const Volume3 image = normalize_intensity(c.volume, voi_union(voi));
  Rng rng = make_rng(seed, 0x504154);
  return sample_patches(image, c.labels, &is_cartilage_label, cfg.naf_patches_per_volume, cfg.naf, rng);
}

inline NAFModel train_naf_on(const std::vector<const Case*>& cases, const PipelineConfig& cfg, std::uint64_t seed) {
  std::vector<PatchSample> all;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    auto p = naf_training_patches(*cases[k], cfg, mix_seed(seed, k));
    all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return train_naf(all, cfg.naf, mix_seed(seed, 0x4e4146));
}

/// Corrected training surfaces of one RF-train case: gradient segmentation,
/// optionally refined by scripted JEI.
struct TrainingSurfaces {
  std::array<TriangleMesh, 2> bone;
  std::array<TriangleMesh, 2> cartilage;
  ScriptedJeiReport jei;
  Volume3 image;
  std::array<VOIBox, 2> voi;
};

inline TrainingSurfaces corrected_surfaces(const Case& c, const ShapePrior& prior, const PipelineConfig& cfg) {
  Segmentation seg = segment_case(c, prior, CostMode::Gradient, {}, cfg);
  TrainingSurfaces ts;
  if (cfg.jei_training) {
    EditHistory h;
    ts.jei = scripted_jei(*seg.flow, c, h, cfg, c.volume.geometry());
    seg.solution = seg.flow->solution();
  }
  for (int o = 0; o < 2; ++o) {
    ts.bone[o] = surface_mesh(*seg.graph, seg.solution, seg.graph->surface_index(o, kBoneSurface));
    ts.cartilage[o] = surface_mesh(*seg.graph, seg.solution, seg.graph->surface_index(o, kCartilageSurface));
  }
  ts.image = seg.image;
  ts.voi = seg.voi;
  return ts;
}

/// Appends per-node RF examples of one case to per-(object, cluster) sets.
inline void collect_rf_examples(const TrainingSurfaces& ts, const ShapePrior& prior, const NAFModel* naf,
                                const PipelineConfig& cfg, std::uint64_t seed, std::vector<ClusterData>& data) {
  const ColumnGraph g = build_object_graph(ts.bone, cfg.learned_params);
  Volume3 pmap(ts.image.geometry(), ElementType::Float32, 0.0f);
  if (naf) pmap = naf_probability_map(*naf, ts.image, voi_union(ts.voi, cfg.naf_roi_pad_mm));
  const auto feats = graph_features(ts.image, pmap, g, cfg.features);
  Rng rng = make_rng(seed, 0x5246);
  const int n = g.column_size();
  for (int o = 0; o < 2; ++o) {
    const int s = g.surface_index(o, kCartilageSurface);
    const auto pos = truth_positions(g, s, ts.cartilage[o]);
    const auto clusters = column_clusters(g, o, prior.s0[o]);
    for (int i = 0; i < g.columns_of_surface(s); ++i) {
      if (!pos[i]) continue;
      const int p = static_cast<int>(std::lround(*pos[i] / g.column(s, i).spacing));
      auto it = std::find_if(data.begin(), data.end(),
                             [&](const ClusterData& d) { return d.object == o && d.cluster == clusters[i]; });
      if (it == data.end()) {
        data.push_back({});
        data.back().object = o;
        data.back().cluster = clusters[i];
        it = data.end() - 1;
      }
      for (int j = std::max(0, p - cfg.positive_band); j <= std::min(n - 1, p + cfg.positive_band); ++j)
        it->add(feats[o].row(i, j), true);
      const int outside = n - (std::min(n - 1, p + cfg.positive_band) - std::max(0, p - cfg.positive_band) + 1);
      for (int k = 0; k < std::min(cfg.negatives_per_column, outside); ++k) {
        int j;
        do j = static_cast<int>(uniform_index(rng, n));
        while (std::abs(j - p) <= cfg.positive_band);
        it->add(feats[o].row(i, j), false);
      }
    }
  }
}

inline void sort_cluster_data(std::vector<ClusterData>& data) {
  std::sort(data.begin(), data.end(),
            [](const ClusterData& a, const ClusterData& b) { return std::tie(a.object, a.cluster) < std::tie(b.object, b.cluster); });
}

/// Both clustered RF variants from RF-train cases (corrected by scripted JEI
/// when enabled). Returns the JEI reports of the cases.
inline std::vector<ScriptedJeiReport> train_rf_models(const std::vector<const Case*>& cases, const ShapePrior& prior,
                                                      LearnedModels& models, const PipelineConfig& cfg,
                                                      std::uint64_t seed, std::ostream* log = nullptr) {
  require(!cases.empty(), ErrorCode::InvalidArgument, "RF training needs at least one case");
  require(models.naf.has_value(), ErrorCode::FailedPrecondition, "RF training needs a trained NAF model");
  std::vector<ScriptedJeiReport> reports;
  std::vector<ClusterData> data;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    if (log) *log << "rf data: " << cases[k]->name << std::endl;
    const auto ts = corrected_surfaces(*cases[k], prior, cfg);
    reports.push_back(ts.jei);
    collect_rf_examples(ts, prior, &*models.naf, cfg, mix_seed(seed, 100 + k), data);
  }
  sort_cluster_data(data);
  RFOptions with_naf = cfg.rf, without_naf = cfg.rf;
  with_naf.features.clear();
  without_naf.features = rf_only_features();
  models.rf_naf = train_clustered_rf(data, with_naf, mix_seed(seed, 2));
  models.rf_only = train_clustered_rf(data, without_naf, mix_seed(seed, 3));
  return reports;
}

inline LearnedModels load_models(const std::filesystem::path& dir) {
  LearnedModels m;
  if (std::filesystem::exists(dir / "naf.lgmd")) m.naf = load_naf_model(dir / "naf.lgmd");
  if (std::filesystem::exists(dir / "rf_naf.lgmd")) m.rf_naf = load_rf_model(dir / "rf_naf.lgmd");
  if (std::filesystem::exists(dir / "rf_only.lgmd")) m.rf_only = load_rf_model(dir / "rf_only.lgmd");
  return m;
}

// ---------------------------------------------------------------------------
// Experiment

struct ExperimentConfig {
  PipelineConfig pipeline;
  PhantomSpec phantom;  ///< base spec; seeds vary per case
  int naf_train = 8;
  int rf_train = 6;
  int test = 10;
  std::vector<std::uint64_t> naf_seeds, rf_seeds, test_seeds;  ///< explicit lists override the counts
  std::uint64_t seed = 7;

  static ExperimentConfig from_config(const KeyValueConfig& c, std::uint64_t seed) {
    ExperimentConfig e;
    e.seed = seed;
    e.pipeline = PipelineConfig::from_config(c);
    // The comparison corpus is noisier and carries more, larger lesions than
    // the default phantom so cartilage boundaries are not trivially gradient-visible.
    e.phantom.noise_sigma = 12.0;
    e.phantom.lesion_count = 5;
    e.phantom.lesion_radius_mm = 2.5;
    e.phantom = PhantomSpec::from_config(c, e.phantom);
    e.naf_train = static_cast<int>(c.get_int("experiment.naf_train", e.naf_train));
    e.rf_train = static_cast<int>(c.get_int("experiment.rf_train", e.rf_train));
    e.test = static_cast<int>(c.get_int("experiment.test", e.test));
    auto seeds = [&](const std::string& k) {
      std::vector<std::uint64_t> out;
      for (double d : c.get_doubles(k, {})) out.push_back(static_cast<std::uint64_t>(d));
      return out;
    };
    e.naf_seeds = seeds("experiment.naf_seeds");
    e.rf_seeds = seeds("experiment.rf_seeds");
    e.test_seeds = seeds("experiment.test_seeds");
    return e;
  }

  /// Phantom seeds of the three sets; derived from the master seed unless given.
  std::array<std::vector<std::uint64_t>, 3> seed_sets() const {
    std::array<std::vector<std::uint64_t>, 3> s{naf_seeds, rf_seeds, test_seeds};
    const int counts[3] = {naf_train, rf_train, test};
    std::uint64_t next = seed * 1000 + 1;
    for (int k = 0; k < 3; ++k)
      if (s[k].empty())
        for (int n = 0; n < counts[k]; ++n) s[k].push_back(next++);
      else
        next += counts[k];
    return s;
  }
};

/// Raises InvalidArgument when any two of the sets share a member.
inline void check_disjoint(const std::array<std::vector<std::uint64_t>, 3>& sets) {
  static const char* names[3] = {"NAF-train", "RF-train", "test"};
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b)
      for (auto x : sets[a])
        if (std::find(sets[b].begin(), sets[b].end(), x) != sets[b].end())
          fail(ErrorCode::InvalidArgument, std::string("training/test sets overlap: case ") + std::to_string(x) +
                                               " is in both " + names[a] + " and " + names[b]);
}

struct ExperimentResult {
  std::vector<ErrorReport> reports;  ///< gradient, rf-only, naf+rf
  std::vector<ScriptedJeiReport> jei;
  ShapePrior prior;
  LearnedModels models;
};

inline std::string format_pm(double m, double sd) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << m << " +- " << sd;
  return os.str();
}

inline std::string object_name(int o) { return o == 0 ? "femur" : "tibia"; }
inline std::string surface_name(int s) { return s == 0 ? "bone" : "cartilage"; }

/// Aligned plain-text comparison table of the aggregate rows.
inline std::string format_table(const std::vector<ErrorReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "object" << std::setw(11) << "surface" << std::setw(10) << "mode" << std::setw(22)
     << "signed (mm)" << std::setw(22) << "unsigned (mm)" << "n\n";
  for (int o = 0; o < 2; ++o)
    for (int s = 0; s < 2; ++s)
      for (const auto& r : reports)
        for (const auto& a : r.aggregate())
          if (a.object == o && a.surface == s)
            os << std::left << std::setw(8) << object_name(o) << std::setw(11) << surface_name(s) << std::setw(10)
               << r.mode << std::setw(22) << format_pm(a.stats.signed_mean, a.stats.signed_sd) << std::setw(22)
               << format_pm(a.stats.unsigned_mean, a.stats.unsigned_sd) << a.stats.count << "\n";
  return os.str();
}

/// CSV with one row per (mode, volume, object, surface) plus aggregate rows.
inline std::string format_csv(const std::vector<ErrorReport>& reports) {
  std::ostringstream os;
  os << "mode,volume,object,surface,signed_mean_mm,signed_sd_mm,unsigned_mean_mm,unsigned_sd_mm,columns,missing\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& r : reports) {
    auto rows = r.rows;
    const auto agg = r.aggregate();
    rows.insert(rows.end(), agg.begin(), agg.end());
    for (const auto& row : rows)
      os << r.mode << "," << row.volume << "," << object_name(row.object) << "," << surface_name(row.surface) << ","
         << row.stats.signed_mean << "," << row.stats.signed_sd << "," << row.stats.unsigned_mean << ","
         << row.stats.unsigned_sd << "," << row.stats.count << "," << row.stats.missing << "\n";
  }
  return os.str();
}

/// Error rows of a segmentation against the case truth.
inline std::vector<ErrorRow> evaluate_segmentation(const Segmentation& seg, const Case& c) {
  std::vector<ErrorRow> rows;
  for (int s = 0; s < seg.graph->surface_count(); ++s) {
    const auto& sd = seg.graph->surfaces[s];
    const auto e = surface_error(*seg.graph, seg.solution, s, c.truth[sd.object][sd.surface], true);
    rows.push_back({c.name, sd.object, sd.surface, e.stats});
  }
  return rows;
}

inline std::string case_name(std::uint64_t seed) { return "phantom_" + std::to_string(seed); }

inline Case make_case(const PhantomSpec& base, std::uint64_t seed) {
  PhantomSpec s = base;
  s.seed = seed;
  return case_from_phantom(case_name(seed), make_phantom(s));
}

/// Full workflow on a phantom corpus; writes table.txt, table.csv, models/ and prior/.
inline ExperimentResult run_experiment(const ExperimentConfig& ec, const std::filesystem::path& out_dir,
                                       std::ostream* log = nullptr) {
  const auto sets = ec.seed_sets();
  check_disjoint(sets);
  const PipelineConfig& cfg = ec.pipeline;
  auto say = [&](const std::string& m) {
    if (log) *log << m << std::endl;
  };
  ExperimentResult res;

  std::vector<Case> naf_cases, rf_cases;
  for (auto s : sets[0]) naf_cases.push_back(make_case(ec.phantom, s));
  for (auto s : sets[1]) rf_cases.push_back(make_case(ec.phantom, s));
  std::vector<const Case*> naf_ptrs;
  for (const auto& c : naf_cases) naf_ptrs.push_back(&c);

  say("shape prior from " + std::to_string(naf_cases.size()) + " cases");
  res.prior = build_prior(naf_ptrs, cfg.clusters, ec.seed);
  say("training NAF");
  res.models.naf = train_naf_on(naf_ptrs, cfg, mix_seed(ec.seed, 1));

  say("preparing RF training data");
  std::vector<const Case*> rf_ptrs;
  for (const auto& c : rf_cases) rf_ptrs.push_back(&c);
  res.jei = train_rf_models(rf_ptrs, res.prior, res.models, cfg, ec.seed, log);

  const CostMode modes[3] = {CostMode::Gradient, CostMode::RfOnly, CostMode::NafRf};
  for (auto m : modes) res.reports.push_back({to_string(m), {}});
  for (auto s : sets[2]) {
    const Case c = make_case(ec.phantom, s);
    say("segmenting " + c.name);
    for (int k = 0; k < 3; ++k) {
      const auto seg = segment_case(c, res.prior, modes[k], res.models, cfg);
      const auto rows = evaluate_segmentation(seg, c);
      res.reports[k].rows.insert(res.reports[k].rows.end(), rows.begin(), rows.end());
    }
  }

  std::filesystem::create_directories(out_dir / "models");
  save_prior(res.prior, out_dir / "prior");
  save_model(*res.models.naf, out_dir / "models" / "naf.lgmd");
  save_model(*res.models.rf_naf, out_dir / "models" / "rf_naf.lgmd");
  save_model(*res.models.rf_only, out_dir / "models" / "rf_only.lgmd");
  std::ofstream(out_dir / "table.txt") << format_table(res.reports);
  std::ofstream(out_dir / "table.csv") << format_csv(res.reports);
  return res;
}

}  // namespace logismos
