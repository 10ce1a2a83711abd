#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "logismos/evaluation.hpp"
#include "logismos/pipeline.hpp"
#include "test_util.hpp"

using namespace logismos;

namespace {

/// Square plane z = h spanning [-5, 5]^2, as two triangles.
TriangleMesh plane_at(double h) {
  TriangleMesh m;
  m.vertices = {{-5, -5, h}, {5, -5, h}, {5, 5, h}, {-5, 5, h}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

ColumnGraph vertical_columns(int n, int size = 21, double spacing = 0.2, double base = 0.0) {
  GraphParams p;
  p.column_size = size;
  p.node_spacing = spacing;
  p.inter_surface_max = size;
  ObjectColumns oc;
  oc.surfaces = 1;
  for (int i = 0; i < n; ++i)
    oc.columns.push_back(straight_column(i, 0, {0.5 * i - 1.0, 0.3, base}, {0, 0, 1}, size, spacing));
  for (int i = 0; i + 1 < n; ++i) oc.adjacency.push_back({i, i + 1});
  return assemble_graph({oc}, p);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(Evaluation, SignedAndUnsignedErrorsOnKnownExample) {
  const ColumnGraph g = vertical_columns(4);
  const TriangleMesh truth = plane_at(2.05);  // arc position 2.05 mm along every column
  SurfaceSolution sol;
  sol.index = {{10, 11, 9, 12}};  // 2.0, 2.2, 1.8, 2.4 mm
  const auto e = surface_error(g, sol, 0, truth);
  const std::vector<double> expect{-0.05, 0.15, -0.25, 0.35};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(e.signed_mm[i], expect[i], 1e-9);
  EXPECT_NEAR(e.stats.signed_mean, 0.05, 1e-9);
  EXPECT_NEAR(e.stats.unsigned_mean, 0.2, 1e-9);
  EXPECT_NEAR(e.stats.unsigned_sd, std::sqrt((0.15 * 0.15 + 0.05 * 0.05 + 0.05 * 0.05 + 0.15 * 0.15) / 4), 1e-9);
  EXPECT_EQ(e.stats.count, 4);
}

TEST(Evaluation, MissingCrossingsAreErrorsUnlessAllowed) {
  const ColumnGraph g = vertical_columns(3);
  SurfaceSolution sol;
  sol.index = {{1, 1, 1}};
  const TriangleMesh far = plane_at(50.0);
  try {
    surface_error(g, sol, 0, far);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoIntersection);
  }
  const auto e = surface_error(g, sol, 0, far, true);
  EXPECT_EQ(e.stats.count, 0);
  EXPECT_EQ(e.stats.missing, 3);
  EXPECT_TRUE(std::isnan(e.signed_mm[0]));
}

TEST(Evaluation, CrossingNearestTheAnchorWins) {
  const ColumnGraph g = vertical_columns(1, 31);
  TriangleMesh two = plane_at(0.5);
  const TriangleMesh b = plane_at(2.3);
  two.vertices.insert(two.vertices.end(), b.vertices.begin(), b.vertices.end());
  two.faces.push_back({4, 5, 6});
  two.faces.push_back({4, 6, 7});
  const auto t = truth_positions(g, 0, two);  // anchor at node 10 = 2.0 mm
  ASSERT_TRUE(t[0].has_value());
  EXPECT_NEAR(*t[0], 2.3, 1e-9);
}

TEST(Evaluation, AggregateIsMeanOfPerVolumeMeans) {
  ErrorReport r{"gradient", {}};
  for (int v = 0; v < 3; ++v)
    for (int o = 0; o < 2; ++o)
      for (int s = 0; s < 2; ++s) {
        ErrorStats st;
        st.signed_mean = v - 1.0;
        st.unsigned_mean = v + 1.0;
        st.count = 100 * (v + 1);
        r.rows.push_back({"v" + std::to_string(v), o, s, st});
      }
  const auto agg = r.aggregate();
  ASSERT_EQ(agg.size(), 4u);
  for (const auto& a : agg) {
    EXPECT_NEAR(a.stats.signed_mean, 0.0, 1e-12);
    EXPECT_NEAR(a.stats.unsigned_mean, 2.0, 1e-12);
    EXPECT_NEAR(a.stats.unsigned_sd, std::sqrt(2.0 / 3.0), 1e-12);
  }
  const std::string table = format_table({r});
  EXPECT_NE(table.find("femur   cartilage  gradient  0.000 +- 0.816"), std::string::npos) << table;
}

TEST(Experiment, SeedSetsAreDisjointAndDerived) {
  ExperimentConfig ec = ExperimentConfig::from_config(KeyValueConfig{}, 7);
  const auto s = ec.seed_sets();
  EXPECT_EQ(s[0].size(), 8u);
  EXPECT_EQ(s[1].size(), 6u);
  EXPECT_EQ(s[2].size(), 10u);
  EXPECT_EQ(s[0].front(), 7001u);
  EXPECT_EQ(s[2].back(), 7024u);
  EXPECT_NO_THROW(check_disjoint(s));
  ec.test_seeds = {7003, 9000};
  try {
    check_disjoint(ec.seed_sets());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    EXPECT_NE(std::string(e.what()).find("7003"), std::string::npos);
  }
  const auto kv = KeyValueConfig::parse("experiment.rf_seeds = 1 2 3\nexperiment.test = 2\n");
  const auto e2 = ExperimentConfig::from_config(kv, 7).seed_sets();
  EXPECT_EQ(e2[1], (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_EQ(e2[2].size(), 2u);
}

TEST(Experiment, OverlappingSetsAbortTheRun) {
  ExperimentConfig ec;
  ec.naf_seeds = {1, 2};
  ec.rf_seeds = {2, 3};
  ec.test_seeds = {4};
  TempDir dir;
  EXPECT_THROW(run_experiment(ec, dir.path), Error);
  EXPECT_FALSE(std::filesystem::exists(dir.path / "table.txt"));
}

TEST(ScriptedJei, NoRoundsOnAPerfectSolution) {
  PhantomSpec spec;
  spec.seed = 31;
  const Case c = case_from_phantom("p", make_phantom(spec));
  PipelineConfig cfg;
  const ShapePrior prior = build_prior({&c}, 4, 1);
  const auto seg = segment_case(c, prior, CostMode::Gradient, LearnedModels{}, cfg);
  const ColumnGraph& g = *seg.graph;
  const auto truth = graph_truth(g, c);
  // Costs that put every column's minimum on its truth crossing.
  CostField cf(g, 0.0);
  for (int s = 0; s < g.surface_count(); ++s)
    for (int i = 0; i < g.columns_of_surface(s); ++i)
      for (int j = 0; j < g.column_size(); ++j)
        cf.at(s, i, j) = truth[s][i] ? std::min(1.0, std::abs(j - *truth[s][i] / g.column(s, i).spacing) / 10) : 0.0;
  FlowState fs(seg.graph, cf);
  fs.solve();
  EditHistory hist;
  const auto rep = scripted_jei(fs, c, hist, cfg, c.volume.geometry());
  EXPECT_EQ(rep.rounds, 0);
  EXPECT_TRUE(rep.converged);
  EXPECT_TRUE(hist.empty());
}

TEST(ScriptedJei, EditsImproveANoisySegmentation) {
  PhantomSpec spec;
  spec.seed = 32;
  spec.noise_sigma = 12;
  spec.lesion_count = 4;
  spec.lesion_radius_mm = 2.5;
  const Case c = case_from_phantom("p", make_phantom(spec));
  PipelineConfig cfg;
  cfg.jei_max_rounds = 8;
  const ShapePrior prior = build_prior({&c}, 4, 1);
  auto seg = segment_case(c, prior, CostMode::Gradient, LearnedModels{}, cfg);
  EditHistory hist;
  const auto rep = scripted_jei(*seg.flow, c, hist, cfg, c.volume.geometry());
  ASSERT_GT(rep.rounds, 0);
  EXPECT_EQ(rep.mean_unsigned_mm.size(), static_cast<std::size_t>(rep.rounds) + 1);
  EXPECT_LT(rep.mean_unsigned_mm.back(), rep.mean_unsigned_mm.front());
  EXPECT_LE(rep.max_error_nodes.back(), rep.max_error_nodes.front());
  EXPECT_EQ(hist.size(), static_cast<std::size_t>(rep.rounds));
  EXPECT_EQ(SolutionAudit::violations().load(), 0);
}

TEST(Experiment, SmallCleanRunIsAccurateAndDeterministic) {
  // Noise 4 and no lesions: every gradient surface within one voxel diagonal.
  const auto kv = KeyValueConfig::parse(
      "experiment.naf_train = 2\nexperiment.rf_train = 2\nexperiment.test = 1\n"
      "noise_sigma = 4\nlesion_count = 0\nnaf.trees = 3\nnaf.patches_per_tree = 600\n"
      "naf.patches_per_volume = 400\nrf.trees = 8\nrf.clusters = 2\njei.max_rounds = 3\n");
  const ExperimentConfig ec = ExperimentConfig::from_config(kv, 11);
  EXPECT_EQ(ec.phantom.noise_sigma, 4.0);
  EXPECT_EQ(ec.phantom.lesion_count, 0);
  TempDir a, b;
  const auto ra = run_experiment(ec, a.path);
  const double diag = norm(ec.phantom.spacing);
  for (const auto& row : ra.reports[0].aggregate()) {
    EXPECT_LE(row.stats.unsigned_mean, diag) << "object " << row.object << " surface " << row.surface;
    EXPECT_GT(row.stats.count, 0);
  }
  run_experiment(ec, b.path);
  for (const char* f : {"table.txt", "table.csv", "models/naf.lgmd", "models/rf_naf.lgmd", "models/rf_only.lgmd",
                        "prior/s0_femur.obj"}) {
    ASSERT_TRUE(std::filesystem::exists(a.path / f)) << f;
    EXPECT_EQ(read_file(a.path / f), read_file(b.path / f)) << f;
  }
  // Saved models reload to the same objects.
  const LearnedModels m = load_models(a.path / "models");
  ASSERT_TRUE(m.rf_naf.has_value());
  EXPECT_EQ(*m.rf_naf, *ra.models.rf_naf);
  EXPECT_EQ(m.rf_only->options.features, rf_only_features());
}
