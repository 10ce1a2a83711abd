#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "logismos/adaboost.hpp"
#include "logismos/features.hpp"
#include "logismos/naf.hpp"
#include "logismos/phantom.hpp"
#include "logismos/pipeline.hpp"
#include "logismos/random_forest.hpp"
#include "test_util.hpp"

using namespace logismos;

namespace {

Grid grid_of(const std::function<double(const Vec3&)>& f, Dims3 dims = {16, 14, 12}, Vec3 sp = {0.5, 0.6, 0.7}) {
  Grid g(VolumeGeometry{dims, sp, {0, 0, 0}});
  for (int k = 0; k < g.nz(); ++k)
    for (int j = 0; j < g.ny(); ++j)
      for (int i = 0; i < g.nx(); ++i) g(i, j, k) = f(g.geom.world(i, j, k));
  return g;
}

Grid random_grid(Rng& rng, Dims3 dims = {9, 8, 7}) {
  Grid g(VolumeGeometry{dims, {0.5, 0.5, 0.5}, {0, 0, 0}});
  for (auto& x : g.v) x = standard_normal(rng);
  return g;
}

}  // namespace

// --- feature oracles -------------------------------------------------------

TEST(Features, JacobiEigenvaluesMatchEigen) {
  Rng rng = make_rng(12);
  for (int t = 0; t < 500; ++t) {
    std::array<std::array<double, 3>, 3> a{};
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r)
      for (int c = r; c < 3; ++c) m(r, c) = m(c, r) = a[r][c] = a[c][r] = uniform(rng, -5, 5);
    if (t % 10 == 0) {  // repeated eigenvalues
      m = Eigen::Matrix3d::Identity() * 2.0;
      m(0, 0) = -1;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) a[r][c] = m(r, c);
    }
    const auto ev = symmetric_eigenvalues(a);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(m);
    const auto ref = es.eigenvalues();  // ascending
    for (int e = 0; e < 3; ++e) EXPECT_NEAR(ev[e], ref(2 - e), 1e-9 * (1 + std::abs(ref(2 - e))));
  }
}

TEST(Features, FiniteDifferencesExactOnQuadratics) {
  // f = 2x^2 - y^2 + 0.5z^2 + 3xy: central differences are exact in the interior.
  const Grid g = grid_of([](const Vec3& p) { return 2 * p.x * p.x - p.y * p.y + 0.5 * p.z * p.z + 3 * p.x * p.y; });
  for (int k = 1; k < g.nz() - 1; ++k)
    for (int j = 1; j < g.ny() - 1; ++j)
      for (int i = 1; i < g.nx() - 1; ++i) {
        const Vec3 p = g.geom.world(i, j, k);
        ASSERT_NEAR(first_difference(g, i, j, k, 0), 4 * p.x + 3 * p.y, 1e-9);
        ASSERT_NEAR(first_difference(g, i, j, k, 1), -2 * p.y + 3 * p.x, 1e-9);
        ASSERT_NEAR(second_difference(g, i, j, k, 0, 0), 4.0, 1e-8);
        ASSERT_NEAR(second_difference(g, i, j, k, 1, 1), -2.0, 1e-8);
        ASSERT_NEAR(second_difference(g, i, j, k, 2, 2), 1.0, 1e-8);
        ASSERT_NEAR(second_difference(g, i, j, k, 0, 1), 3.0, 1e-8);
        ASSERT_NEAR(second_difference(g, i, j, k, 1, 2), 0.0, 1e-8);
      }
}

TEST(Features, HessianEigenvaluesOfQuadraticMatchEigen) {
  // Smoothing a quadratic only shifts it by a constant, so the interior Hessian is unchanged.
  const Grid g = grid_of([](const Vec3& p) { return 2 * p.x * p.x - p.y * p.y + 0.5 * p.z * p.z + 3 * p.x * p.y; },
                         {30, 30, 30}, {0.5, 0.5, 0.5});
  const auto ev = hessian_eigenvalues(g, 0.5);
  Eigen::Matrix3d h;
  h << 4, 3, 0, 3, -2, 0, 0, 0, 1;
  const auto ref = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(h).eigenvalues();
  for (int e = 0; e < 3; ++e) EXPECT_NEAR(ev[e](15, 15, 15), ref(2 - e), 1e-6);
  const Grid lap = laplacian(g, 0.5);
  EXPECT_NEAR(lap(15, 15, 15), 3.0, 1e-6);
}

TEST(Features, GradientMagnitudeOfLinearRamp) {
  const Grid g = grid_of([](const Vec3& p) { return 3 * p.x - 4 * p.z; }, {24, 24, 24}, {0.5, 0.5, 0.5});
  const Grid m = gaussian_gradient_magnitude(g, 0.7);
  EXPECT_NEAR(m(12, 12, 12), 5.0, 1e-6);
}

TEST(Features, GaussianKernelNormalised) {
  for (double s : {0.3, 1.0, 2.5}) {
    const auto k = gaussian_kernel(s);
    double sum = 0;
    for (double x : k) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(k.size() % 2, 1u);
  }
}

TEST(Features, LocalMomentsMatchBruteForceLoops) {
  Rng rng = make_rng(4);
  const Grid g = random_grid(rng);
  const auto mom = local_moments(g, 1.5);
  const auto h = box_half_widths(g.geom.spacing, 1.5);
  for (int k = 0; k < g.nz(); k += 3)
    for (int j = 0; j < g.ny(); j += 2)
      for (int i = 0; i < g.nx(); i += 2) {
        std::vector<double> v;
        for (int c = k - h[2]; c <= k + h[2]; ++c)
          for (int b = j - h[1]; b <= j + h[1]; ++b)
            for (int a = i - h[0]; a <= i + h[0]; ++a)
              if (a >= 0 && b >= 0 && c >= 0 && a < g.nx() && b < g.ny() && c < g.nz()) v.push_back(g(a, b, c));
        Eigen::Map<Eigen::VectorXd> x(v.data(), static_cast<Eigen::Index>(v.size()));
        const double mean = x.mean();
        const Eigen::ArrayXd d = x.array() - mean;
        const double var = d.square().mean();
        EXPECT_NEAR(mom[0](i, j, k), mean, 1e-10);
        EXPECT_NEAR(mom[1](i, j, k), var, 1e-10);
        EXPECT_NEAR(mom[2](i, j, k), d.cube().mean() / std::pow(var, 1.5), 1e-8);
        EXPECT_NEAR(mom[3](i, j, k), d.square().square().mean() / (var * var) - 3.0, 1e-8);
      }
}

TEST(Features, IntegralVolumeMatchesDirectSums) {
  Rng rng = make_rng(8);
  const Grid g = random_grid(rng);
  const IntegralVolume iv(g);
  for (int t = 0; t < 300; ++t) {
    std::array<int, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<int>(uniform_index(rng, 14)) - 3;
      hi[a] = lo[a] + static_cast<int>(uniform_index(rng, 8)) - 1;
    }
    double s = 0;
    long long n = 0;
    for (int k = std::max(lo[2], 0); k <= std::min(hi[2], g.nz() - 1); ++k)
      for (int j = std::max(lo[1], 0); j <= std::min(hi[1], g.ny() - 1); ++j)
        for (int i = std::max(lo[0], 0); i <= std::min(hi[0], g.nx() - 1); ++i) {
          s += g(i, j, k);
          ++n;
        }
    ASSERT_NEAR(iv.sum(lo, hi), s, 1e-9);
    ASSERT_EQ(iv.count(lo, hi), n);
  }
}

TEST(Features, HaarRespondsToStepAlongItsAxis) {
  const Grid g = grid_of([](const Vec3& p) { return p.x < 4.0 ? 0.0 : 10.0; }, {16, 16, 8}, {0.5, 0.5, 0.5});
  const auto hf = haar_features(g, 1.5);
  EXPECT_NEAR(hf[0](8, 8, 4), 10.0, 1e-9);  // x = 4.0 sits on the step; right side is all 10
  EXPECT_NEAR(hf[1](8, 8, 4), 0.0, 1e-9);
  EXPECT_NEAR(hf[0](2, 8, 4), 0.0, 1e-9);
}

TEST(Features, GaborIsZeroOnFlatInput) {
  const Grid g = grid_of([](const Vec3&) { return 7.0; });
  const Grid r = gabor_even(g, 0.5, 1.0);
  for (double x : r.v) ASSERT_NEAR(x, 0.0, 1e-9);
}

TEST(Features, FeatureLayoutAndNodeSampling) {
  PhantomSpec spec;
  spec.mesh_level = 2;
  const Phantom ph = make_phantom(spec);
  Volume3 naf(ph.volume.geometry(), ElementType::Float32, 0.25f);
  const auto vols = compute_feature_volumes(ph.volume, naf);
  ASSERT_EQ(vols.size(), 28u);
  const int c = ph.volume.index(28, 28, 32);
  EXPECT_EQ(vols[15].data()[c], ph.volume.data()[c]);  // feature 16 is the raw image
  EXPECT_EQ(vols[17].data()[c], 0.25f);                // feature 18 is the probability map
  EXPECT_NEAR(vols[12].data()[c], 0.0, 1e-6);          // flat map has no gradient
  GraphParams p = GraphParams::gradient();
  p.column_size = 21;
  p.inter_object_max = 20;
  const TriangleMesh& bone = ph.truth(0, kBoneSurface);
  const ColumnGraph g = assemble_graph({object_columns(build_elf_columns(bone, p), bone, 2)}, p);
  const NodeFeatures nf = extract_features(vols, ph.volume, naf, g, 0);
  EXPECT_EQ(nf.columns, static_cast<int>(bone.vertices.size()));
  EXPECT_EQ(nf.size, 21);
  const Column& col = g.column(0, 3);
  EXPECT_FLOAT_EQ(nf.at(3, 5, 15), static_cast<float>(trilinear_sample(ph.volume, col.nodes[5])));
  EXPECT_FLOAT_EQ(nf.at(3, 5, 28), 0.0f);
  const auto d = column_derivative(sample_column(ph.volume, col), col.spacing);
  EXPECT_FLOAT_EQ(nf.at(3, 5, 29), static_cast<float>(d[5]));
}

// --- AdaBoost and VOI detection --------------------------------------------

TEST(AdaBoost, TrainingErrorBoundedByLossProduct) {
  Rng rng = make_rng(21);
  FeatureMatrix X(400, 4);
  std::vector<int> y(400);
  for (int r = 0; r < 400; ++r) {
    for (int c = 0; c < 4; ++c) X.at(r, c) = static_cast<float>(standard_normal(rng));
    // A circle is not separable by one stump but is by a committee.
    y[r] = X.at(r, 0) * X.at(r, 0) + X.at(r, 1) * X.at(r, 1) < 1.0 ? 1 : -1;
  }
  AdaBoostReport rep;
  const StumpEnsemble e = train_adaboost(X, y, 60, &rep);
  ASSERT_EQ(rep.training_error.size(), 60u);
  for (std::size_t t = 0; t < rep.loss_bound.size(); ++t) {
    EXPECT_LE(rep.training_error[t], rep.loss_bound[t] + 1e-12);
    if (t > 0) EXPECT_LE(rep.loss_bound[t], rep.loss_bound[t - 1] + 1e-12);
    EXPECT_NEAR(rep.weight_sum[t], 1.0, 1e-9);
  }
  EXPECT_LT(rep.training_error.back(), 0.1);
  int wrong = 0;
  for (int r = 0; r < 400; ++r) wrong += e.predict(X.row(r)) != y[r];
  EXPECT_NEAR(wrong / 400.0, rep.training_error.back(), 1e-12);
}

TEST(AdaBoost, SingleClassIsRejected) {
  FeatureMatrix X(5, 2);
  EXPECT_THROW(train_adaboost(X, std::vector<int>(5, 1), 3), Error);
  EXPECT_THROW(train_adaboost(X, std::vector<int>{1, -1, 2, 1, 1}, 3), Error);
}

TEST(AdaBoost, DetectsObjectVoisOnUnseenPhantom) {
  std::vector<Phantom> train;
  for (std::uint64_t s : {101, 102, 103}) {
    PhantomSpec spec;
    spec.seed = s;
    train.push_back(make_phantom(spec));
  }
  std::vector<std::pair<const Volume3*, std::vector<VOIBox>>> ex;
  for (const auto& ph : train) ex.push_back({&ph.volume, {truth_voi(ph, 0), truth_voi(ph, 1)}});
  VoiDetectorOptions opt;
  opt.rounds = 30;
  const AdaBoostModel m = train_voi(ex, opt);
  PhantomSpec spec;
  spec.seed = 104;
  const Phantom test = make_phantom(spec);
  const auto found = detect_voi(test.volume, m);
  ASSERT_EQ(found.size(), 2u);
  for (int o = 0; o < 2; ++o) {
    const Box3 t = truth_voi(test, o).box;
    const Box3 in = t.intersect(found[o].box);
    const double iou = in.empty() ? 0 : in.volume() / (t.volume() + found[o].box.volume() - in.volume());
    EXPECT_GT(iou, 0.6) << "object " << o;
  }
  TempDir dir;
  save_model(m, dir.path / "voi.lgmd");
  EXPECT_EQ(load_voi_model(dir.path / "voi.lgmd"), m);
}

TEST(AdaBoost, FlatVolumeFailsDetection) {
  PhantomSpec spec;
  const Phantom ph = make_phantom(spec);
  std::vector<std::pair<const Volume3*, std::vector<VOIBox>>> ex{{&ph.volume, {truth_voi(ph, 0), truth_voi(ph, 1)}},
                                                                  {&ph.volume, {truth_voi(ph, 0), truth_voi(ph, 1)}}};
  VoiDetectorOptions opt;
  opt.rounds = 10;
  const AdaBoostModel m = train_voi(ex, opt);
  Volume3 flat(ph.volume.geometry(), ElementType::Float32, 0.0f);
  try {
    detect_voi(flat, m);
    FAIL() << "expected detection failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DetectionFailed);
  }
}

// --- NAF -------------------------------------------------------------------

TEST(Naf, LabelDistanceIsAMetric) {
  Rng rng = make_rng(3);
  auto random_bits = [&] {
    LabelBits b(729);
    for (int i = 0; i < 729; ++i) b.set(i, uniform01(rng) < 0.3);
    return b;
  };
  for (int t = 0; t < 50; ++t) {
    const LabelBits a = random_bits(), b = random_bits(), c = random_bits();
    int direct = 0;
    for (int i = 0; i < 729; ++i) direct += a.get(i) != b.get(i);
    EXPECT_EQ(naf_distance(a, b), direct);
    EXPECT_EQ(naf_distance(a, b), naf_distance(b, a));
    EXPECT_EQ(naf_distance(a, a), 0);
    EXPECT_LE(naf_distance(a, c), naf_distance(a, b) + naf_distance(b, c));
  }
  EXPECT_THROW(naf_distance(LabelBits(10), LabelBits(11)), Error);
}

TEST(Naf, ProbabilityMapSeparatesCartilage) {
  PipelineConfig cfg;
  cfg.naf.trees = 6;
  cfg.naf.patches_per_tree = 1500;
  cfg.naf_patches_per_volume = 1000;
  std::vector<Case> cases;
  for (std::uint64_t s : {201, 202, 203}) {
    PhantomSpec spec;
    spec.seed = s;
    cases.push_back(case_from_phantom(case_name(s), make_phantom(spec)));
  }
  const NAFModel m = train_naf_on({&cases[0], &cases[1]}, cfg, 9);
  EXPECT_EQ(static_cast<int>(m.trees.size()), 6);
  const Case& c = cases[2];
  const std::array<VOIBox, 2> voi{case_voi(c, 0, 0.05), case_voi(c, 1, 0.05)};
  const Box3 roi = voi_union(voi, 3.0);
  const Volume3 image = normalize_intensity(c.volume, voi_union(voi));
  const Volume3 p = naf_probability_map(m, image, roi);
  double in = 0, out = 0;
  int nin = 0, nout = 0;
  const auto& g = p.geometry();
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const float v = p(i, j, k);
        ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
        if (!roi.contains(g.world(i, j, k))) {
          ASSERT_EQ(v, 0.0f);
          continue;
        }
        if (is_cartilage_label(c.labels(i, j, k))) {
          in += v;
          ++nin;
        } else {
          out += v;
          ++nout;
        }
      }
  // Cartilage is a thin shell, so boundary voxels pull its mean down; require a clear gap.
  EXPECT_GT(in / nin, 0.45);
  EXPECT_LT(out / nout, 0.2);
  EXPECT_GT(in / nin, 3.0 * out / nout) << "cartilage " << in / nin << " other " << out / nout;
  TempDir dir;
  save_model(m, dir.path / "naf.lgmd");
  EXPECT_EQ(load_naf_model(dir.path / "naf.lgmd"), m);
  EXPECT_THROW(naf_probability_map(NAFModel{}, image, roi), Error);
}

// --- random forest ---------------------------------------------------------

namespace {

ClusterData linear_cluster(Rng& rng, int object, int cluster, int n, int informative) {
  ClusterData d;
  d.object = object;
  d.cluster = cluster;
  std::vector<float> row(kFeatureCount);
  for (int r = 0; r < n; ++r) {
    for (auto& x : row) x = static_cast<float>(standard_normal(rng));
    d.add(row.data(), row[informative] > 0.2f);
  }
  return d;
}

}  // namespace

TEST(RandomForest, LearnsAnInformativeFeature) {
  Rng rng = make_rng(44);
  std::vector<ClusterData> data{linear_cluster(rng, 0, 0, 600, 3), linear_cluster(rng, 1, 0, 600, 20)};
  RFOptions opt;
  opt.trees = 30;
  const ClusteredRFModel m = train_clustered_rf(data, opt, 5, 1);
  EXPECT_GT(m.forest(0, 0).oob_accuracy, 0.9);
  EXPECT_GT(m.forest(1, 0).oob_accuracy, 0.9);
  std::vector<float> x(kFeatureCount, 0.0f);
  x[3] = 2.0f;
  EXPECT_GT(m.forest(0, 0).probability(x.data()), 0.8);
  x[3] = -2.0f;
  EXPECT_LT(m.forest(0, 0).probability(x.data()), 0.2);
  EXPECT_THROW(m.forest(0, 7), Error);

  // Masking the informative feature leaves the forest at chance.
  RFOptions masked = opt;
  for (int f = 0; f < kFeatureCount; ++f)
    if (f != 3) masked.features.push_back(f);
  const Forest blind = train_forest(data[0].X, data[0].y, masked, 5);
  EXPECT_LT(blind.oob_accuracy, 0.8);
}

TEST(RandomForest, DeterministicAcrossThreadCounts) {
  Rng rng = make_rng(45);
  std::vector<ClusterData> data{linear_cluster(rng, 0, 0, 200, 1), linear_cluster(rng, 0, 1, 200, 2),
                                linear_cluster(rng, 1, 0, 200, 3)};
  RFOptions opt;
  opt.trees = 10;
  EXPECT_EQ(train_clustered_rf(data, opt, 9, 1), train_clustered_rf(data, opt, 9, 3));
}

TEST(RandomForest, ModelRoundTrip) {
  Rng rng = make_rng(46);
  RFOptions opt;
  opt.trees = 5;
  opt.features = rf_only_features();
  const ClusteredRFModel m = train_clustered_rf({linear_cluster(rng, 0, 2, 100, 0)}, opt, 1);
  TempDir dir;
  save_model(m, dir.path / "rf.lgmd");
  EXPECT_EQ(load_rf_model(dir.path / "rf.lgmd"), m);
  { std::ofstream(dir.path / "junk.lgmd") << "junk"; }
  EXPECT_THROW(load_rf_model(dir.path / "junk.lgmd"), Error);
  EXPECT_THROW(load_naf_model(dir.path / "rf.lgmd"), Error);
}

TEST(RandomForest, SingleClassClusterIsRejected) {
  ClusterData d;
  std::vector<float> row(kFeatureCount, 0.0f);
  for (int r = 0; r < 10; ++r) d.add(row.data(), true);
  try {
    train_clustered_rf({d}, RFOptions{}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    EXPECT_NE(std::string(e.what()).find("cluster 0"), std::string::npos);
  }
}

TEST(RandomForest, RfOnlyMaskDropsNafFeatures) {
  const auto f = rf_only_features();
  EXPECT_EQ(f.size(), static_cast<std::size_t>(kFeatureCount - 5));
  for (int one_based : kNafFeatureIndices) EXPECT_EQ(std::count(f.begin(), f.end(), one_based - 1), 0);
}
