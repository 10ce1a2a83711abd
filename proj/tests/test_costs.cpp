#include <gtest/gtest.h>

#include "logismos/costs.hpp"
#include "test_util.hpp"

using namespace logismos;

namespace {

/// One object, n straight columns along +x through a 1-D intensity profile.
struct Line {
  Volume3 volume;
  ColumnGraph graph;
};

Line line_graph(const std::function<double(double)>& f, int columns = 3, int surfaces = 2) {
  Volume3 v({64, 8, 8}, {0.25, 1, 1});
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 8; ++j)
      for (int i = 0; i < 64; ++i) v(i, j, k) = static_cast<float>(f(i * 0.25));
  GraphParams p;
  p.column_size = 31;
  p.node_spacing = 0.25;
  p.inter_surface_max = 20;
  ObjectColumns oc;
  oc.surfaces = surfaces;
  for (int c = 0; c < columns; ++c)
    oc.columns.push_back(straight_column(c, 0, {2.0, 2.0 + c, 3.0}, {1, 0, 0}, p.column_size, p.node_spacing));
  return {std::move(v), assemble_graph({oc}, p)};
}

}  // namespace

TEST(Costs, DerivativesMatchAnalyticPolynomials) {
  std::vector<double> f(20);
  for (int j = 0; j < 20; ++j) f[j] = 3.0 * j * j - 2.0 * j + 1;  // f' = 6j - 2, f'' = 6
  const auto d1 = column_derivative(f, 1.0), d2 = column_second_derivative(f, 1.0);
  for (int j = 1; j < 19; ++j) {
    EXPECT_NEAR(d1[j], 6.0 * j - 2, 1e-9);
    EXPECT_NEAR(d2[j], 6.0, 1e-9);
  }
  const auto h = column_derivative(f, 0.5);
  EXPECT_NEAR(h[5], (6.0 * 5 - 2) / 0.5, 1e-9);
}

TEST(Costs, UnlikelinessIsNormalisedPerColumn) {
  const std::vector<double> r{1, 5, 3, -3};
  const auto c = unlikeliness(r);
  EXPECT_DOUBLE_EQ(c[1], 0.0);
  EXPECT_DOUBLE_EQ(c[3], 1.0);
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  const auto flat = unlikeliness(std::vector<double>(5, 2.0));
  for (double x : flat) EXPECT_EQ(x, 0.0);
}

TEST(Costs, BoneCostMinimalAtRisingEdge) {
  // Dark-to-bright step at x = 5 mm; columns start at x = 2, node spacing 0.25.
  const Line l = line_graph([](double x) { return x < 5.0 ? 0.0 : 100.0; });
  const CostField cf = gradient_bone_cost(l.volume, l.graph);
  for (int i = 0; i < 3; ++i) {
    const auto col = cf.column(0, i);
    const int best = static_cast<int>(std::min_element(col.begin(), col.end()) - col.begin());
    EXPECT_NEAR(2.0 + 0.25 * best, 5.0, 0.26);
    for (double c : col) EXPECT_TRUE(c >= 0.0 && c <= 1.0);
  }
  // Opposite polarity prefers a falling edge instead, so the rising step scores worst there.
  const CostField inv = gradient_bone_cost(l.volume, l.graph, -1);
  EXPECT_NEAR(*std::max_element(inv.column(0, 0).begin(), inv.column(0, 0).end()), 1.0, 1e-12);
}

TEST(Costs, CartilageCostFindsFallingEdge) {
  // Bone 100, cartilage 60 from 4 to 7 mm, background 0 beyond.
  const Line l = line_graph([](double x) { return x < 4.0 ? 100.0 : x < 7.0 ? 60.0 : 0.0; });
  const CostField cf = gradient_costs(l.volume, l.graph);
  for (int i = 0; i < 3; ++i) {
    const auto bone = cf.column(0, i), cart = cf.column(1, i);
    const int jb = static_cast<int>(std::min_element(bone.begin(), bone.end()) - bone.begin());
    const int jc = static_cast<int>(std::min_element(cart.begin(), cart.end()) - cart.begin());
    EXPECT_NEAR(2.0 + 0.25 * jc, 7.0, 0.51);
    (void)jb;
  }
  EXPECT_THROW(gradient_cartilage_cost(l.volume, l.graph, 1.5), Error);
}

TEST(Costs, LearnedCostIsOneMinusProbability) {
  const auto c = learned_cost(std::vector<double>{0.0, 0.25, 1.0});
  EXPECT_EQ(c, (std::vector<double>{1.0, 0.75, 0.0}));
  EXPECT_THROW(learned_cost(std::vector<double>{0.5, 1.5}), Error);
  EXPECT_THROW(learned_cost(std::vector<double>{std::nan("")}), Error);

  const Line l = line_graph([](double) { return 0.0; });
  CostField base(l.graph, 0.3);
  std::vector<std::vector<double>> prob(2);
  prob[1].assign(base.values[1].size(), 0.9);
  const CostField cf = learned_cost(prob, l.graph, &base);
  EXPECT_EQ(cf.provenance, CostProvenance::Learned);
  EXPECT_DOUBLE_EQ(cf.at(0, 1, 4), 0.3);
  EXPECT_NEAR(cf.at(1, 1, 4), 0.1, 1e-12);
  prob[1].pop_back();
  EXPECT_THROW(learned_cost(prob, l.graph, &base), Error);
}

TEST(Costs, CacheRoundTripWithCosts) {
  TempDir dir;
  Rng rng = make_rng(2);
  const ColumnGraph g = logismos::testing::random_small_graph(rng);
  CostField cf = logismos::testing::random_costs(g, rng);
  cf.provenance = CostProvenance::JeiModified;
  save_graph_cache(g, cf, dir.path / "c.lgcg");
  const auto [g2, cf2] = load_graph_cache_with_costs(dir.path / "c.lgcg");
  ASSERT_TRUE(cf2.has_value());
  EXPECT_EQ(*cf2, cf);
  EXPECT_EQ(g2.constraints.size(), g.constraints.size());
  // Graph-only caches load without a cost block.
  save_graph_cache(g, dir.path / "g.lgcg");
  EXPECT_FALSE(load_graph_cache_with_costs(dir.path / "g.lgcg").second.has_value());
}
