#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "logismos/adaboost.hpp"
#include "logismos/error.hpp"
#include "logismos/features.hpp"
#include "logismos/random.hpp"
#include "logismos/serialize.hpp"

namespace logismos {

struct RFNode {
  int feature = -1;  ///< -1 marks a leaf
  float threshold = 0.0f;
  int left = -1;
  int right = -1;
  std::uint32_t negatives = 0;  ///< training histogram at leaves
  std::uint32_t positives = 0;

  bool leaf() const { return feature < 0; }
  double positive_fraction() const {
    const double n = static_cast<double>(negatives) + positives;
    return n > 0 ? positives / n : 0.0;
  }
  bool operator==(const RFNode&) const = default;
};

struct RFTree {
  std::vector<RFNode> nodes;

  const RFNode& leaf_for(const float* x) const {
    int n = 0;
    while (!nodes[n].leaf()) n = x[nodes[n].feature] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
    return nodes[n];
  }
  /// Majority vote of the reached leaf (ties go negative).
  bool vote(const float* x) const {
    const auto& l = leaf_for(x);
    return l.positives > l.negatives;
  }
  bool operator==(const RFTree&) const = default;
};

struct RFOptions {
  int trees = 50;
  int mtry = 5;
  int max_depth = 20;
  int min_leaf = 2;
  std::vector<int> features;  ///< usable 0-based columns; empty = all
};

struct Forest {
  std::vector<RFTree> trees;
  double oob_accuracy = 0.0;

  /// Fraction of trees voting positive.
  double probability(const float* x) const {
    int v = 0;
    for (const auto& t : trees) v += t.vote(x);
    return trees.empty() ? 0.0 : static_cast<double>(v) / trees.size();
  }
  bool operator==(const Forest&) const = default;
};

namespace detail {

inline double gini(double pos, double n) {
  if (n <= 0) return 0.0;
  const double p = pos / n;
  return 2 * p * (1 - p);
}

struct RFBuilder {
  const FeatureMatrix& X;
  const std::vector<std::uint8_t>& y;
  const RFOptions& opt;
  const std::vector<int>& usable;
  Rng& rng;
  RFTree tree;
  std::vector<std::pair<float, std::uint8_t>> buf;

  int grow(std::vector<int>& idx, std::size_t lo, std::size_t hi, int depth) {
    const int node = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    std::uint32_t pos = 0;
    for (std::size_t k = lo; k < hi; ++k) pos += y[idx[k]];
    const std::uint32_t n = static_cast<std::uint32_t>(hi - lo);
    auto make_leaf = [&]() {
      tree.nodes[node].positives = pos;
      tree.nodes[node].negatives = n - pos;
      return node;
    };
    if (depth >= opt.max_depth || pos == 0 || pos == n || n < 2u * opt.min_leaf) return make_leaf();

    // mtry distinct features by partial Fisher-Yates
    std::vector<int> feats = usable;
    const int m = std::min<int>(opt.mtry, static_cast<int>(feats.size()));
    for (int k = 0; k < m; ++k) std::swap(feats[k], feats[k + uniform_index(rng, feats.size() - k)]);

    const double parent = gini(pos, n);
    double best_gain = 1e-12;
    int best_f = -1;
    float best_thr = 0;
    for (int k = 0; k < m; ++k) {
      const int f = feats[k];
      buf.clear();
      for (std::size_t q = lo; q < hi; ++q) buf.push_back({X.at(idx[q], f), y[idx[q]]});
      std::sort(buf.begin(), buf.end());
      double lp = 0;
      for (std::size_t q = 1; q < buf.size(); ++q) {
        lp += buf[q - 1].second;
        if (buf[q].first == buf[q - 1].first) continue;
        if (q < static_cast<std::size_t>(opt.min_leaf) || buf.size() - q < static_cast<std::size_t>(opt.min_leaf)) continue;
        const double nl = static_cast<double>(q), nr = static_cast<double>(buf.size() - q);
        const double gain = parent - (nl * gini(lp, nl) + nr * gini(pos - lp, nr)) / n;
        if (gain > best_gain) {
          best_gain = gain;
          best_f = f;
          const float a = buf[q - 1].first, b = buf[q].first;
          float t = a + (b - a) * 0.5f;
          if (!(t >= a && t < b)) t = a;
          best_thr = t;
        }
      }
    }
    if (best_f < 0) return make_leaf();
    const auto mid = std::partition(idx.begin() + lo, idx.begin() + hi,
                                    [&](int s) { return X.at(s, best_f) <= best_thr; }) - idx.begin();
    tree.nodes[node].feature = best_f;
    tree.nodes[node].threshold = best_thr;
    const int l = grow(idx, lo, static_cast<std::size_t>(mid), depth + 1);
    tree.nodes[node].left = l;
    const int r = grow(idx, static_cast<std::size_t>(mid), hi, depth + 1);
    tree.nodes[node].right = r;
    return node;
  }
};

}  // namespace detail

/// Bootstrap-aggregated Gini trees with out-of-bag accuracy.
inline Forest train_forest(const FeatureMatrix& X, const std::vector<std::uint8_t>& y, const RFOptions& opt,
                           std::uint64_t seed) {
  require(X.rows > 0 && static_cast<int>(y.size()) == X.rows, ErrorCode::InvalidArgument, "label count must match rows");
  require(opt.trees >= 1 && opt.mtry >= 1 && opt.min_leaf >= 1, ErrorCode::InvalidArgument, "bad forest options");
  std::vector<int> usable = opt.features;
  if (usable.empty()) {
    usable.resize(X.cols);
    std::iota(usable.begin(), usable.end(), 0);
  }
  for (int f : usable) require(f >= 0 && f < X.cols, ErrorCode::InvalidArgument, "feature index out of range");
  Forest forest;
  std::vector<int> oob_votes(X.rows, 0), oob_count(X.rows, 0);
  std::vector<char> in_bag(X.rows);
  for (int t = 0; t < opt.trees; ++t) {
    Rng rng = make_rng(seed, 0x52460000ull + t);
    std::vector<int> idx(X.rows);
    std::fill(in_bag.begin(), in_bag.end(), 0);
    for (auto& i : idx) {
      i = static_cast<int>(uniform_index(rng, X.rows));
      in_bag[i] = 1;
    }
    detail::RFBuilder b{X, y, opt, usable, rng, {}, {}};
    b.grow(idx, 0, idx.size(), 0);
    for (int r = 0; r < X.rows; ++r)
      if (!in_bag[r]) {
        oob_votes[r] += b.tree.vote(X.row(r));
        ++oob_count[r];
      }
    forest.trees.push_back(std::move(b.tree));
  }
  int judged = 0, correct = 0;
  for (int r = 0; r < X.rows; ++r) {
    if (oob_count[r] == 0) continue;
    ++judged;
    const bool pred = 2 * oob_votes[r] > oob_count[r];
    correct += pred == (y[r] != 0);
  }
  forest.oob_accuracy = judged > 0 ? static_cast<double>(correct) / judged : 0.0;
  return forest;
}

/// Training nodes of one (object, cluster) forest.
struct ClusterData {
  int object = 0;
  int cluster = 0;
  FeatureMatrix X{0, kFeatureCount};
  std::vector<std::uint8_t> y;

  void add(const float* row, bool positive) {
    X.data.insert(X.data.end(), row, row + X.cols);
    ++X.rows;
    y.push_back(positive ? 1 : 0);
  }
};

/// One forest per (object, cluster).
struct ClusteredRFModel {
  RFOptions options;
  std::map<std::pair<int, int>, Forest> forests;
  bool operator==(const ClusteredRFModel& o) const {
    return options.trees == o.options.trees && options.mtry == o.options.mtry &&
           options.max_depth == o.options.max_depth && options.min_leaf == o.options.min_leaf &&
           options.features == o.options.features && forests == o.forests;
  }

  const Forest& forest(int object, int cluster) const {
    const auto it = forests.find({object, cluster});
    if (it == forests.end())
      fail(ErrorCode::NotFound,
           "no forest for object " + std::to_string(object) + " cluster " + std::to_string(cluster));
    return it->second;
  }
};

/// Trains every cluster forest; forests are independent and run concurrently
/// with seeds derived from (seed, object, cluster), so results do not depend
/// on scheduling.
inline ClusteredRFModel train_clustered_rf(const std::vector<ClusterData>& data, const RFOptions& opt,
                                           std::uint64_t seed, unsigned threads = 0) {
  require(!data.empty(), ErrorCode::InvalidArgument, "no cluster training data");
  std::string bad;
  for (const auto& d : data) {
    int pos = 0;
    for (auto v : d.y) pos += v;
    if (pos == 0 || pos == static_cast<int>(d.y.size()))
      bad += " (object " + std::to_string(d.object) + ", cluster " + std::to_string(d.cluster) + ")";
  }
  if (!bad.empty()) fail(ErrorCode::InvalidArgument, "single-class cluster training sets:" + bad);

  ClusteredRFModel model;
  model.options = opt;
  std::vector<Forest> out(data.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  std::size_t next = 0;
  while (next < data.size()) {
    std::vector<std::future<void>> jobs;
    for (unsigned t = 0; t < threads && next < data.size(); ++t, ++next) {
      const std::size_t k = next;
      jobs.push_back(std::async(std::launch::async, [&, k]() {
        const auto& d = data[k];
        out[k] = train_forest(d.X, d.y, opt, mix_seed(seed, (static_cast<std::uint64_t>(d.object) << 32) | d.cluster));
      }));
    }
    for (auto& j : jobs) j.get();
  }
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto key = std::make_pair(data[k].object, data[k].cluster);
    require(!model.forests.count(key), ErrorCode::InvalidArgument, "duplicate (object, cluster) training set");
    model.forests[key] = std::move(out[k]);
  }
  return model;
}

/// Per-node probability (columns x size) for one object's features.
inline std::vector<double> rf_node_probabilities(const ClusteredRFModel& model, const NodeFeatures& nf,
                                                 const std::vector<int>& column_cluster) {
  require(static_cast<int>(column_cluster.size()) == nf.columns, ErrorCode::InvalidArgument,
          "need one cluster id per column");
  std::vector<double> p(static_cast<std::size_t>(nf.columns) * nf.size);
  for (int i = 0; i < nf.columns; ++i) {
    const Forest& f = model.forest(nf.object, column_cluster[i]);
    for (int j = 0; j < nf.size; ++j) p[static_cast<std::size_t>(i) * nf.size + j] = f.probability(nf.row(i, j));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Serialisation

inline void write_forest(BinaryWriter& w, const Forest& f) {
  w.put(f.oob_accuracy);
  w.put(static_cast<std::uint32_t>(f.trees.size()));
  for (const auto& t : f.trees) {
    w.put(static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& n : t.nodes) {
      w.put(static_cast<std::int32_t>(n.feature));
      w.put(n.threshold);
      w.put(static_cast<std::int32_t>(n.left));
      w.put(static_cast<std::int32_t>(n.right));
      w.put(n.negatives);
      w.put(n.positives);
    }
  }
}

inline Forest read_forest(BinaryReader& r) {
  Forest f;
  f.oob_accuracy = r.get<double>();
  f.trees.resize(r.get<std::uint32_t>());
  for (auto& t : f.trees) {
    t.nodes.resize(r.get<std::uint32_t>());
    for (auto& n : t.nodes) {
      n.feature = r.get<std::int32_t>();
      n.threshold = r.get<float>();
      n.left = r.get<std::int32_t>();
      n.right = r.get<std::int32_t>();
      n.negatives = r.get<std::uint32_t>();
      n.positives = r.get<std::uint32_t>();
    }
  }
  return f;
}

inline void save_model(const ClusteredRFModel& m, const std::filesystem::path& path) {
  BinaryWriter w;
  w.put_magic("LGMD", 1);
  w.put_string("clustered-rf");
  w.put(static_cast<std::int32_t>(m.options.trees));
  w.put(static_cast<std::int32_t>(m.options.mtry));
  w.put(static_cast<std::int32_t>(m.options.max_depth));
  w.put(static_cast<std::int32_t>(m.options.min_leaf));
  w.put_vector(m.options.features);
  w.put(static_cast<std::uint32_t>(m.forests.size()));
  for (const auto& [key, f] : m.forests) {
    w.put(static_cast<std::int32_t>(key.first));
    w.put(static_cast<std::int32_t>(key.second));
    write_forest(w, f);
  }
  w.save(path);
}

inline ClusteredRFModel load_rf_model(const std::filesystem::path& path) {
  auto r = BinaryReader::load(path);
  require(r.expect_magic("LGMD") == 1, ErrorCode::InvalidArgument, "unsupported model version");
  require(r.get_string() == "clustered-rf", ErrorCode::InvalidArgument, path.string() + " is not a clustered RF model");
  ClusteredRFModel m;
  m.options.trees = r.get<std::int32_t>();
  m.options.mtry = r.get<std::int32_t>();
  m.options.max_depth = r.get<std::int32_t>();
  m.options.min_leaf = r.get<std::int32_t>();
  m.options.features = r.get_vector<int>();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < n; ++k) {
    const int o = r.get<std::int32_t>();
    const int c = r.get<std::int32_t>();
    m.forests[{o, c}] = read_forest(r);
  }
  return m;
}

}  // namespace logismos
