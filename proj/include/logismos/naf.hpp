#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/mesh.hpp"
#include "logismos/random.hpp"
#include "logismos/serialize.hpp"
#include "logismos/volume.hpp"

namespace logismos {

/// Cubic patch of side 2*radius+1 voxels, x-fastest.
struct PatchShape {
  int radius = 4;
  int side() const { return 2 * radius + 1; }
  int size() const { return side() * side() * side(); }
  int index(int dx, int dy, int dz) const {
    return (dx + radius) + side() * ((dy + radius) + side() * (dz + radius));
  }
  bool operator==(const PatchShape&) const = default;
};

/// Binary label patch packed into 64-bit words.
struct LabelBits {
  std::vector<std::uint64_t> words;
  int bits = 0;

  LabelBits() = default;
  explicit LabelBits(int n) : words((n + 63) / 64, 0), bits(n) {}
  bool get(int i) const { return (words[i >> 6] >> (i & 63)) & 1u; }
  void set(int i, bool v) {
    if (v)
      words[i >> 6] |= std::uint64_t{1} << (i & 63);
    else
      words[i >> 6] &= ~(std::uint64_t{1} << (i & 63));
  }
  int count() const {
    int c = 0;
    for (auto w : words) c += std::popcount(w);
    return c;
  }
  bool operator==(const LabelBits&) const = default;
};

struct PatchSample {
  std::array<int, 3> center{};
  std::vector<float> intensity;
  LabelBits labels;
};

/// Number of positions where two label patches differ.
inline int naf_distance(const LabelBits& a, const LabelBits& b) {
  require(a.bits == b.bits, ErrorCode::InvalidArgument, "label patches differ in size");
  int d = 0;
  for (std::size_t k = 0; k < a.words.size(); ++k) d += std::popcount(a.words[k] ^ b.words[k]);
  return d;
}
inline int naf_distance(const PatchSample& a, const PatchSample& b) { return naf_distance(a.labels, b.labels); }

/// Intensity patch around voxel c with clamped borders.
inline std::vector<float> extract_patch(const Volume3& v, std::array<int, 3> c, const PatchShape& ps) {
  std::vector<float> p(ps.size());
  int n = 0;
  for (int dz = -ps.radius; dz <= ps.radius; ++dz)
    for (int dy = -ps.radius; dy <= ps.radius; ++dy)
      for (int dx = -ps.radius; dx <= ps.radius; ++dx) p[n++] = v.clamped(c[0] + dx, c[1] + dy, c[2] + dz);
  return p;
}

inline LabelBits extract_label_patch(const Volume3& labels, std::array<int, 3> c, const PatchShape& ps,
                                     bool (*positive)(float)) {
  LabelBits b(ps.size());
  int n = 0;
  for (int dz = -ps.radius; dz <= ps.radius; ++dz)
    for (int dy = -ps.radius; dy <= ps.radius; ++dy)
      for (int dx = -ps.radius; dx <= ps.radius; ++dx, ++n) {
        const int x = c[0] + dx, y = c[1] + dy, z = c[2] + dz;
        b.set(n, labels.in_bounds(x, y, z) && positive(labels(x, y, z)));
      }
  return b;
}

enum class PatchTestKind : std::uint8_t { BoxMeanDifference = 0, PointDifference = 1, CenterIntensity = 2 };

/// Appearance test on an intensity patch; goes left when value < threshold.
struct PatchTest {
  PatchTestKind kind = PatchTestKind::CenterIntensity;
  std::array<std::int8_t, 3> a{};  ///< first box centre / point offset
  std::array<std::int8_t, 3> b{};  ///< second box centre / point offset
  std::int8_t ra = 0, rb = 0;      ///< box half-widths
  float threshold = 0.0f;

  double value(const std::vector<float>& p, const PatchShape& ps) const {
    switch (kind) {
      case PatchTestKind::CenterIntensity: return p[ps.index(0, 0, 0)];
      case PatchTestKind::PointDifference: return p[ps.index(a[0], a[1], a[2])] - p[ps.index(b[0], b[1], b[2])];
      case PatchTestKind::BoxMeanDifference: return box_mean(p, ps, a, ra) - box_mean(p, ps, b, rb);
    }
    return 0.0;
  }
  bool operator==(const PatchTest&) const = default;

 private:
  static double box_mean(const std::vector<float>& p, const PatchShape& ps, const std::array<std::int8_t, 3>& c, int r) {
    double s = 0;
    int n = 0;
    for (int z = c[2] - r; z <= c[2] + r; ++z)
      for (int y = c[1] - r; y <= c[1] + r; ++y)
        for (int x = c[0] - r; x <= c[0] + r; ++x) {
          s += p[ps.index(x, y, z)];
          ++n;
        }
    return s / n;
  }
};

struct NafNode {
  PatchTest test;
  int left = -1;
  int right = -1;
  int leaf = -1;  ///< index into leaves when terminal
  bool operator==(const NafNode&) const = default;
};

struct NafLeaf {
  std::vector<float> mean_labels;  ///< per-voxel fraction of positive labels
  std::vector<int> members;        ///< training sample indices that reached this leaf
  bool operator==(const NafLeaf&) const = default;
};

struct NafTree {
  std::vector<NafNode> nodes;
  std::vector<NafLeaf> leaves;
  int depth = 0;

  int route(const std::vector<float>& patch, const PatchShape& ps) const {
    int n = 0;
    while (nodes[n].leaf < 0) n = nodes[n].test.value(patch, ps) < nodes[n].test.threshold ? nodes[n].left : nodes[n].right;
    return nodes[n].leaf;
  }
  bool operator==(const NafTree&) const = default;
};

struct NafOptions {
  int trees = 20;
  int patches_per_tree = 2000;
  int candidates = 100;
  int max_depth = 12;
  int min_samples = 8;
  int max_pairs = 64;
  int patch_radius = 4;
  int negative_band = 5;  ///< voxels of dilation around positives where negatives are drawn
};

struct NAFModel {
  PatchShape shape;
  std::vector<NafTree> trees;
  bool operator==(const NAFModel&) const = default;

  /// Training sample indices sharing a leaf with `patch`, over all trees (with repeats).
  std::vector<int> neighbors(const std::vector<float>& patch) const {
    std::vector<int> out;
    for (const auto& t : trees) {
      const auto& m = t.leaves[t.route(patch, shape)].members;
      out.insert(out.end(), m.begin(), m.end());
    }
    return out;
  }
};

namespace detail {

inline PatchTest random_patch_test(Rng& rng, const PatchShape& ps) {
  PatchTest t;
  const int kind = static_cast<int>(uniform_index(rng, 3));
  t.kind = static_cast<PatchTestKind>(kind);
  auto offset = [&](int margin) {
    std::array<std::int8_t, 3> o{};
    for (auto& x : o)
      x = static_cast<std::int8_t>(static_cast<int>(uniform_index(rng, 2 * (ps.radius - margin) + 1)) - (ps.radius - margin));
    return o;
  };
  if (t.kind == PatchTestKind::PointDifference) {
    t.a = offset(0);
    t.b = offset(0);
  } else if (t.kind == PatchTestKind::BoxMeanDifference) {
    t.ra = static_cast<std::int8_t>(uniform_index(rng, 2));
    t.rb = static_cast<std::int8_t>(uniform_index(rng, 2));
    t.a = offset(t.ra);
    t.b = offset(t.rb);
  }
  return t;
}

/// Mean pairwise rho over at most max_pairs random pairs inside `idx`.
inline double mean_pairwise(const std::vector<PatchSample>& s, const std::vector<int>& idx, int max_pairs, Rng& rng) {
  const std::size_t n = idx.size();
  if (n < 2) return 0.0;
  const std::size_t all = n * (n - 1) / 2;
  double sum = 0;
  int count = 0;
  if (all <= static_cast<std::size_t>(max_pairs)) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j, ++count) sum += naf_distance(s[idx[i]], s[idx[j]]);
  } else {
    for (; count < max_pairs; ++count) {
      const auto i = uniform_index(rng, n);
      auto j = uniform_index(rng, n - 1);
      if (j >= i) ++j;
      sum += naf_distance(s[idx[i]], s[idx[j]]);
    }
  }
  return sum / count;
}

inline double mean_cross(const std::vector<PatchSample>& s, const std::vector<int>& a, const std::vector<int>& b,
                         int max_pairs, Rng& rng) {
  if (a.empty() || b.empty()) return 0.0;
  const std::size_t all = a.size() * b.size();
  double sum = 0;
  int count = 0;
  if (all <= static_cast<std::size_t>(max_pairs)) {
    for (int i : a)
      for (int j : b) {
        sum += naf_distance(s[i], s[j]);
        ++count;
      }
  } else {
    for (; count < max_pairs; ++count)
      sum += naf_distance(s[a[uniform_index(rng, a.size())]], s[b[uniform_index(rng, b.size())]]);
  }
  return sum / count;
}

inline bool same_labels(const std::vector<PatchSample>& s, const std::vector<int>& idx) {
  for (std::size_t k = 1; k < idx.size(); ++k)
    if (!(s[idx[k]].labels == s[idx[0]].labels)) return false;
  return true;
}

inline int grow_naf(NafTree& tree, const std::vector<PatchSample>& s, std::vector<int> idx, int depth,
                    const NafOptions& opt, const PatchShape& ps, Rng& rng) {
  const int node = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  tree.depth = std::max(tree.depth, depth);
  auto make_leaf = [&]() {
    NafLeaf leaf;
    leaf.mean_labels.assign(ps.size(), 0.0f);
    std::vector<double> acc(ps.size(), 0.0);
    for (int i : idx)
      for (int v = 0; v < ps.size(); ++v) acc[v] += s[i].labels.get(v);
    for (int v = 0; v < ps.size(); ++v) leaf.mean_labels[v] = static_cast<float>(acc[v] / idx.size());
    leaf.members = idx;
    std::sort(leaf.members.begin(), leaf.members.end());
    tree.nodes[node].leaf = static_cast<int>(tree.leaves.size());
    tree.leaves.push_back(std::move(leaf));
    return node;
  };
  if (depth >= opt.max_depth || static_cast<int>(idx.size()) < opt.min_samples || same_labels(s, idx)) return make_leaf();

  double best_score = -1;
  PatchTest best;
  std::vector<int> best_l, best_r, l, r;
  std::vector<double> vals(idx.size());
  for (int c = 0; c < opt.candidates; ++c) {
    PatchTest t = random_patch_test(rng, ps);
    for (std::size_t k = 0; k < idx.size(); ++k) vals[k] = t.value(s[idx[k]].intensity, ps);
    t.threshold = static_cast<float>(vals[uniform_index(rng, idx.size())]);
    l.clear();
    r.clear();
    for (std::size_t k = 0; k < idx.size(); ++k) (vals[k] < t.threshold ? l : r).push_back(idx[k]);
    if (l.empty() || r.empty()) continue;
    const double within = (l.size() * mean_pairwise(s, l, opt.max_pairs, rng) + r.size() * mean_pairwise(s, r, opt.max_pairs, rng)) /
                          static_cast<double>(idx.size());
    const double between = mean_cross(s, l, r, opt.max_pairs, rng);
    const double score = between / (within + 1e-9);
    if (score > best_score) {
      best_score = score;
      best = t;
      best_l = l;
      best_r = r;
    }
  }
  if (best_score < 0) return make_leaf();
  tree.nodes[node].test = best;
  const int left = grow_naf(tree, s, std::move(best_l), depth + 1, opt, ps, rng);
  tree.nodes[node].left = left;
  const int right = grow_naf(tree, s, std::move(best_r), depth + 1, opt, ps, rng);
  tree.nodes[node].right = right;
  return node;
}

}  // namespace detail

/// Grows each tree on a seeded bootstrap of patches_per_tree samples.
inline NAFModel train_naf(const std::vector<PatchSample>& samples, const NafOptions& opt, std::uint64_t seed) {
  require(!samples.empty(), ErrorCode::InvalidArgument, "NAF training needs samples");
  require(opt.trees >= 1 && opt.patches_per_tree >= 1, ErrorCode::InvalidArgument, "bad NAF forest size");
  NAFModel m;
  m.shape.radius = opt.patch_radius;
  for (const auto& s : samples)
    require(static_cast<int>(s.intensity.size()) == m.shape.size() && s.labels.bits == m.shape.size(),
            ErrorCode::InvalidArgument, "patch size does not match the configured radius");
  for (int t = 0; t < opt.trees; ++t) {
    Rng rng = make_rng(seed, 0x4e41460000ull + t);
    std::vector<int> idx(opt.patches_per_tree);
    for (auto& i : idx) i = static_cast<int>(uniform_index(rng, samples.size()));
    NafTree tree;
    detail::grow_naf(tree, samples, std::move(idx), 0, opt, m.shape, rng);
    m.trees.push_back(std::move(tree));
  }
  return m;
}

/// Positive patches at labelled voxels and as many negatives drawn from the
/// dilation band around them.
inline std::vector<PatchSample> sample_patches(const Volume3& image, const Volume3& labels, bool (*positive)(float),
                                               int count, const NafOptions& opt, Rng& rng) {
  require(image.geometry() == labels.geometry(), ErrorCode::InvalidArgument, "label volume geometry mismatch");
  const auto& g = image.geometry();
  const PatchShape ps{opt.patch_radius};
  std::vector<std::array<int, 3>> pos, band;
  // distance-limited dilation by repeated 6-neighbour growth
  std::vector<int> dist(g.voxel_count(), -1);
  std::vector<std::size_t> frontier;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        if (positive(labels(i, j, k))) {
          pos.push_back({i, j, k});
          dist[image.index(i, j, k)] = 0;
          frontier.push_back(image.index(i, j, k));
        }
  require(!pos.empty(), ErrorCode::InvalidArgument, "label volume has no positive voxels");
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  for (int d = 1; d <= opt.negative_band; ++d) {
    std::vector<std::size_t> next;
    for (std::size_t f : frontier) {
      const int i = static_cast<int>(f % nx), j = static_cast<int>((f / nx) % ny), k = static_cast<int>(f / (static_cast<std::size_t>(nx) * ny));
      const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx || q[1] >= ny || q[2] >= nz) continue;
        const std::size_t id = image.index(q[0], q[1], q[2]);
        if (dist[id] >= 0) continue;
        dist[id] = d;
        next.push_back(id);
        band.push_back({q[0], q[1], q[2]});
      }
    }
    frontier = std::move(next);
  }
  std::sort(band.begin(), band.end(), [](const auto& a, const auto& b) {
    return std::tie(a[2], a[1], a[0]) < std::tie(b[2], b[1], b[0]);
  });
  std::vector<PatchSample> out;
  const int half = count / 2;
  for (int n = 0; n < count; ++n) {
    const bool is_pos = n < half || band.empty();
    const auto& c = is_pos ? pos[uniform_index(rng, pos.size())] : band[uniform_index(rng, band.size())];
    out.push_back({c, extract_patch(image, c, ps), extract_label_patch(labels, c, ps, positive)});
  }
  return out;
}

/// Stride-1 probability map over the voxel range covered by `roi`; zero outside.
inline Volume3 naf_probability_map(const NAFModel& m, const Volume3& v, const Box3& roi) {
  const auto& g = v.geometry();
  require(!m.trees.empty(), ErrorCode::FailedPrecondition, "NAF model has no trees");
  const Box3 vb = g.bounds();
  const Box3 clip = roi.intersect(vb);
  if (clip.empty()) fail(ErrorCode::OutOfRange, "NAF region of interest lies outside the volume");
  const Vec3 lo = g.to_index(clip.lo), hi = g.to_index(clip.hi);
  std::array<int, 3> a{}, b{};
  for (int k = 0; k < 3; ++k) {
    a[k] = std::clamp(static_cast<int>(std::ceil(lo[k] - 1e-9)), 0, g.dims[k] - 1);
    b[k] = std::clamp(static_cast<int>(std::floor(hi[k] + 1e-9)), 0, g.dims[k] - 1);
  }
  const PatchShape& ps = m.shape;
  const int R = ps.radius;
  std::vector<double> acc(g.voxel_count(), 0.0);
  std::vector<std::uint16_t> cnt(g.voxel_count(), 0);
  std::vector<double> avg(ps.size());
  const double inv_t = 1.0 / m.trees.size();
  for (int k = a[2]; k <= b[2]; ++k)
    for (int j = a[1]; j <= b[1]; ++j)
      for (int i = a[0]; i <= b[0]; ++i) {
        const auto patch = extract_patch(v, {i, j, k}, ps);
        std::fill(avg.begin(), avg.end(), 0.0);
        for (const auto& t : m.trees) {
          const auto& ml = t.leaves[t.route(patch, ps)].mean_labels;
          for (int q = 0; q < ps.size(); ++q) avg[q] += ml[q];
        }
        int q = 0;
        for (int dz = -R; dz <= R; ++dz)
          for (int dy = -R; dy <= R; ++dy)
            for (int dx = -R; dx <= R; ++dx, ++q) {
              const int x = i + dx, y = j + dy, z = k + dz;
              if (x < a[0] || y < a[1] || z < a[2] || x > b[0] || y > b[1] || z > b[2]) continue;
              const std::size_t id = v.index(x, y, z);
              acc[id] += avg[q] * inv_t;
              ++cnt[id];
            }
      }
  std::vector<float> out(g.voxel_count(), 0.0f);
  for (std::size_t id = 0; id < out.size(); ++id)
    if (cnt[id] > 0) out[id] = static_cast<float>(std::clamp(acc[id] / cnt[id], 0.0, 1.0));
  return Volume3(g, ElementType::Float32, std::move(out));
}

// ---------------------------------------------------------------------------
// Serialisation

inline void write_naf(BinaryWriter& w, const NAFModel& m) {
  w.put(static_cast<std::int32_t>(m.shape.radius));
  w.put(static_cast<std::uint32_t>(m.trees.size()));
  for (const auto& t : m.trees) {
    w.put(static_cast<std::int32_t>(t.depth));
    w.put(static_cast<std::uint32_t>(t.nodes.size()));
    for (const auto& n : t.nodes) {
      w.put(static_cast<std::uint8_t>(n.test.kind));
      for (auto x : n.test.a) w.put(x);
      for (auto x : n.test.b) w.put(x);
      w.put(n.test.ra);
      w.put(n.test.rb);
      w.put(n.test.threshold);
      w.put(static_cast<std::int32_t>(n.left));
      w.put(static_cast<std::int32_t>(n.right));
      w.put(static_cast<std::int32_t>(n.leaf));
    }
    w.put(static_cast<std::uint32_t>(t.leaves.size()));
    for (const auto& l : t.leaves) {
      w.put_vector(l.mean_labels);
      w.put_vector(l.members);
    }
  }
}

inline NAFModel read_naf(BinaryReader& r) {
  NAFModel m;
  m.shape.radius = r.get<std::int32_t>();
  m.trees.resize(r.get<std::uint32_t>());
  for (auto& t : m.trees) {
    t.depth = r.get<std::int32_t>();
    t.nodes.resize(r.get<std::uint32_t>());
    for (auto& n : t.nodes) {
      n.test.kind = static_cast<PatchTestKind>(r.get<std::uint8_t>());
      for (auto& x : n.test.a) x = r.get<std::int8_t>();
      for (auto& x : n.test.b) x = r.get<std::int8_t>();
      n.test.ra = r.get<std::int8_t>();
      n.test.rb = r.get<std::int8_t>();
      n.test.threshold = r.get<float>();
      n.left = r.get<std::int32_t>();
      n.right = r.get<std::int32_t>();
      n.leaf = r.get<std::int32_t>();
    }
    t.leaves.resize(r.get<std::uint32_t>());
    for (auto& l : t.leaves) {
      l.mean_labels = r.get_vector<float>();
      l.members = r.get_vector<int>();
    }
  }
  return m;
}

inline void save_model(const NAFModel& m, const std::filesystem::path& path) {
  BinaryWriter w;
  w.put_magic("LGMD", 1);
  w.put_string("naf");
  write_naf(w, m);
  w.save(path);
}

inline NAFModel load_naf_model(const std::filesystem::path& path) {
  auto r = BinaryReader::load(path);
  require(r.expect_magic("LGMD") == 1, ErrorCode::InvalidArgument, "unsupported model version");
  require(r.get_string() == "naf", ErrorCode::InvalidArgument, path.string() + " is not a NAF model");
  return read_naf(r);
}

}  // namespace logismos
