#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "logismos/error.hpp"
#include "logismos/features.hpp"
#include "logismos/mesh.hpp"
#include "logismos/serialize.hpp"
#include "logismos/volume.hpp"

namespace logismos {

/// Threshold classifier on one feature: predicts +1 when polarity*(x - threshold) > 0.
struct Stump {
  int feature = 0;
  double threshold = 0.0;
  int polarity = 1;
  double alpha = 0.0;

  int predict(double x) const { return polarity * (x - threshold) > 0 ? 1 : -1; }
  bool operator==(const Stump&) const = default;
};

struct AdaBoostReport {
  std::vector<double> training_error;  ///< of the strong classifier after each round
  std::vector<double> loss_bound;      ///< product of normalisers Z_t, non-increasing
  std::vector<double> weight_sum;      ///< sum of sample weights after renormalisation
};

/// Discrete AdaBoost ensemble over decision stumps.
struct StumpEnsemble {
  std::vector<Stump> stumps;

  double score(const float* x) const {
    double s = 0;
    for (const auto& st : stumps) s += st.alpha * st.predict(x[st.feature]);
    return s;
  }
  int predict(const float* x) const { return score(x) > 0 ? 1 : -1; }
  bool operator==(const StumpEnsemble&) const = default;
};

/// Trains T rounds of discrete AdaBoost with exhaustive stump search. Labels are +1/-1.
inline StumpEnsemble train_adaboost(const FeatureMatrix& X, const std::vector<int>& y, int rounds,
                                    AdaBoostReport* report = nullptr) {
  const int n = X.rows;
  require(n > 0 && static_cast<int>(y.size()) == n, ErrorCode::InvalidArgument, "label count must match rows");
  require(rounds >= 1, ErrorCode::InvalidArgument, "AdaBoost needs at least one round");
  int pos = 0;
  for (int v : y) {
    require(v == 1 || v == -1, ErrorCode::InvalidArgument, "AdaBoost labels must be +1 or -1");
    pos += v == 1;
  }
  if (pos == 0 || pos == n) fail(ErrorCode::InvalidArgument, "degenerate labels: all examples have one class");

  // Per-feature sort order, computed once.
  std::vector<std::vector<int>> order(X.cols);
  for (int f = 0; f < X.cols; ++f) {
    order[f].resize(n);
    std::iota(order[f].begin(), order[f].end(), 0);
    std::stable_sort(order[f].begin(), order[f].end(), [&](int a, int b) { return X.at(a, f) < X.at(b, f); });
  }

  std::vector<double> w(n, 1.0 / n);
  std::vector<double> score(n, 0.0);
  StumpEnsemble model;
  double bound = 1.0;
  for (int t = 0; t < rounds; ++t) {
    // err(threshold between sorted k-1 and k, polarity +1) = weight of positives at or below + negatives above.
    double wpos_total = 0, wneg_total = 0;
    for (int i = 0; i < n; ++i) (y[i] > 0 ? wpos_total : wneg_total) += w[i];
    Stump best;
    double best_err = 2.0;
    for (int f = 0; f < X.cols; ++f) {
      const auto& o = order[f];
      double pos_below = 0, neg_below = 0;
      for (int k = 0; k <= n; ++k) {
        // thresholds never fall between equal values
        const bool splittable = k == 0 || k == n || X.at(o[k], f) != X.at(o[k - 1], f);
        if (splittable) {
          const double err_plus = pos_below + (wneg_total - neg_below);
          const double err_minus = neg_below + (wpos_total - pos_below);
          double thr;
          if (k == 0)
            thr = X.at(o[0], f) - 1.0;
          else if (k == n)
            thr = X.at(o[n - 1], f) + 1.0;
          else
            thr = 0.5 * (static_cast<double>(X.at(o[k - 1], f)) + X.at(o[k], f));
          if (err_plus < best_err - 1e-15) {
            best_err = err_plus;
            best = {f, thr, 1, 0.0};
          }
          if (err_minus < best_err - 1e-15) {
            best_err = err_minus;
            best = {f, thr, -1, 0.0};
          }
        }
        if (k < n) (y[o[k]] > 0 ? pos_below : neg_below) += w[o[k]];
      }
    }
    const double e = std::clamp(best_err, 1e-12, 1.0 - 1e-12);
    best.alpha = 0.5 * std::log((1 - e) / e);
    // Z_t = 2 sqrt(e (1 - e)) <= 1 for e <= 1/2, so the loss bound never grows.
    double z = 0;
    for (int i = 0; i < n; ++i) {
      w[i] *= std::exp(-best.alpha * y[i] * best.predict(X.at(i, best.feature)));
      z += w[i];
    }
    for (auto& x : w) x /= z;
    bound *= z;
    model.stumps.push_back(best);
    int wrong = 0;
    for (int i = 0; i < n; ++i) {
      score[i] += best.alpha * best.predict(X.at(i, best.feature));
      wrong += (score[i] > 0 ? 1 : -1) != y[i];
    }
    if (report) {
      report->training_error.push_back(static_cast<double>(wrong) / n);
      report->loss_bound.push_back(bound);
      report->weight_sum.push_back(std::accumulate(w.begin(), w.end(), 0.0));
    }
    if (best_err <= 1e-12) break;  // a perfect stump: further rounds add nothing
  }
  return model;
}

// ---------------------------------------------------------------------------
// Haar-like VOI detection

inline constexpr int kHaarTypes = 9;

/// Nine 3D Haar-like responses of a box centred at `c` with half-widths `h`
/// (voxels): single box; 2-box splits along x, y, z; checkerboards in xy, yz,
/// xz; 3-box centre-surround along x; 3D centre-surround.
inline std::array<double, kHaarTypes> haar9(const IntegralVolume& iv, std::array<int, 3> c, std::array<int, 3> h) {
  using B = std::array<int, 3>;
  auto m = [&](B lo, B hi) { return iv.mean(lo, hi); };
  const B lo{c[0] - h[0], c[1] - h[1], c[2] - h[2]}, hi{c[0] + h[0], c[1] + h[1], c[2] + h[2]};
  std::array<double, kHaarTypes> r{};
  r[0] = m(lo, hi);
  for (int a = 0; a < 3; ++a) {
    B l2 = lo, h1 = hi;
    h1[a] = c[a] - 1;
    l2[a] = c[a];
    r[1 + a] = m(l2, hi) - m(lo, h1);
  }
  const std::array<std::pair<int, int>, 3> planes{{{0, 1}, {1, 2}, {0, 2}}};
  for (int p = 0; p < 3; ++p) {
    const auto [a, b] = planes[p];
    double s = 0;
    for (int qa = 0; qa < 2; ++qa)
      for (int qb = 0; qb < 2; ++qb) {
        B l = lo, u = hi;
        if (qa) l[a] = c[a]; else u[a] = c[a] - 1;
        if (qb) l[b] = c[b]; else u[b] = c[b] - 1;
        s += (qa == qb ? 1.0 : -1.0) * m(l, u);
      }
    r[4 + p] = s;
  }
  {
    const int t = std::max(1, h[0] / 3);
    B cl = lo, cu = hi;
    cl[0] = c[0] - t;
    cu[0] = c[0] + t;
    B ll = lo, lu = hi, rl = lo, ru = hi;
    lu[0] = c[0] - t - 1;
    rl[0] = c[0] + t + 1;
    r[7] = m(cl, cu) - 0.5 * (m(ll, lu) + m(rl, ru));
  }
  {
    const B il{c[0] - h[0] / 2, c[1] - h[1] / 2, c[2] - h[2] / 2}, ih{c[0] + h[0] / 2, c[1] + h[1] / 2, c[2] + h[2] / 2};
    const double inner_sum = iv.sum(il, ih), outer_sum = iv.sum(lo, hi);
    const double inner_n = static_cast<double>(iv.count(il, ih)), outer_n = static_cast<double>(iv.count(lo, hi));
    const double shell = outer_n > inner_n ? (outer_sum - inner_sum) / (outer_n - inner_n) : 0.0;
    r[8] = (inner_n > 0 ? inner_sum / inner_n : 0.0) - shell;
  }
  return r;
}

struct VoiDetectorOptions {
  double cell_mm = 2.0;                       ///< sliding-window stride and cell size
  std::vector<double> scales_mm{2.0, 4.0, 8.0, 16.0};  ///< window half-widths
  int rounds = 50;
  double pad_fraction = 0.05;
};

/// One AdaBoost classifier per object; windows are labelled positive when
/// their centre lies inside the object's VOI.
struct AdaBoostModel {
  VoiDetectorOptions options;
  std::vector<StumpEnsemble> objects;
  bool operator==(const AdaBoostModel& o) const {
    return options.cell_mm == o.options.cell_mm && options.scales_mm == o.options.scales_mm &&
           options.rounds == o.options.rounds && options.pad_fraction == o.options.pad_fraction && objects == o.objects;
  }
};

/// Zero-mean unit-variance copy of the whole volume (detection is run before any VOI exists).
inline Grid standardize(const Volume3& v) {
  Grid g(v);
  double mean = 0;
  for (double x : g.v) mean += x;
  mean /= static_cast<double>(g.v.size());
  double var = 0;
  for (double x : g.v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(g.v.size()));
  for (auto& x : g.v) x = sd > 0 ? (x - mean) / sd : 0.0;
  return g;
}

struct WindowGrid {
  std::vector<std::array<int, 3>> centers;  ///< voxel indices
  std::array<int, 3> half{};                ///< cell half-width in voxels
  std::array<int, 3> count{};               ///< windows per axis; centres are x-fastest
};

inline WindowGrid window_grid(const VolumeGeometry& g, double cell_mm) {
  WindowGrid w;
  std::array<int, 3> step{};
  for (int a = 0; a < 3; ++a) {
    step[a] = std::max(1, static_cast<int>(std::lround(cell_mm / g.spacing[a])));
    w.half[a] = step[a] / 2;
    w.count[a] = (g.dims[a] - step[a] / 2 + step[a] - 1) / step[a];
  }
  for (int k = step[2] / 2; k < g.dims[2]; k += step[2])
    for (int j = step[1] / 2; j < g.dims[1]; j += step[1])
      for (int i = step[0] / 2; i < g.dims[0]; i += step[0]) w.centers.push_back({i, j, k});
  return w;
}

/// Haar responses at every scale followed by the window centre as a fraction
/// of the volume extent along x, y, z.
inline int window_feature_count(const VoiDetectorOptions& opt) {
  return kHaarTypes * static_cast<int>(opt.scales_mm.size()) + 3;
}

inline FeatureMatrix window_features(const Volume3& v, const WindowGrid& w, const VoiDetectorOptions& opt) {
  const Grid g = standardize(v);
  const IntegralVolume iv(g);
  const int haar = kHaarTypes * static_cast<int>(opt.scales_mm.size());
  FeatureMatrix X(static_cast<int>(w.centers.size()), window_feature_count(opt));
  const auto& dims = v.geometry().dims;
  for (int r = 0; r < X.rows; ++r) {
    for (int a = 0; a < 3; ++a)
      X.at(r, haar + a) = static_cast<float>((w.centers[r][a] + 0.5) / dims[a]);
    for (std::size_t s = 0; s < opt.scales_mm.size(); ++s) {
      std::array<int, 3> h{};
      for (int a = 0; a < 3; ++a)
        h[a] = std::max(1, static_cast<int>(std::lround(opt.scales_mm[s] / v.geometry().spacing[a])));
      const auto resp = haar9(iv, w.centers[r], h);
      for (int t = 0; t < kHaarTypes; ++t) X.at(r, static_cast<int>(s) * kHaarTypes + t) = static_cast<float>(resp[t]);
    }
  }
  return X;
}

/// Trains one detector per object from (volume, per-object VOI) examples.
inline AdaBoostModel train_voi(const std::vector<std::pair<const Volume3*, std::vector<VOIBox>>>& examples,
                               const VoiDetectorOptions& opt = {}, std::vector<AdaBoostReport>* reports = nullptr) {
  require(examples.size() >= 2, ErrorCode::InvalidArgument, "VOI training needs at least two examples");
  const std::size_t objects = examples.front().second.size();
  require(objects >= 1, ErrorCode::InvalidArgument, "VOI examples carry no boxes");
  AdaBoostModel model;
  model.options = opt;
  std::vector<FeatureMatrix> feats;
  std::vector<WindowGrid> grids;
  for (const auto& [v, boxes] : examples) {
    require(boxes.size() == objects, ErrorCode::InvalidArgument, "every example needs one VOI per object");
    grids.push_back(window_grid(v->geometry(), opt.cell_mm));
    feats.push_back(window_features(*v, grids.back(), opt));
  }
  const int nf = feats.front().cols;
  for (std::size_t o = 0; o < objects; ++o) {
    int rows = 0;
    for (const auto& f : feats) rows += f.rows;
    FeatureMatrix X(rows, nf);
    std::vector<int> y;
    y.reserve(rows);
    int r = 0;
    for (std::size_t e = 0; e < examples.size(); ++e) {
      const auto& geom = examples[e].first->geometry();
      for (int k = 0; k < feats[e].rows; ++k, ++r) {
        std::copy(feats[e].row(k), feats[e].row(k) + nf, X.row(r));
        const auto& c = grids[e].centers[k];
        y.push_back(examples[e].second[o].box.contains(geom.world(c[0], c[1], c[2])) ? 1 : -1);
      }
    }
    AdaBoostReport rep;
    model.objects.push_back(train_adaboost(X, y, opt.rounds, &rep));
    if (reports) reports->push_back(std::move(rep));
  }
  return model;
}

/// Labels 6-connected clusters of positive windows and returns the members of
/// the cluster with the largest total score, so isolated false positives do
/// not stretch the box.
inline std::vector<int> strongest_cluster(const WindowGrid& w, const std::vector<double>& score) {
  const int n = static_cast<int>(score.size());
  std::vector<int> label(n, -1), best, members, stack;
  double best_mass = 0;
  const std::array<int, 3> stride{1, w.count[0], w.count[0] * w.count[1]};
  for (int seed = 0; seed < n; ++seed) {
    if (score[seed] <= 0 || label[seed] >= 0) continue;
    members.clear();
    stack.assign(1, seed);
    label[seed] = seed;
    double mass = 0;
    while (!stack.empty()) {
      const int r = stack.back();
      stack.pop_back();
      members.push_back(r);
      mass += score[r];
      const std::array<int, 3> pos{r % w.count[0], (r / w.count[0]) % w.count[1], r / stride[2]};
      for (int a = 0; a < 3; ++a)
        for (int d : {-1, 1}) {
          const int q = pos[a] + d;
          if (q < 0 || q >= w.count[a]) continue;
          const int nb = r + d * stride[a];
          if (score[nb] > 0 && label[nb] < 0) {
            label[nb] = seed;
            stack.push_back(nb);
          }
        }
    }
    if (mass > best_mass) {
      best_mass = mass;
      best = members;
    }
  }
  return best;
}

/// Padded bounding box of the window centres in the strongest cluster of
/// positive windows (training labels mark centres, so their extent estimates
/// the box directly). Raises DetectionFailed when no window is positive for some object.
inline std::vector<VOIBox> detect_voi(const Volume3& v, const AdaBoostModel& model) {
  const auto& opt = model.options;
  const WindowGrid w = window_grid(v.geometry(), opt.cell_mm);
  const FeatureMatrix X = window_features(v, w, opt);
  require(X.cols == window_feature_count(opt), ErrorCode::InvalidArgument,
          "model feature layout does not match its options");
  const auto& g = v.geometry();
  std::vector<VOIBox> out;
  std::vector<double> score(X.rows);
  for (std::size_t o = 0; o < model.objects.size(); ++o) {
    for (int r = 0; r < X.rows; ++r) score[r] = model.objects[o].score(X.row(r));
    const std::vector<int> cluster = strongest_cluster(w, score);
    Box3 b;
    if (!cluster.empty()) {
      // Per axis, keep the span of window slabs holding at least a fifth of the
      // busiest slab's windows; thin fringes of false positives are dropped.
      std::array<int, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        std::vector<int> hist(w.count[a], 0);
        const int stride = a == 0 ? 1 : a == 1 ? w.count[0] : w.count[0] * w.count[1];
        for (int r : cluster) ++hist[(r / stride) % w.count[a]];
        const int cut = std::max(1, *std::max_element(hist.begin(), hist.end()) / 5);
        lo[a] = static_cast<int>(std::find_if(hist.begin(), hist.end(), [&](int h) { return h >= cut; }) - hist.begin());
        hi[a] = w.count[a] - 1 -
                static_cast<int>(std::find_if(hist.rbegin(), hist.rend(), [&](int h) { return h >= cut; }) - hist.rbegin());
      }
      const int first = lo[0] + lo[1] * w.count[0] + lo[2] * w.count[0] * w.count[1];
      const int last = hi[0] + hi[1] * w.count[0] + hi[2] * w.count[0] * w.count[1];
      b.expand(g.world(w.centers[first][0], w.centers[first][1], w.centers[first][2]));
      b.expand(g.world(w.centers[last][0], w.centers[last][1], w.centers[last][2]));
    }
    if (b.empty())
      fail(ErrorCode::DetectionFailed, "no positive window for object " + std::to_string(o));
    out.push_back({b.padded(opt.pad_fraction), static_cast<int>(o)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialisation

inline void write_stumps(BinaryWriter& w, const StumpEnsemble& e) {
  w.put(static_cast<std::uint32_t>(e.stumps.size()));
  for (const auto& s : e.stumps) {
    w.put(static_cast<std::int32_t>(s.feature));
    w.put(s.threshold);
    w.put(static_cast<std::int32_t>(s.polarity));
    w.put(s.alpha);
  }
}

inline StumpEnsemble read_stumps(BinaryReader& r) {
  StumpEnsemble e;
  e.stumps.resize(r.get<std::uint32_t>());
  for (auto& s : e.stumps) {
    s.feature = r.get<std::int32_t>();
    s.threshold = r.get<double>();
    s.polarity = r.get<std::int32_t>();
    s.alpha = r.get<double>();
  }
  return e;
}

inline void save_model(const AdaBoostModel& m, const std::filesystem::path& path) {
  BinaryWriter w;
  w.put_magic("LGMD", 1);
  w.put_string("voi-adaboost");
  w.put(m.options.cell_mm);
  w.put_vector(m.options.scales_mm);
  w.put(static_cast<std::int32_t>(m.options.rounds));
  w.put(m.options.pad_fraction);
  w.put(static_cast<std::uint32_t>(m.objects.size()));
  for (const auto& e : m.objects) write_stumps(w, e);
  w.save(path);
}

inline AdaBoostModel load_voi_model(const std::filesystem::path& path) {
  auto r = BinaryReader::load(path);
  require(r.expect_magic("LGMD") == 1, ErrorCode::InvalidArgument, "unsupported model version");
  require(r.get_string() == "voi-adaboost", ErrorCode::InvalidArgument, path.string() + " is not a VOI model");
  AdaBoostModel m;
  m.options.cell_mm = r.get<double>();
  m.options.scales_mm = r.get_vector<double>();
  m.options.rounds = r.get<std::int32_t>();
  m.options.pad_fraction = r.get<double>();
  m.objects.resize(r.get<std::uint32_t>());
  for (auto& e : m.objects) e = read_stumps(r);
  return m;
}

}  // namespace logismos
