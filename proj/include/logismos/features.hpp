#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "logismos/costs.hpp"
#include "logismos/error.hpp"
#include "logismos/graph.hpp"
#include "logismos/volume.hpp"

namespace logismos {

/// Number of per-node features (1-based indices in the names below).
inline constexpr int kFeatureCount = 30;

/// 1-based indices of the features derived from the NAF probability map.
inline constexpr std::array<int, 5> kNafFeatureIndices = {13, 14, 15, 18, 29};

struct FeatureOptions {
  std::array<double, 3> hessian_sigmas{0.5, 1.0, 2.0};
  std::array<double, 3> gradient_sigmas{0.36, 0.7, 1.4};
  std::array<double, 2> laplacian_sigmas{0.36, 0.7};
  double smooth_sigma = 0.7;
  double gabor_frequency = 0.5;  ///< cycles/mm along x
  double gabor_sigma = 1.0;
  double moment_box_mm = 2.0;
  double haar_mm = 1.5;
};

/// Dense double-precision scratch grid sharing a volume's geometry.
struct Grid {
  VolumeGeometry geom;
  std::vector<double> v;

  explicit Grid(const VolumeGeometry& g, double fill = 0.0) : geom(g), v(g.voxel_count(), fill) {}
  explicit Grid(const Volume3& vol) : geom(vol.geometry()), v(vol.data().begin(), vol.data().end()) {}

  int nx() const { return geom.dims[0]; }
  int ny() const { return geom.dims[1]; }
  int nz() const { return geom.dims[2]; }
  std::size_t idx(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(geom.dims[0]) *
                                             (static_cast<std::size_t>(j) + static_cast<std::size_t>(geom.dims[1]) * k);
  }
  double operator()(int i, int j, int k) const { return v[idx(i, j, k)]; }
  double& operator()(int i, int j, int k) { return v[idx(i, j, k)]; }
  double clamped(int i, int j, int k) const {
    return v[idx(std::clamp(i, 0, nx() - 1), std::clamp(j, 0, ny() - 1), std::clamp(k, 0, nz() - 1))];
  }
  Volume3 to_volume() const {
    std::vector<float> out(v.size());
    for (std::size_t n = 0; n < v.size(); ++n) out[n] = static_cast<float>(v[n]);
    return Volume3(geom, ElementType::Float32, std::move(out));
  }
};

/// Normalised sampled Gaussian with sigma in voxels, radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma_vox) {
  if (sigma_vox <= 0) return {1.0};
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int t = -r; t <= r; ++t) sum += k[t + r] = std::exp(-0.5 * t * t / (sigma_vox * sigma_vox));
  for (auto& x : k) x /= sum;
  return k;
}

/// 1D convolution along `axis` with clamped (replicated) edges.
inline Grid convolve_axis(const Grid& in, std::span<const double> kernel, int axis) {
  Grid out(in.geom);
  const int r = static_cast<int>(kernel.size()) / 2;
  const int n[3] = {in.nx(), in.ny(), in.nz()};
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        int p[3] = {i, j, k};
        const int c = p[axis];
        double acc = 0;
        for (int t = -r; t <= r; ++t) {
          p[axis] = std::clamp(c + t, 0, n[axis] - 1);
          acc += kernel[t + r] * in(p[0], p[1], p[2]);
        }
        out(i, j, k) = acc;
      }
  return out;
}

/// Separable Gaussian smoothing with sigma in mm (per-axis conversion to voxels).
inline Grid gaussian_smooth(const Grid& in, double sigma_mm) {
  Grid g = in;
  for (int a = 0; a < 3; ++a) {
    const auto k = gaussian_kernel(sigma_mm / in.geom.spacing[a]);
    if (k.size() > 1) g = convolve_axis(g, k, a);
  }
  return g;
}

/// Central first difference along `axis` in units per mm (one-sided at edges).
inline double first_difference(const Grid& g, int i, int j, int k, int axis) {
  int lo[3] = {i, j, k}, hi[3] = {i, j, k};
  const int n = g.geom.dims[axis];
  lo[axis] = std::max(0, lo[axis] - 1);
  hi[axis] = std::min(n - 1, hi[axis] + 1);
  const int steps = hi[axis] - lo[axis];
  if (steps == 0) return 0.0;
  return (g(hi[0], hi[1], hi[2]) - g(lo[0], lo[1], lo[2])) / (steps * g.geom.spacing[axis]);
}

/// Second derivative d2/(da db) by central differences on clamped indices.
inline double second_difference(const Grid& g, int i, int j, int k, int a, int b) {
  const double ha = g.geom.spacing[a], hb = g.geom.spacing[b];
  auto at = [&](int da, int db) {
    int p[3] = {i, j, k};
    p[a] += da;
    p[b] += db;
    return g.clamped(p[0], p[1], p[2]);
  };
  if (a == b) return (at(1, 0) - 2 * at(0, 0) + at(-1, 0)) / (ha * ha);
  return (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * ha * hb);
}

/// Eigenvalues of a symmetric 3x3 matrix by cyclic Jacobi rotations, descending.
inline std::array<double, 3> symmetric_eigenvalues(std::array<std::array<double, 3>, 3> a) {
  for (int sweep = 0; sweep < 50; ++sweep) {
    const double off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    const double scale = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2] + off;
    if (off <= 1e-30 * std::max(scale, 1e-300) || off == 0.0) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (int r = 0; r < 3; ++r) {
          const double arp = a[r][p], arq = a[r][q];
          a[r][p] = c * arp - s * arq;
          a[r][q] = s * arp + c * arq;
        }
        for (int r = 0; r < 3; ++r) {
          const double apr = a[p][r], aqr = a[q][r];
          a[p][r] = c * apr - s * aqr;
          a[q][r] = s * apr + c * aqr;
        }
      }
  }
  std::array<double, 3> ev{a[0][0], a[1][1], a[2][2]};
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

/// Gradient magnitude of the Gaussian-smoothed grid.
inline Grid gaussian_gradient_magnitude(const Grid& in, double sigma_mm) {
  const Grid s = gaussian_smooth(in, sigma_mm);
  Grid out(in.geom);
  for (int k = 0; k < s.nz(); ++k)
    for (int j = 0; j < s.ny(); ++j)
      for (int i = 0; i < s.nx(); ++i) {
        const double gx = first_difference(s, i, j, k, 0), gy = first_difference(s, i, j, k, 1),
                     gz = first_difference(s, i, j, k, 2);
        out(i, j, k) = std::sqrt(gx * gx + gy * gy + gz * gz);
      }
  return out;
}

/// Hessian eigenvalues (descending) of the Gaussian-smoothed grid.
inline std::array<Grid, 3> hessian_eigenvalues(const Grid& in, double sigma_mm) {
  const Grid s = gaussian_smooth(in, sigma_mm);
  std::array<Grid, 3> out{Grid(in.geom), Grid(in.geom), Grid(in.geom)};
  for (int k = 0; k < s.nz(); ++k)
    for (int j = 0; j < s.ny(); ++j)
      for (int i = 0; i < s.nx(); ++i) {
        std::array<std::array<double, 3>, 3> h{};
        for (int a = 0; a < 3; ++a)
          for (int b = a; b < 3; ++b) h[a][b] = h[b][a] = second_difference(s, i, j, k, a, b);
        const auto ev = symmetric_eigenvalues(h);
        for (int e = 0; e < 3; ++e) out[e](i, j, k) = ev[e];
      }
  return out;
}

inline Grid laplacian(const Grid& in, double sigma_mm) {
  const Grid s = gaussian_smooth(in, sigma_mm);
  Grid out(in.geom);
  for (int k = 0; k < s.nz(); ++k)
    for (int j = 0; j < s.ny(); ++j)
      for (int i = 0; i < s.nx(); ++i)
        out(i, j, k) = second_difference(s, i, j, k, 0, 0) + second_difference(s, i, j, k, 1, 1) +
                       second_difference(s, i, j, k, 2, 2);
  return out;
}

/// Even-symmetric Gabor response: zero-mean cos(2 pi f x) * Gaussian along x,
/// Gaussian along y and z.
inline Grid gabor_even(const Grid& in, double frequency, double sigma_mm) {
  const double hx = in.geom.spacing[0];
  const double sx = sigma_mm / hx;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sx)));
  std::vector<double> k(2 * r + 1);
  double env_sum = 0, mod_sum = 0;
  for (int t = -r; t <= r; ++t) {
    const double env = std::exp(-0.5 * t * t / (sx * sx));
    env_sum += env;
    mod_sum += k[t + r] = env * std::cos(2 * kPi * frequency * t * hx);
  }
  // remove the DC component so flat regions respond with zero
  for (int t = -r; t <= r; ++t) k[t + r] = (k[t + r] - mod_sum * std::exp(-0.5 * t * t / (sx * sx)) / env_sum) / env_sum;
  Grid g = convolve_axis(in, k, 0);
  for (int a = 1; a < 3; ++a) {
    const auto gk = gaussian_kernel(sigma_mm / in.geom.spacing[a]);
    if (gk.size() > 1) g = convolve_axis(g, gk, a);
  }
  return g;
}

/// Half-width in voxels of a box of side `mm` along each axis (at least 1).
inline std::array<int, 3> box_half_widths(const Vec3& spacing, double mm) {
  std::array<int, 3> h{};
  for (int a = 0; a < 3; ++a) h[a] = std::max(1, static_cast<int>(std::lround(0.5 * mm / spacing[a])));
  return h;
}

/// Population mean, variance, skewness and excess kurtosis over a clamped box.
/// Skewness and kurtosis are 0 where the variance is 0.
inline std::array<Grid, 4> local_moments(const Grid& in, double box_mm) {
  const auto h = box_half_widths(in.geom.spacing, box_mm);
  std::array<Grid, 4> out{Grid(in.geom), Grid(in.geom), Grid(in.geom), Grid(in.geom)};
  std::vector<double> vals;
  for (int k = 0; k < in.nz(); ++k)
    for (int j = 0; j < in.ny(); ++j)
      for (int i = 0; i < in.nx(); ++i) {
        vals.clear();
        for (int c = std::max(0, k - h[2]); c <= std::min(in.nz() - 1, k + h[2]); ++c)
          for (int b = std::max(0, j - h[1]); b <= std::min(in.ny() - 1, j + h[1]); ++b)
            for (int a = std::max(0, i - h[0]); a <= std::min(in.nx() - 1, i + h[0]); ++a) vals.push_back(in(a, b, c));
        const double n = static_cast<double>(vals.size());
        double mean = 0;
        for (double x : vals) mean += x;
        mean /= n;
        double m2 = 0, m3 = 0, m4 = 0;
        for (double x : vals) {
          const double d = x - mean, d2 = d * d;
          m2 += d2;
          m3 += d2 * d;
          m4 += d2 * d2;
        }
        m2 /= n;
        m3 /= n;
        m4 /= n;
        out[0](i, j, k) = mean;
        out[1](i, j, k) = m2;
        out[2](i, j, k) = m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
        out[3](i, j, k) = m2 > 0 ? m4 / (m2 * m2) - 3.0 : 0.0;
      }
  return out;
}

/// Summed-volume table with a zero guard plane, for O(1) box sums.
class IntegralVolume {
 public:
  explicit IntegralVolume(const Grid& g) : nx_(g.nx() + 1), ny_(g.ny() + 1), nz_(g.nz() + 1) {
    s_.assign(static_cast<std::size_t>(nx_) * ny_ * nz_, 0.0);
    for (int k = 1; k < nz_; ++k)
      for (int j = 1; j < ny_; ++j)
        for (int i = 1; i < nx_; ++i)
          at(i, j, k) = g(i - 1, j - 1, k - 1) + at(i - 1, j, k) + at(i, j - 1, k) + at(i, j, k - 1) -
                        at(i - 1, j - 1, k) - at(i - 1, j, k - 1) - at(i, j - 1, k - 1) + at(i - 1, j - 1, k - 1);
  }
  explicit IntegralVolume(const Volume3& v) : IntegralVolume(Grid(v)) {}

  /// Sum over voxels [lo, hi] inclusive, clipped to the grid. Empty boxes sum to 0.
  double sum(std::array<int, 3> lo, std::array<int, 3> hi) const {
    const int n[3] = {nx_ - 1, ny_ - 1, nz_ - 1};
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(lo[a], 0);
      hi[a] = std::min(hi[a], n[a] - 1);
      if (hi[a] < lo[a]) return 0.0;
    }
    const int x0 = lo[0], y0 = lo[1], z0 = lo[2], x1 = hi[0] + 1, y1 = hi[1] + 1, z1 = hi[2] + 1;
    return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0) +
           at(x1, y0, z0) - at(x0, y0, z0);
  }
  /// Number of grid voxels inside the clipped box.
  long long count(std::array<int, 3> lo, std::array<int, 3> hi) const {
    const int n[3] = {nx_ - 1, ny_ - 1, nz_ - 1};
    long long c = 1;
    for (int a = 0; a < 3; ++a) {
      const int l = std::max(lo[a], 0), h = std::min(hi[a], n[a] - 1);
      if (h < l) return 0;
      c *= h - l + 1;
    }
    return c;
  }
  double mean(std::array<int, 3> lo, std::array<int, 3> hi) const {
    const long long c = count(lo, hi);
    return c > 0 ? sum(lo, hi) / static_cast<double>(c) : 0.0;
  }

 private:
  double at(int i, int j, int k) const { return s_[static_cast<std::size_t>(i) + nx_ * (j + static_cast<std::size_t>(ny_) * k)]; }
  double& at(int i, int j, int k) { return s_[static_cast<std::size_t>(i) + nx_ * (j + static_cast<std::size_t>(ny_) * k)]; }
  int nx_, ny_, nz_;
  std::vector<double> s_;
};

/// Two-box Haar differences (mean of the + side minus mean of the - side) of
/// extent `mm` along x, along y, and along the xy diagonal.
inline std::array<Grid, 3> haar_features(const Grid& in, double mm) {
  const IntegralVolume iv(in);
  const auto h = box_half_widths(in.geom.spacing, mm);
  std::array<Grid, 3> out{Grid(in.geom), Grid(in.geom), Grid(in.geom)};
  const int tz = 1;
  for (int k = 0; k < in.nz(); ++k)
    for (int j = 0; j < in.ny(); ++j)
      for (int i = 0; i < in.nx(); ++i) {
        out[0](i, j, k) = iv.mean({i + 1, j - 1, k - tz}, {i + h[0], j + 1, k + tz}) -
                          iv.mean({i - h[0], j - 1, k - tz}, {i - 1, j + 1, k + tz});
        out[1](i, j, k) = iv.mean({i - 1, j + 1, k - tz}, {i + 1, j + h[1], k + tz}) -
                          iv.mean({i - 1, j - h[1], k - tz}, {i + 1, j - 1, k + tz});
        out[2](i, j, k) = iv.mean({i + 1, j + 1, k - tz}, {i + h[0], j + h[1], k + tz}) -
                          iv.mean({i - h[0], j - h[1], k - tz}, {i - 1, j - 1, k + tz});
      }
  return out;
}

/// The 28 volumetric features (1-based indices 1..28), index 0 = feature 1.
inline std::vector<Volume3> compute_feature_volumes(const Volume3& image, const Volume3& naf,
                                                    const FeatureOptions& opt = {}) {
  require(image.geometry() == naf.geometry(), ErrorCode::InvalidArgument,
          "probability map must share the image geometry");
  const Grid I(image), P(naf);
  std::vector<Volume3> f;
  f.reserve(28);
  for (double s : opt.hessian_sigmas)
    for (auto& e : hessian_eigenvalues(I, s)) f.push_back(e.to_volume());          // 1-9
  for (double s : opt.gradient_sigmas) f.push_back(gaussian_gradient_magnitude(I, s).to_volume());  // 10-12
  for (double s : opt.gradient_sigmas) f.push_back(gaussian_gradient_magnitude(P, s).to_volume());  // 13-15
  f.push_back(image);                                                            // 16
  f.push_back(gaussian_smooth(I, opt.smooth_sigma).to_volume());                 // 17
  f.push_back(naf);                                                              // 18
  for (double s : opt.laplacian_sigmas) f.push_back(laplacian(I, s).to_volume());  // 19-20
  f.push_back(gabor_even(I, opt.gabor_frequency, opt.gabor_sigma).to_volume());  // 21
  for (auto& m : local_moments(I, opt.moment_box_mm)) f.push_back(m.to_volume());  // 22-25
  for (auto& hf : haar_features(I, opt.haar_mm)) f.push_back(hf.to_volume());     // 26-28
  return f;
}

/// Row-major feature matrix.
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  FeatureMatrix() = default;
  FeatureMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0f) {}
  const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
  float* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

/// Per-node features of one object's columns: (column * size + node) * 30 + f.
struct NodeFeatures {
  int object = 0;
  int columns = 0;
  int size = 0;
  std::vector<float> data;

  const float* row(int i, int j) const { return data.data() + (static_cast<std::size_t>(i) * size + j) * kFeatureCount; }
  float at(int i, int j, int f) const { return row(i, j)[f]; }
};

/// Samples the feature volumes at every node of every column of `object`;
/// features 29 and 30 are along-column central differences (per mm) of the
/// probability map and the image.
inline NodeFeatures extract_features(const std::vector<Volume3>& volumes, const Volume3& image, const Volume3& naf,
                                     const ColumnGraph& g, int object) {
  require(volumes.size() == 28, ErrorCode::InvalidArgument, "expected 28 feature volumes");
  const auto& cols = g.objects.at(object).columns;
  NodeFeatures nf;
  nf.object = object;
  nf.columns = static_cast<int>(cols.size());
  nf.size = g.column_size();
  nf.data.resize(static_cast<std::size_t>(nf.columns) * nf.size * kFeatureCount);
  for (int i = 0; i < nf.columns; ++i) {
    const auto& c = cols[i];
    const auto dp = column_derivative(sample_column(naf, c), c.spacing);
    const auto di = column_derivative(sample_column(image, c), c.spacing);
    for (int j = 0; j < nf.size; ++j) {
      float* r = nf.data.data() + (static_cast<std::size_t>(i) * nf.size + j) * kFeatureCount;
      for (int f = 0; f < 28; ++f) r[f] = static_cast<float>(trilinear_sample(volumes[f], c.nodes[j]));
      r[28] = static_cast<float>(dp[j]);
      r[29] = static_cast<float>(di[j]);
    }
  }
  return nf;
}

inline NodeFeatures extract_features(const Volume3& image, const Volume3& naf, const ColumnGraph& g, int object,
                                     const FeatureOptions& opt = {}) {
  return extract_features(compute_feature_volumes(image, naf, opt), image, naf, g, object);
}

}  // namespace logismos
