#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "logismos/config.hpp"
#include "logismos/error.hpp"
#include "logismos/geometry.hpp"

namespace logismos {

static_assert(std::endian::native == std::endian::little, "raw volume I/O assumes a little-endian host");

enum class ElementType { UInt8, Int16, Float32 };

inline std::string_view met_name(ElementType t) {
  switch (t) {
    case ElementType::UInt8: return "MET_UCHAR";
    case ElementType::Int16: return "MET_SHORT";
    case ElementType::Float32: return "MET_FLOAT";
  }
  return "MET_FLOAT";
}

inline std::size_t element_bytes(ElementType t) {
  switch (t) {
    case ElementType::UInt8: return 1;
    case ElementType::Int16: return 2;
    case ElementType::Float32: return 4;
  }
  return 4;
}

using Dims3 = std::array<int, 3>;

/// Sampling grid of a volume: voxel (i,j,k) sits at origin + (i,j,k)*spacing.
struct VolumeGeometry {
  Dims3 dims{0, 0, 0};
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
  }
  Vec3 world(double i, double j, double k) const {
    return {origin.x + i * spacing.x, origin.y + j * spacing.y, origin.z + k * spacing.z};
  }
  /// Continuous voxel coordinates of a world point.
  Vec3 to_index(const Vec3& p) const {
    return {(p.x - origin.x) / spacing.x, (p.y - origin.y) / spacing.y, (p.z - origin.z) / spacing.z};
  }
  /// Box spanned by voxel centres.
  Box3 bounds() const { return {origin, world(dims[0] - 1, dims[1] - 1, dims[2] - 1)}; }
  double voxel_diagonal() const { return norm(spacing); }
  bool operator==(const VolumeGeometry&) const = default;
};

/// Dense 3-D scalar grid, x-fastest. Values are held as float; uint8 and int16
/// volumes only ever hold integral in-range values so conversion is exact.
class Volume3 {
 public:
  Volume3() = default;

  Volume3(const Dims3& dims, const Vec3& spacing, const Vec3& origin = {}, ElementType type = ElementType::Float32,
          float fill = 0.0f)
      : geometry_{dims, spacing, origin}, type_(type) {
    validate_geometry(geometry_);
    data_.assign(geometry_.voxel_count(), fill);
  }

  Volume3(const VolumeGeometry& g, ElementType type = ElementType::Float32, float fill = 0.0f)
      : Volume3(g.dims, g.spacing, g.origin, type, fill) {}

  Volume3(const VolumeGeometry& g, ElementType type, std::vector<float> data)
      : geometry_(g), type_(type), data_(std::move(data)) {
    validate_geometry(geometry_);
    require(data_.size() == geometry_.voxel_count(), ErrorCode::InvalidArgument,
            "volume data length does not match dims");
  }

  const VolumeGeometry& geometry() const { return geometry_; }
  const Dims3& dims() const { return geometry_.dims; }
  const Vec3& spacing() const { return geometry_.spacing; }
  const Vec3& origin() const { return geometry_.origin; }
  ElementType element_type() const { return type_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(geometry_.dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(geometry_.dims[1]) * static_cast<std::size_t>(k));
  }
  float operator()(int i, int j, int k) const { return data_[index(i, j, k)]; }
  float& operator()(int i, int j, int k) { return data_[index(i, j, k)]; }

  /// Clamp-to-edge voxel access.
  float clamped(int i, int j, int k) const {
    i = std::clamp(i, 0, geometry_.dims[0] - 1);
    j = std::clamp(j, 0, geometry_.dims[1] - 1);
    k = std::clamp(k, 0, geometry_.dims[2] - 1);
    return data_[index(i, j, k)];
  }

  bool in_bounds(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < geometry_.dims[0] && j < geometry_.dims[1] && k < geometry_.dims[2];
  }

  Vec3 world(int i, int j, int k) const { return geometry_.world(i, j, k); }

  static void validate_geometry(const VolumeGeometry& g) {
    for (int a = 0; a < 3; ++a) {
      require(g.dims[a] > 0, ErrorCode::InvalidArgument, "volume dims must be positive");
      require(g.spacing[a] > 0.0 && std::isfinite(g.spacing[a]), ErrorCode::InvalidArgument,
              "volume spacing must be strictly positive");
    }
  }

 private:
  VolumeGeometry geometry_;
  ElementType type_ = ElementType::Float32;
  std::vector<float> data_;
};

/// Trilinear interpolation at a world point; positions outside the grid clamp
/// to the nearest boundary voxel.
inline double trilinear_sample(const Volume3& v, const Vec3& p) {
  const auto& g = v.geometry();
  const Vec3 q = g.to_index(p);
  double c[3] = {q.x, q.y, q.z};
  int i0[3];
  int i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double hi = static_cast<double>(g.dims[a] - 1);
    double t = std::clamp(c[a], 0.0, hi);
    int base = static_cast<int>(std::floor(t));
    if (base >= g.dims[a] - 1) base = std::max(0, g.dims[a] - 2);
    i0[a] = base;
    i1[a] = std::min(base + 1, g.dims[a] - 1);
    f[a] = std::clamp(t - base, 0.0, 1.0);
  }
  const double c000 = v(i0[0], i0[1], i0[2]), c100 = v(i1[0], i0[1], i0[2]);
  const double c010 = v(i0[0], i1[1], i0[2]), c110 = v(i1[0], i1[1], i0[2]);
  const double c001 = v(i0[0], i0[1], i1[2]), c101 = v(i1[0], i0[1], i1[2]);
  const double c011 = v(i0[0], i1[1], i1[2]), c111 = v(i1[0], i1[1], i1[2]);
  const double c00 = c000 + (c100 - c000) * f[0];
  const double c10 = c010 + (c110 - c010) * f[0];
  const double c01 = c001 + (c101 - c001) * f[0];
  const double c11 = c011 + (c111 - c011) * f[0];
  const double c0 = c00 + (c10 - c00) * f[1];
  const double c1 = c01 + (c11 - c01) * f[1];
  return c0 + (c1 - c0) * f[2];
}

/// Zero-mean, unit-variance rescaling using statistics gathered inside `box`
/// (the whole grid when the box holds no voxel centre).
inline Volume3 normalize_intensity(const Volume3& v, const Box3& box) {
  const auto& g = v.geometry();
  double sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (!box.contains(g.world(i, j, k))) continue;
        const double x = v(i, j, k);
        sum += x;
        sum2 += x * x;
        ++n;
      }
  if (n == 0) {
    for (float x : v.data()) {
      sum += x;
      sum2 += static_cast<double>(x) * x;
    }
    n = v.size();
  }
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sum2 / static_cast<double>(n) - mean * mean);
  const double inv_sd = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  std::vector<float> out(v.size());
  auto src = v.data();
  for (std::size_t idx = 0; idx < out.size(); ++idx) out[idx] = static_cast<float>((src[idx] - mean) * inv_sd);
  return Volume3(g, ElementType::Float32, std::move(out));
}

// ---------------------------------------------------------------------------
// MetaImage-style I/O

namespace detail {

inline ElementType parse_element_type(const std::string& s) {
  if (s == "MET_UCHAR") return ElementType::UInt8;
  if (s == "MET_SHORT") return ElementType::Int16;
  if (s == "MET_FLOAT") return ElementType::Float32;
  fail(ErrorCode::InvalidArgument, "unsupported ElementType: " + s);
}

template <int N, typename T>
std::array<T, N> parse_fixed(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  std::array<T, N> out{};
  for (int i = 0; i < N; ++i) {
    if (!(in >> out[i])) fail(ErrorCode::InvalidArgument, "malformed header value for " + key + ": " + value);
  }
  std::string extra;
  if (in >> extra) fail(ErrorCode::InvalidArgument, "malformed header value for " + key + ": " + value);
  return out;
}

}  // namespace detail

inline Volume3 read_volume(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open volume header: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::InvalidArgument, "malformed header line: " + line);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  for (const char* key : {"NDims", "DimSize", "ElementType", "ElementDataFile"})
    if (!kv.count(key)) fail(ErrorCode::InvalidArgument, std::string("header missing key ") + key);
  if (kv["NDims"] != "3") fail(ErrorCode::InvalidArgument, "only NDims = 3 is supported");

  VolumeGeometry g;
  const auto dims = detail::parse_fixed<3, long long>("DimSize", kv["DimSize"]);
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0 || dims[a] > (1 << 20)) fail(ErrorCode::InvalidArgument, "invalid DimSize");
    g.dims[a] = static_cast<int>(dims[a]);
  }
  if (kv.count("ElementSpacing")) {
    auto s = detail::parse_fixed<3, double>("ElementSpacing", kv["ElementSpacing"]);
    g.spacing = {s[0], s[1], s[2]};
  }
  if (kv.count("Offset")) {
    auto o = detail::parse_fixed<3, double>("Offset", kv["Offset"]);
    g.origin = {o[0], o[1], o[2]};
  }
  const ElementType type = detail::parse_element_type(kv["ElementType"]);
  Volume3::validate_geometry(g);

  std::filesystem::path raw = kv["ElementDataFile"];
  if (raw.is_relative()) raw = path.parent_path() / raw;
  std::ifstream rin(raw, std::ios::binary);
  if (!rin) fail(ErrorCode::Io, "cannot open volume payload: " + raw.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(rin)), std::istreambuf_iterator<char>());
  const std::size_t n = g.voxel_count();
  const std::size_t expect = n * element_bytes(type);
  if (bytes.size() != expect)
    fail(ErrorCode::InvalidArgument, "payload size mismatch: header declares " + std::to_string(expect) +
                                         " bytes, file has " + std::to_string(bytes.size()));

  std::vector<float> data(n);
  switch (type) {
    case ElementType::UInt8:
      for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(static_cast<std::uint8_t>(bytes[i]));
      break;
    case ElementType::Int16:
      for (std::size_t i = 0; i < n; ++i) {
        std::int16_t x;
        std::memcpy(&x, bytes.data() + 2 * i, 2);
        data[i] = static_cast<float>(x);
      }
      break;
    case ElementType::Float32:
      std::memcpy(data.data(), bytes.data(), 4 * n);
      break;
  }
  return Volume3(g, type, std::move(data));
}

/// Writes `<stem>.mhd` and its payload `<stem>.raw` next to it.
inline void write_volume(const Volume3& v, const std::filesystem::path& path) {
  std::filesystem::path raw = path;
  raw.replace_extension(".raw");
  const auto& g = v.geometry();
  std::ostringstream header;
  header.precision(17);
  header << "NDims = 3\n"
         << "DimSize = " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n'
         << "ElementSpacing = " << g.spacing.x << ' ' << g.spacing.y << ' ' << g.spacing.z << '\n'
         << "Offset = " << g.origin.x << ' ' << g.origin.y << ' ' << g.origin.z << '\n'
         << "ElementType = " << met_name(v.element_type()) << '\n'
         << "ElementDataFile = " << raw.filename().string() << '\n';

  const std::size_t n = v.size();
  std::vector<char> bytes(n * element_bytes(v.element_type()));
  auto src = v.data();
  switch (v.element_type()) {
    case ElementType::UInt8:
      for (std::size_t i = 0; i < n; ++i)
        bytes[i] = static_cast<char>(static_cast<std::uint8_t>(std::clamp(std::lround(src[i]), 0L, 255L)));
      break;
    case ElementType::Int16:
      for (std::size_t i = 0; i < n; ++i) {
        const auto x = static_cast<std::int16_t>(std::clamp(std::lround(src[i]), -32768L, 32767L));
        std::memcpy(bytes.data() + 2 * i, &x, 2);
      }
      break;
    case ElementType::Float32:
      std::memcpy(bytes.data(), src.data(), 4 * n);
      break;
  }

  {
    std::ofstream rout(raw, std::ios::binary | std::ios::trunc);
    if (!rout) fail(ErrorCode::Io, "cannot write volume payload: " + raw.string());
    rout.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!rout) fail(ErrorCode::Io, "write failed: " + raw.string());
  }
  std::ofstream hout(path, std::ios::trunc);
  if (!hout) fail(ErrorCode::Io, "cannot write volume header: " + path.string());
  hout << header.str();
  if (!hout) fail(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace logismos
