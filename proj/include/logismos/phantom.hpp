#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "logismos/config.hpp"
#include "logismos/mesh.hpp"
#include "logismos/random.hpp"
#include "logismos/volume.hpp"

namespace logismos {

inline constexpr int kBoneSurface = 0;
inline constexpr int kCartilageSurface = 1;

/// Label values written to phantom label volumes.
enum PhantomLabel : std::uint8_t {
  kLabelBackground = 0,
  kLabelFemurBone = 1,
  kLabelFemurCartilage = 2,
  kLabelTibiaBone = 3,
  kLabelTibiaCartilage = 4,
};

inline bool is_cartilage_label(float label) {
  const int l = static_cast<int>(label);
  return l == kLabelFemurCartilage || l == kLabelTibiaCartilage;
}

/// Two-object knee-like phantom description. Serialised as flat key-value text.
struct PhantomSpec {
  std::uint64_t seed = 1;
  Dims3 dims{56, 56, 64};
  Vec3 spacing{0.5, 0.5, 0.7};
  Vec3 femur_radii{9.5, 9.0, 8.0};
  Vec3 tibia_radii{9.0, 8.5, 7.5};
  double shape_exponent = 2.4;
  double radius_jitter = 0.05;  ///< relative per-axis radius variation between seeds
  double perturb_mm = 0.35;     ///< amplitude of the band-limited radial perturbation
  double cartilage_mm = 2.0;
  double gap_mm = 1.0;
  double intensity_bone = 40.0;
  double intensity_cartilage = 100.0;
  double intensity_background = 60.0;
  double noise_sigma = 4.0;
  int lesion_count = 0;
  double lesion_radius_mm = 1.5;
  int mesh_level = 3;

  KeyValueConfig to_config() const {
    KeyValueConfig c;
    c.set("seed", static_cast<long long>(seed));
    c.set("dims", std::to_string(dims[0]) + " " + std::to_string(dims[1]) + " " + std::to_string(dims[2]));
    c.set("spacing", spacing);
    c.set("femur_radii", femur_radii);
    c.set("tibia_radii", tibia_radii);
    c.set("shape_exponent", shape_exponent);
    c.set("radius_jitter", radius_jitter);
    c.set("perturb_mm", perturb_mm);
    c.set("cartilage_mm", cartilage_mm);
    c.set("gap_mm", gap_mm);
    c.set("intensity_bone", intensity_bone);
    c.set("intensity_cartilage", intensity_cartilage);
    c.set("intensity_background", intensity_background);
    c.set("noise_sigma", noise_sigma);
    c.set("lesion_count", lesion_count);
    c.set("lesion_radius_mm", lesion_radius_mm);
    c.set("mesh_level", mesh_level);
    return c;
  }

  /// Keys may be given bare or with a `phantom.` prefix.
  static PhantomSpec from_config(const KeyValueConfig& c) { return from_config(c, PhantomSpec{}); }
  static PhantomSpec from_config(const KeyValueConfig& c, PhantomSpec s) {
    auto key = [&](const std::string& k) { return c.has("phantom." + k) ? "phantom." + k : k; };
    s.seed = static_cast<std::uint64_t>(c.get_int(key("seed"), static_cast<long long>(s.seed)));
    if (c.has(key("dims"))) {
      auto d = c.get_doubles(key("dims"), {});
      require(d.size() == 3, ErrorCode::InvalidArgument, "dims needs 3 values");
      s.dims = {static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2])};
    }
    s.spacing = c.get_vec3(key("spacing"), s.spacing);
    s.femur_radii = c.get_vec3(key("femur_radii"), s.femur_radii);
    s.tibia_radii = c.get_vec3(key("tibia_radii"), s.tibia_radii);
    s.shape_exponent = c.get_double(key("shape_exponent"), s.shape_exponent);
    s.radius_jitter = c.get_double(key("radius_jitter"), s.radius_jitter);
    s.perturb_mm = c.get_double(key("perturb_mm"), s.perturb_mm);
    s.cartilage_mm = c.get_double(key("cartilage_mm"), s.cartilage_mm);
    s.gap_mm = c.get_double(key("gap_mm"), s.gap_mm);
    s.intensity_bone = c.get_double(key("intensity_bone"), s.intensity_bone);
    s.intensity_cartilage = c.get_double(key("intensity_cartilage"), s.intensity_cartilage);
    s.intensity_background = c.get_double(key("intensity_background"), s.intensity_background);
    s.noise_sigma = c.get_double(key("noise_sigma"), s.noise_sigma);
    s.lesion_count = static_cast<int>(c.get_int(key("lesion_count"), s.lesion_count));
    s.lesion_radius_mm = c.get_double(key("lesion_radius_mm"), s.lesion_radius_mm);
    s.mesh_level = static_cast<int>(c.get_int(key("mesh_level"), s.mesh_level));
    return s;
  }
};

/// One low-frequency term a*sin(f*<d,u> + phase) of a radial perturbation.
struct RadialWave {
  Vec3 direction;
  double frequency = 1.0;
  double phase = 0.0;
  double amplitude = 0.0;
  double operator()(const Vec3& u) const { return amplitude * std::sin(frequency * dot(direction, u) + phase); }
};

/// Star-shaped object: superellipsoid bone with perturbations and a cartilage
/// shell of varying thickness, both radial functions of direction.
struct ObjectShape {
  Vec3 center;
  Vec3 radii;
  double exponent = 2.0;
  std::vector<RadialWave> bone_waves;
  double cartilage_mm = 2.0;
  std::vector<RadialWave> thickness_waves;

  double bone_radius(const Vec3& u) const {
    const double e = exponent;
    const double s = std::pow(std::abs(u.x) / radii.x, e) + std::pow(std::abs(u.y) / radii.y, e) +
                     std::pow(std::abs(u.z) / radii.z, e);
    double r = std::pow(s, -1.0 / e);
    for (const auto& w : bone_waves) r += w(u);
    return r;
  }
  double thickness(const Vec3& u) const {
    double t = 1.0;
    for (const auto& w : thickness_waves) t += w(u);
    return cartilage_mm * std::clamp(t, 0.6, 1.4);
  }
  double cartilage_radius(const Vec3& u) const { return bone_radius(u) + thickness(u); }
  double surface_radius(int surface, const Vec3& u) const {
    return surface == kBoneSurface ? bone_radius(u) : cartilage_radius(u);
  }
  /// Radial pseudo signed distance (negative inside).
  double signed_radial(int surface, const Vec3& p) const {
    const Vec3 d = p - center;
    const double rho = norm(d);
    if (rho == 0.0) return -surface_radius(surface, {0, 0, 1});
    return rho - surface_radius(surface, d / rho);
  }
  TriangleMesh surface_mesh(int surface, const TriangleMesh& sphere) const {
    TriangleMesh m;
    m.faces = sphere.faces;
    m.vertices.reserve(sphere.vertices.size());
    for (const auto& u : sphere.vertices) m.vertices.push_back(center + u * surface_radius(surface, u));
    compute_normals(m);
    return m;
  }
};

struct Lesion {
  int object = 0;
  Vec3 center;
  double radius = 0.0;
};

struct TruthSurface {
  int object = 0;
  int surface = 0;
  TriangleMesh mesh;
};

struct Phantom {
  PhantomSpec spec;
  Volume3 volume;
  Volume3 labels;
  std::optional<Volume3> lesion_mask;
  std::vector<TruthSurface> truth_surfaces;
  std::array<ObjectShape, 2> shapes;
  std::vector<Lesion> lesions;

  const TriangleMesh& truth(int object, int surface) const {
    for (const auto& t : truth_surfaces)
      if (t.object == object && t.surface == surface) return t.mesh;
    fail(ErrorCode::NotFound, "no truth surface for object " + std::to_string(object));
  }
};

namespace detail {

inline ObjectShape random_shape(const PhantomSpec& spec, const Vec3& base_radii, Rng& rng) {
  ObjectShape s;
  s.exponent = spec.shape_exponent;
  s.radii = {base_radii.x * (1.0 + spec.radius_jitter * uniform(rng, -1, 1)),
             base_radii.y * (1.0 + spec.radius_jitter * uniform(rng, -1, 1)),
             base_radii.z * (1.0 + spec.radius_jitter * uniform(rng, -1, 1))};
  s.cartilage_mm = spec.cartilage_mm;
  auto random_dir = [&]() {
    Vec3 d{standard_normal(rng), standard_normal(rng), standard_normal(rng)};
    return normalized(d);
  };
  for (int w = 0; w < 3; ++w) {
    RadialWave wave{random_dir(), uniform(rng, 1.0, 3.0), uniform(rng, 0.0, 2.0 * kPi),
                    spec.perturb_mm * uniform(rng, 0.2, 0.5)};
    s.bone_waves.push_back(wave);
  }
  for (int w = 0; w < 2; ++w) {
    RadialWave wave{random_dir(), uniform(rng, 1.0, 2.5), uniform(rng, 0.0, 2.0 * kPi), uniform(rng, 0.08, 0.18)};
    s.thickness_waves.push_back(wave);
  }
  return s;
}

/// Width of a voxel measured along unit direction u.
inline double voxel_width_along(const Vec3& spacing, const Vec3& u) {
  return std::abs(u.x) * spacing.x + std::abs(u.y) * spacing.y + std::abs(u.z) * spacing.z;
}

inline double blend_fraction(double signed_dist, double width) {
  return std::clamp(0.5 - signed_dist / width, 0.0, 1.0);
}

}  // namespace detail

/// Renders a two-object phantom. Object 0 ("femur") sits above object 1
/// ("tibia") along z, their cartilage shells separated by at least gap_mm.
inline Phantom make_phantom(const PhantomSpec& spec) {
  VolumeGeometry geom{spec.dims, spec.spacing, {0, 0, 0}};
  Volume3::validate_geometry(geom);
  require(spec.gap_mm >= 0.0, ErrorCode::InvalidArgument, "gap_mm must be non-negative: objects would overlap");
  require(spec.cartilage_mm > 0.0, ErrorCode::InvalidArgument, "cartilage_mm must be positive");
  require(spec.lesion_count >= 0, ErrorCode::InvalidArgument, "lesion_count must be non-negative");

  Rng rng = make_rng(spec.seed, 0x7068);
  Phantom ph;
  ph.spec = spec;
  ph.shapes[0] = detail::random_shape(spec, spec.femur_radii, rng);
  ph.shapes[1] = detail::random_shape(spec, spec.tibia_radii, rng);

  const Vec3 vol_center = geom.bounds().center();
  const TriangleMesh probe = icosphere(4);
  // Separation along z: start from the axial clearance and grow until every
  // sampled point of the lower shell clears the upper shell by gap_mm.
  const double axial = ph.shapes[0].cartilage_radius({0, 0, -1}) + ph.shapes[1].cartilage_radius({0, 0, 1});
  double sep = axial + spec.gap_mm;
  for (int iter = 0; iter < 400; ++iter) {
    ph.shapes[0].center = vol_center + Vec3{0, 0, sep / 2};
    ph.shapes[1].center = vol_center - Vec3{0, 0, sep / 2};
    bool ok = true;
    for (const auto& u : probe.vertices) {
      const Vec3 p1 = ph.shapes[1].center + u * ph.shapes[1].cartilage_radius(u);
      const Vec3 p0 = ph.shapes[0].center + u * ph.shapes[0].cartilage_radius(u);
      if (ph.shapes[0].signed_radial(kCartilageSurface, p1) < spec.gap_mm ||
          ph.shapes[1].signed_radial(kCartilageSurface, p0) < spec.gap_mm) {
        ok = false;
        break;
      }
    }
    if (ok) break;
    sep += 0.05;
  }

  const Box3 vol_box = geom.bounds();
  for (int o = 0; o < 2; ++o)
    for (const auto& u : probe.vertices) {
      const Vec3 p = ph.shapes[o].center + u * ph.shapes[o].cartilage_radius(u);
      if (!vol_box.contains(p, -std::max({spec.spacing.x, spec.spacing.y, spec.spacing.z})))
        fail(ErrorCode::InvalidArgument,
             "phantom geometry does not fit the volume without the objects overlapping; enlarge dims");
    }

  // Lesions: spheres centred on the outer cartilage surface, kept apart from
  // each other and from the opposing object.
  const double lr = spec.lesion_radius_mm;
  const double vmax = std::max({spec.spacing.x, spec.spacing.y, spec.spacing.z});
  for (int attempt = 0; static_cast<int>(ph.lesions.size()) < spec.lesion_count; ++attempt) {
    if (attempt > 20000) fail(ErrorCode::InvalidArgument, "cannot place the requested number of lesions");
    const int obj = static_cast<int>(uniform_index(rng, 2));
    const Vec3 u = normalized(Vec3{standard_normal(rng), standard_normal(rng), standard_normal(rng)});
    const Vec3 c = ph.shapes[obj].center + u * ph.shapes[obj].cartilage_radius(u);
    bool ok = ph.shapes[1 - obj].signed_radial(kCartilageSurface, c) > lr + 2 * vmax;
    ok = ok && vol_box.contains(c, -(lr + vmax));
    for (const auto& l : ph.lesions) ok = ok && distance(l.center, c) > 2 * lr + 3 * vmax;
    if (ok) ph.lesions.push_back({obj, c, lr});
  }

  ph.volume = Volume3(geom, ElementType::Float32, static_cast<float>(spec.intensity_background));
  ph.labels = Volume3(geom, ElementType::UInt8, 0.0f);
  if (spec.lesion_count > 0) ph.lesion_mask = Volume3(geom, ElementType::UInt8, 0.0f);

  const double bg = spec.intensity_background, cart = spec.intensity_cartilage, bone = spec.intensity_bone;
  double rmax[2];
  for (int o = 0; o < 2; ++o) {
    rmax[o] = 0;
    for (const auto& u : probe.vertices) rmax[o] = std::max(rmax[o], ph.shapes[o].cartilage_radius(u));
    rmax[o] += 2 * vmax;
  }

  for (int k = 0; k < geom.dims[2]; ++k)
    for (int j = 0; j < geom.dims[1]; ++j)
      for (int i = 0; i < geom.dims[0]; ++i) {
        const Vec3 p = geom.world(i, j, k);
        double value = bg;
        std::uint8_t label = kLabelBackground;
        bool in_lesion = false;
        for (int o = 0; o < 2; ++o) {
          const auto& sh = ph.shapes[o];
          const Vec3 d = p - sh.center;
          const double rho = norm(d);
          if (rho > rmax[o]) continue;
          const Vec3 u = rho > 0 ? d / rho : Vec3{0, 0, 1};
          const double rb = sh.bone_radius(u);
          const double rc = rb + sh.thickness(u);
          const double w = detail::voxel_width_along(spec.spacing, u);
          const double fb = detail::blend_fraction(rho - rb, w);
          const double fc = detail::blend_fraction(rho - rc, w);
          double lesion_frac = 0.0;
          for (const auto& l : ph.lesions) {
            if (l.object != o) continue;
            const Vec3 dl = p - l.center;
            const double dist = norm(dl);
            const double wl = dist > 0 ? detail::voxel_width_along(spec.spacing, dl / dist) : vmax;
            lesion_frac = std::max(lesion_frac, detail::blend_fraction(dist - l.radius, wl));
            if (dist < l.radius && rho < rc && rho >= rb) in_lesion = true;
          }
          const double cart_eff = cart + lesion_frac * (bg - cart);
          value = bg + fc * (cart_eff - bg) + fb * (bone - cart_eff);
          if (rho < rb)
            label = o == 0 ? kLabelFemurBone : kLabelTibiaBone;
          else if (rho < rc)
            label = o == 0 ? kLabelFemurCartilage : kLabelTibiaCartilage;
          if (fc > 0.0) break;
        }
        ph.volume(i, j, k) = static_cast<float>(value);
        ph.labels(i, j, k) = label;
        if (in_lesion) (*ph.lesion_mask)(i, j, k) = 1.0f;
      }

  if (spec.noise_sigma > 0.0) {
    Rng noise = make_rng(spec.seed, 0x6e6f);
    for (float& x : ph.volume.data()) x = static_cast<float>(x + spec.noise_sigma * standard_normal(noise));
  }

  const TriangleMesh sphere = icosphere(spec.mesh_level);
  for (int o = 0; o < 2; ++o)
    for (int s : {kBoneSurface, kCartilageSurface}) ph.truth_surfaces.push_back({o, s, ph.shapes[o].surface_mesh(s, sphere)});
  return ph;
}

/// Truth bounding box of an object's bone surface.
inline VOIBox truth_voi(const Phantom& ph, int object, double pad_fraction = 0.05) {
  return {bounding_box(ph.truth(object, kBoneSurface)).padded(pad_fraction), object};
}

}  // namespace logismos
