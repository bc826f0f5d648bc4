#include <algorithm>
#include <cmath>
#include <random>

#include "headpose/errors.hpp"
#include "headpose/phantom_sim.hpp"

namespace headpose {

namespace {

// Cranium semi-axes (mm) before facial relief.
constexpr double kHalfWidth = 80.0;
constexpr double kHalfHeight = 110.0;
constexpr double kHalfDepth = 95.0;

double gauss(double x, double sigma) { return std::exp(-(x / sigma) * (x / sigma)); }

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Outward relief of the face towards -z, in mm. u, v are the direction's
// x and y components (v grows downwards).
double face_relief(double u, double v) {
  const double nose_width = 0.08 + 0.06 * std::clamp((v + 0.2) / 0.4, 0.0, 1.0);
  const double nose = 22.0 * gauss(u, nose_width) * gauss(v - 0.12, 0.17);
  const double brow = 7.0 * gauss(v + 0.33, 0.07) * std::exp(-std::pow(u / 0.45, 4));
  const double eyes = -7.0 * gauss(std::abs(u) - 0.33, 0.11) * gauss(v + 0.17, 0.08);
  const double lips = 4.0 * gauss(u, 0.2) * gauss(v - 0.42, 0.05);
  const double chin = 9.0 * gauss(u, 0.22) * gauss(v - 0.66, 0.09);
  const double cheeks = 3.0 * gauss(std::abs(u) - 0.45, 0.15) * gauss(v - 0.05, 0.12);
  return nose + brow + eyes + lips + chin + cheeks;
}

bool in_face_region(const Vec3& d) { return d.z() <= -0.55 && d.y() >= -0.55 && d.y() <= 0.85; }

Rgb base_albedo(const Vec3& d, bool face) {
  const double u = d.x();
  const double v = d.y();
  const bool hair = (!face && d.y() < -0.45) || (d.z() > 0.2 && d.y() < 0.3);
  if (hair) return {0.25, 0.18, 0.12};
  if (face) {
    for (const double side : {-1.0, 1.0}) {
      const double du = u - side * 0.33;
      const double dv = v + 0.17;
      const double r = std::hypot(du, dv);
      if (r < 0.035) return {0.20, 0.15, 0.10};
      if (r < 0.07) return {0.95, 0.95, 0.95};
    }
    if (std::abs(v + 0.28) < 0.04 && std::abs(u) > 0.15 && std::abs(u) < 0.5) return {0.30, 0.22, 0.15};
    if (std::abs(v - 0.42) < 0.045 && std::abs(u) < 0.2) return {0.72, 0.38, 0.38};
  }
  return {0.87, 0.68, 0.56};
}

Vec3 any_perpendicular(const Vec3& d) {
  const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return d.cross(helper).normalized();
}

Vec3 surface_normal(const Vec3& d) {
  const Vec3 t1 = any_perpendicular(d);
  const Vec3 t2 = d.cross(t1);
  constexpr double h = 1e-5;
  const Vec3 du = phantom_surface((d + h * t1).normalized()) - phantom_surface((d - h * t1).normalized());
  const Vec3 dv = phantom_surface((d + h * t2).normalized()) - phantom_surface((d - h * t2).normalized());
  Vec3 n = du.cross(dv).normalized();
  if (n.dot(d) < 0.0) n = -n;
  return n;
}

}  // namespace

Vec3 phantom_surface(const Vec3& d) {
  Vec3 p(kHalfWidth * d.x(), kHalfHeight * d.y(), kHalfDepth * d.z());
  const double front = smoothstep(0.2, 0.6, -d.z());
  if (front > 0.0) p.z() -= front * face_relief(d.x(), d.y());
  return p;
}

std::vector<Vec3> HeadPhantom::face_points() const {
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (is_face[i]) out.push_back(points[i]);
  }
  return out;
}

HeadPhantom build_phantom(std::uint64_t seed, int resolution) {
  if (resolution < kMinPhantomPoints) {
    throw ValidationError("phantom resolution must be >= " + std::to_string(kMinPhantomPoints) + " points, got " +
                          std::to_string(resolution));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> tint(-0.03, 0.03);

  const double golden = kPi * (3.0 - std::sqrt(5.0));
  const double phase = 2.0 * kPi * unit(rng);

  HeadPhantom ph;
  ph.points.reserve(resolution);
  ph.normals.reserve(resolution);
  ph.albedo.reserve(resolution);
  ph.is_face.reserve(resolution);
  for (int i = 0; i < resolution; ++i) {
    // Fibonacci sphere with a small seeded jitter along the spiral.
    const double t = (i + 0.25 + 0.5 * unit(rng)) / resolution;
    const double y = 1.0 - 2.0 * t;
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * i + phase;
    // Spiral axis along y so the poles sit at the crown and under the chin.
    const Vec3 d(r * std::cos(phi), y, r * std::sin(phi));
    const bool face = in_face_region(d);
    Rgb a = base_albedo(d, face);
    a.r = std::clamp(a.r + tint(rng), 0.0, 1.0);
    a.g = std::clamp(a.g + tint(rng), 0.0, 1.0);
    a.b = std::clamp(a.b + tint(rng), 0.0, 1.0);
    ph.points.push_back(phantom_surface(d));
    ph.normals.push_back(surface_normal(d));
    ph.albedo.push_back(a);
    ph.is_face.push_back(face ? 1 : 0);
  }
  return ph;
}

std::vector<HeadScanSample> simulate_head_scan(const HeadPhantom& phantom, int count, std::uint64_t seed,
                                               double pointer_noise_mm) {
  if (count <= 0) throw ValidationError("scan sample count must be positive");
  const auto face = phantom.face_points();
  if (face.empty()) throw ValidationError("phantom has no face region");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, face.size() - 1);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  auto random_rotation = [&](double max_deg) {
    Vec3 axis(sym(rng), sym(rng), sym(rng));
    if (axis.norm() < 1e-6) axis = Vec3::UnitZ();
    return UnitQuaternion::from_axis_angle(axis, deg2rad(max_deg * sym(rng)));
  };

  std::vector<HeadScanSample> samples;
  samples.reserve(count);
  for (int i = 0; i < count; ++i) {
    // The head is free to move during the scan.
    const RigidTransform marker{random_rotation(30.0), Vec3(100.0 * sym(rng), 100.0 * sym(rng), 700.0 + 100.0 * sym(rng))};
    Vec3 tip = face[pick(rng)];
    if (pointer_noise_mm > 0.0) tip += pointer_noise_mm * Vec3(noise(rng), noise(rng), noise(rng));
    const RigidTransform marker_to_pointer{random_rotation(90.0), tip};
    samples.push_back({marker, compose(marker, marker_to_pointer)});
  }
  return samples;
}

}  // namespace headpose
