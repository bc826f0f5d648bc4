#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "headpose/errors.hpp"
#include "headpose/phantom_sim.hpp"

namespace headpose {

namespace {

const Vec3 kLightDir = Vec3(0.3, -0.5, -1.0).normalized();  // towards the light, camera frame
constexpr double kAmbient = 0.25;
constexpr double kIrReferenceMm = 500.0;
constexpr double kMinRayCosine = 0.2;   // flatter surfels keep their own depth
constexpr double kMaxSurfelReachPx = 2.0;

}  // namespace

Frame render_frame(const HeadPhantom& phantom, const VirtualCamera& camera, const RigidTransform& pose,
                   std::uint64_t noise_seed) {
  camera.validate();
  const int w = camera.width;
  const int h = camera.height;
  const std::size_t npx = static_cast<std::size_t>(w) * h;
  std::vector<double> zbuf(npx, std::numeric_limits<double>::infinity());
  std::vector<int> owner(npx, -1);
  std::vector<Vec3> cam_points(phantom.size());
  std::vector<Vec3> cam_normals(phantom.size());

  for (std::size_t i = 0; i < phantom.size(); ++i) {
    cam_points[i] = apply(pose, phantom.points[i]);
    cam_normals[i] = pose.rotation.rotate(phantom.normals[i]);
  }

  // Each point is a small disc on its tangent plane. fn receives the pixel
  // index, the depth where the pixel ray meets the plane and the squared
  // distance from the projected point to the pixel centre.
  auto splat = [&](std::size_t i, auto&& fn) {
    const Vec3& p = cam_points[i];
    const Vec3& n = cam_normals[i];
    if (p.z() <= 0.0 || n.dot(p) >= 0.0) return;  // behind camera or back-facing
    const Eigen::Vector2d uv = camera.project(p);
    const long uc = std::lround(uv.x());
    const long vc = std::lround(uv.y());
    const double reach = kMaxSurfelReachPx * p.z() / camera.fx;
    for (long v = vc - kSplatRadiusPx; v <= vc + kSplatRadiusPx; ++v) {
      if (v < 0 || v >= h) continue;
      for (long u = uc - kSplatRadiusPx; u <= uc + kSplatRadiusPx; ++u) {
        if (u < 0 || u >= w) continue;
        const Vec3 ray((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
        const double denom = n.dot(ray);
        double zs = p.z();
        if (denom < -kMinRayCosine) zs = std::clamp(n.dot(p) / denom, p.z() - reach, p.z() + reach);
        const double du = uv.x() - u;
        const double dv = uv.y() - v;
        fn(static_cast<std::size_t>(v) * w + u, zs, du * du + dv * dv);
      }
    }
  };
  for (std::size_t i = 0; i < phantom.size(); ++i) {
    splat(i, [&](std::size_t idx, double zs, double) { zbuf[idx] = std::min(zbuf[idx], zs); });
  }
  // Surfels within one pixel footprint of the front depth are visible; the
  // one projecting closest to the pixel centre owns the pixel.
  std::vector<double> best_d2(npx, std::numeric_limits<double>::infinity());
  std::vector<double> depth_buf(npx, 0.0);
  for (std::size_t i = 0; i < phantom.size(); ++i) {
    const double tol = cam_points[i].z() / camera.fx;
    splat(i, [&](std::size_t idx, double zs, double d2) {
      if (zs <= zbuf[idx] + tol && d2 < best_d2[idx]) {
        best_d2[idx] = d2;
        depth_buf[idx] = zs;
        owner[idx] = static_cast<int>(i);
      }
    });
  }

  Frame f = Frame::blank(h, w);
  f.ground_truth = pose;
  f.noise_seed = noise_seed;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> gaussian(0.0, 1.0);
  bool any = false;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const int i = owner[static_cast<std::size_t>(v) * w + u];
      if (i < 0) continue;
      any = true;
      const Vec3& p = cam_points[i];
      const Vec3& n = cam_normals[i];
      const double z = depth_buf[static_cast<std::size_t>(v) * w + u];
      const double sigma = camera.sigma0_mm * (z / 1000.0) * (z / 1000.0);
      double depth = z;
      if (sigma > 0.0) depth = std::max(1e-3, z + sigma * gaussian(rng));
      const double lambert = std::max(0.0, n.dot(kLightDir));
      const double shade = kAmbient + (1.0 - kAmbient) * lambert;
      const Rgb& a = phantom.albedo[i];
      const double facing = std::max(0.0, -n.dot(p) / p.norm());
      const double ir = std::min(1.0, facing * (kIrReferenceMm / z) * (kIrReferenceMm / z));
      f.at(Channel::R, v, u) = static_cast<float>(a.r * shade);
      f.at(Channel::G, v, u) = static_cast<float>(a.g * shade);
      f.at(Channel::B, v, u) = static_cast<float>(a.b * shade);
      f.at(Channel::Depth, v, u) = static_cast<float>(depth);
      f.at(Channel::Ir, v, u) = static_cast<float>(ir);
    }
  }
  if (!any) throw RuntimeError("empty frame");
  return f;
}

}  // namespace headpose
