#include "headpose/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"

namespace headpose {

namespace {

UnitQuaternion normalized(double w, double x, double y, double z) {
  return UnitQuaternion::from_wxyz(w, x, y, z);
}

}  // namespace

UnitQuaternion UnitQuaternion::from_wxyz(double w, double x, double y, double z) {
  if (!std::isfinite(w) || !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
    throw ValidationError("quaternion has non-finite components");
  }
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (n < 1e-12) throw ValidationError("quaternion norm is zero");
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  bool flip = w < 0.0;
  if (w == 0.0) {
    const double first = x != 0.0 ? x : (y != 0.0 ? y : z);
    flip = first < 0.0;
  }
  if (flip) return {-w, -x, -y, -z};
  return {w, x, y, z};
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis, double angle_rad) {
  const double n = axis.norm();
  if (!(n > 0.0)) throw ValidationError("rotation axis must be non-zero");
  const Vec3 a = axis / n;
  const double s = std::sin(0.5 * angle_rad);
  return normalized(std::cos(0.5 * angle_rad), a.x() * s, a.y() * s, a.z() * s);
}

UnitQuaternion UnitQuaternion::from_matrix(const Mat3& r) {
  const double tr = r.trace();
  if (tr > 0.0) {
    const double s = 2.0 * std::sqrt(1.0 + tr);
    return normalized(0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s,
                      (r(1, 0) - r(0, 1)) / s);
  }
  if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    return normalized((r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s,
                      (r(0, 2) + r(2, 0)) / s);
  }
  if (r(1, 1) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    return normalized((r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s,
                      (r(1, 2) + r(2, 1)) / s);
  }
  const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
  return normalized((r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s,
                    0.25 * s);
}

UnitQuaternion UnitQuaternion::operator*(const UnitQuaternion& q) const {
  return normalized(w_ * q.w_ - x_ * q.x_ - y_ * q.y_ - z_ * q.z_,
                    w_ * q.x_ + x_ * q.w_ + y_ * q.z_ - z_ * q.y_,
                    w_ * q.y_ - x_ * q.z_ + y_ * q.w_ + z_ * q.x_,
                    w_ * q.z_ + x_ * q.y_ - y_ * q.x_ + z_ * q.w_);
}

UnitQuaternion UnitQuaternion::conjugate() const {
  // Conjugation keeps w, so canonical form survives except when w == 0.
  return normalized(w_, -x_, -y_, -z_);
}

Vec3 UnitQuaternion::rotate(const Vec3& v) const {
  const Vec3 u(x_, y_, z_);
  const Vec3 c = u.cross(v);
  return v + 2.0 * w_ * c + 2.0 * u.cross(c);
}

Mat3 UnitQuaternion::to_matrix() const {
  Mat3 r;
  r << 1 - 2 * (y_ * y_ + z_ * z_), 2 * (x_ * y_ - z_ * w_), 2 * (x_ * z_ + y_ * w_),
      2 * (x_ * y_ + z_ * w_), 1 - 2 * (x_ * x_ + z_ * z_), 2 * (y_ * z_ - x_ * w_),
      2 * (x_ * z_ - y_ * w_), 2 * (y_ * z_ + x_ * w_), 1 - 2 * (x_ * x_ + y_ * y_);
  return r;
}

UnitQuaternion rot_x(double angle_rad) { return UnitQuaternion::from_axis_angle(Vec3::UnitX(), angle_rad); }
UnitQuaternion rot_y(double angle_rad) { return UnitQuaternion::from_axis_angle(Vec3::UnitY(), angle_rad); }
UnitQuaternion rot_z(double angle_rad) { return UnitQuaternion::from_axis_angle(Vec3::UnitZ(), angle_rad); }

Mat4 RigidTransform::to_matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation.to_matrix();
  m.topRightCorner<3, 1>() = translation;
  return m;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation.rotate(b.translation) + a.translation};
}

RigidTransform invert(const RigidTransform& t) {
  const UnitQuaternion inv = t.rotation.conjugate();
  return {inv, -inv.rotate(t.translation)};
}

Vec3 apply(const RigidTransform& t, const Vec3& p) { return t.rotation.rotate(p) + t.translation; }

AxisAngle to_axis_angle(const UnitQuaternion& q) {
  // Canonical w >= 0 keeps the half angle in [0, 90] degrees.
  const Vec3 v(q.x(), q.y(), q.z());
  const double s = v.norm();
  const double angle = 2.0 * std::atan2(s, q.w());
  AxisAngle out;
  out.angle_deg = rad2deg(angle);
  if (out.angle_deg < 1e-9) {
    out.axis = Vec3::UnitX();
  } else {
    out.axis = v / s;
  }
  return out;
}

PoseError pose_error(const RigidTransform& predicted, const RigidTransform& ground_truth) {
  const RigidTransform residual = compose(invert(predicted), ground_truth);
  return {residual.translation.norm(), to_axis_angle(residual.rotation).angle_deg};
}

std::vector<Vec3> compile_head_scan(std::span<const HeadScanSample> samples) {
  if (samples.empty()) throw ValidationError("no samples");
  std::vector<Vec3> points;
  points.reserve(samples.size());
  for (const auto& s : samples) {
    points.push_back(compose(invert(s.cam_to_marker), s.cam_to_pointer).translation);
  }
  return points;
}

bool WorkspaceBounds::contains(const Vec3& p) const {
  return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
}

PoseTarget pose_to_target(const RigidTransform& t, const WorkspaceBounds& bounds) {
  if (!bounds.contains(t.translation)) {
    throw ValidationError("translation outside workspace bounds");
  }
  PoseTarget out{};
  for (int i = 0; i < 3; ++i) {
    const double span = bounds.max[i] - bounds.min[i];
    out[i] = span > 0.0 ? (t.translation[i] - bounds.min[i]) / span : 0.5;
  }
  const auto q = t.rotation.wxyz();
  for (int i = 0; i < 4; ++i) out[3 + i] = 0.5 * (q[i] + 1.0);
  return out;
}

RigidTransform target_to_pose(std::span<const double, 7> target, const WorkspaceBounds& bounds) {
  RigidTransform t;
  for (int i = 0; i < 3; ++i) {
    t.translation[i] = bounds.min[i] + target[i] * (bounds.max[i] - bounds.min[i]);
  }
  std::array<double, 4> q{};
  double n2 = 0.0;
  for (int i = 0; i < 4; ++i) {
    q[i] = 2.0 * target[3 + i] - 1.0;
    n2 += q[i] * q[i];
  }
  if (!std::isfinite(n2) || std::sqrt(n2) < 1e-6) {
    throw RuntimeError("degenerate orientation output");
  }
  t.rotation = UnitQuaternion::from_wxyz(q[0], q[1], q[2], q[3]);
  return t;
}

void to_json(nlohmann::json& j, const RigidTransform& t) {
  const auto q = t.rotation.wxyz();
  j = nlohmann::json{{"q", {q[0], q[1], q[2], q[3]}},
                     {"t", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

void from_json(const nlohmann::json& j, RigidTransform& t) {
  const auto q = j.at("q").get<std::array<double, 4>>();
  const auto p = j.at("t").get<std::array<double, 3>>();
  t.rotation = UnitQuaternion::from_wxyz(q[0], q[1], q[2], q[3]);
  t.translation = Vec3(p[0], p[1], p[2]);
}

void to_json(nlohmann::json& j, const WorkspaceBounds& b) {
  j = nlohmann::json{{"min", {b.min.x(), b.min.y(), b.min.z()}},
                     {"max", {b.max.x(), b.max.y(), b.max.z()}}};
}

void from_json(const nlohmann::json& j, WorkspaceBounds& b) {
  const auto lo = j.at("min").get<std::array<double, 3>>();
  const auto hi = j.at("max").get<std::array<double, 3>>();
  b.min = Vec3(lo[0], lo[1], lo[2]);
  b.max = Vec3(hi[0], hi[1], hi[2]);
  if ((b.min.array() > b.max.array()).any()) throw ValidationError("workspace bounds min > max");
}

}  // namespace headpose
