#pragma once

#include <array>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <nlohmann/json_fwd.hpp>

namespace headpose {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

constexpr double kPi = 3.14159265358979323846;
constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Rotation stored as a Hamilton quaternion (w, x, y, z).
///
/// Always unit length and in canonical sign (w >= 0; if w == 0, the first
/// non-zero vector component is positive), so each rotation has exactly one
/// representation. Construction from raw components normalizes.
class UnitQuaternion {
 public:
  UnitQuaternion() = default;

  /// Throws ValidationError if the components are non-finite or near zero.
  static UnitQuaternion from_wxyz(double w, double x, double y, double z);
  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle_rad);
  /// Nearest rotation for an orthonormal matrix (Shepperd's method).
  static UnitQuaternion from_matrix(const Mat3& r);

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }
  std::array<double, 4> wxyz() const { return {w_, x_, y_, z_}; }

  UnitQuaternion operator*(const UnitQuaternion& rhs) const;
  UnitQuaternion conjugate() const;
  Vec3 rotate(const Vec3& v) const;
  Mat3 to_matrix() const;

 private:
  UnitQuaternion(double w, double x, double y, double z) : w_(w), x_(x), y_(y), z_(z) {}

  double w_ = 1.0;
  double x_ = 0.0;
  double y_ = 0.0;
  double z_ = 0.0;
};

UnitQuaternion rot_x(double angle_rad);
UnitQuaternion rot_y(double angle_rad);
UnitQuaternion rot_z(double angle_rad);

/// x' = rotation * x + translation. Translation in millimetres.
struct RigidTransform {
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {UnitQuaternion(), t}; }
  static RigidTransform from_rotation(const UnitQuaternion& q) { return {q, Vec3::Zero()}; }

  Mat4 to_matrix() const;
};

/// a ∘ b: applies b first, then a.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);
Vec3 apply(const RigidTransform& t, const Vec3& p);

struct AxisAngle {
  Vec3 axis = Vec3::UnitX();
  double angle_deg = 0.0;
};

/// Angle in [0, 180] degrees. Below 1e-9 degrees the axis is +x.
AxisAngle to_axis_angle(const UnitQuaternion& q);

struct PoseError {
  double position_mm = 0.0;
  double orientation_deg = 0.0;
};

/// Error of a predicted pose against ground truth, computed on
/// I_E = predicted^-1 * ground_truth: translation norm and rotation angle.
PoseError pose_error(const RigidTransform& predicted, const RigidTransform& ground_truth);

struct HeadScanSample {
  RigidTransform cam_to_marker;
  RigidTransform cam_to_pointer;
};

/// Pointer-tip positions expressed in the head-marker frame. Throws
/// ValidationError("no samples") on empty input.
std::vector<Vec3> compile_head_scan(std::span<const HeadScanSample> samples);

struct WorkspaceBounds {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool contains(const Vec3& p) const;
  Vec3 center() const { return 0.5 * (min + max); }
};

/// Regression target layout: px, py, pz, qw, qx, qy, qz; each in [0, 1].
using PoseTarget = std::array<double, 7>;

/// Positions are min-max scaled by `bounds`, quaternion components mapped
/// affinely from [-1, 1]. Throws ValidationError if outside the bounds.
PoseTarget pose_to_target(const RigidTransform& t, const WorkspaceBounds& bounds);

/// Inverse of pose_to_target. The quaternion is renormalized and
/// canonicalized; throws RuntimeError("degenerate orientation output") if its
/// norm is below 1e-6.
RigidTransform target_to_pose(std::span<const double, 7> target, const WorkspaceBounds& bounds);

void to_json(nlohmann::json& j, const RigidTransform& t);
void from_json(const nlohmann::json& j, RigidTransform& t);
void to_json(nlohmann::json& j, const WorkspaceBounds& b);
void from_json(const nlohmann::json& j, WorkspaceBounds& b);

}  // namespace headpose
