#include <algorithm>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/phantom_sim.hpp"

namespace headpose {

void VirtualCamera::validate() const {
  if (width <= 0 || height <= 0) throw ValidationError("camera image size must be positive");
  if (!(fx > 0.0) || !(fy > 0.0)) throw ValidationError("camera focal lengths must be positive");
  if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height) {
    throw ValidationError("camera principal point must lie inside the image");
  }
  if (sigma0_mm < 0.0) throw ValidationError("depth noise sigma0 must be >= 0");
}

Eigen::Vector2d VirtualCamera::project(const Vec3& p) const {
  return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
}

Vec3 VirtualCamera::backproject(double u, double v, double depth) const {
  return {(u - cx) * depth / fx, (v - cy) * depth / fy, depth};
}

bool VirtualCamera::in_image(const Eigen::Vector2d& uv) const {
  return uv.x() >= 0.0 && uv.x() < width && uv.y() >= 0.0 && uv.y() < height;
}

void to_json(nlohmann::json& j, const VirtualCamera& c) {
  j = nlohmann::json{{"fx", c.fx},         {"fy", c.fy},         {"cx", c.cx},
                     {"cy", c.cy},         {"width", c.width},   {"height", c.height},
                     {"sigma0_mm", c.sigma0_mm}, {"camera_to_world", c.camera_to_world}};
}

void from_json(const nlohmann::json& j, VirtualCamera& c) {
  const VirtualCamera defaults;
  c.fx = j.value("fx", defaults.fx);
  c.fy = j.value("fy", defaults.fy);
  c.cx = j.value("cx", defaults.cx);
  c.cy = j.value("cy", defaults.cy);
  c.width = j.value("width", defaults.width);
  c.height = j.value("height", defaults.height);
  c.sigma0_mm = j.value("sigma0_mm", defaults.sigma0_mm);
  if (j.contains("camera_to_world")) c.camera_to_world = j.at("camera_to_world").get<RigidTransform>();
  c.validate();
}

UnitQuaternion rotation_from_angles(const std::array<double, 3>& ypr_deg, const AxisOrder& order) {
  UnitQuaternion q;
  for (const int axis : order) {
    const double a = deg2rad(ypr_deg[axis]);
    switch (axis) {
      case 0: q = q * rot_y(a); break;
      case 1: q = q * rot_x(a); break;
      case 2: q = q * rot_z(a); break;
      default: throw ValidationError("rotation axis index must be 0, 1 or 2");
    }
  }
  return q;
}

TrajectoryPlan plan_trajectory(const VirtualCamera& camera, const TrajectoryConfig& cfg) {
  camera.validate();
  for (const int d : cfg.grid_dims) {
    if (d < 1) throw ValidationError("grid dimensions must be >= 1 per axis");
  }
  if (cfg.rotations_per_cell < 1) throw ValidationError("rotations_per_cell must be >= 1");
  if (cfg.rotation_range_deg < 0.0 || cfg.rotation_range_deg >= 90.0) {
    throw ValidationError("rotation range must be in [0, 90) degrees");
  }
  if (cfg.position_jitter < 0.0 || cfg.position_jitter > 1.0) {
    throw ValidationError("position_jitter must be in [0, 1]");
  }

  const Vec3 extent = cfg.workspace.max - cfg.workspace.min;
  const Vec3 cell_size(extent.x() / cfg.grid_dims[0], extent.y() / cfg.grid_dims[1], extent.z() / cfg.grid_dims[2]);

  TrajectoryPlan plan;
  plan.config = cfg;
  for (int k = 0; k < cfg.grid_dims[2]; ++k) {
    for (int j = 0; j < cfg.grid_dims[1]; ++j) {
      for (int i = 0; i < cfg.grid_dims[0]; ++i) {
        const Vec3 center = cfg.workspace.min + Vec3((i + 0.5) * cell_size.x(), (j + 0.5) * cell_size.y(),
                                                     (k + 0.5) * cell_size.z());
        for (int corner = 0; corner < 8; ++corner) {
          const Vec3 sign((corner & 1) ? 1.0 : -1.0, (corner & 2) ? 1.0 : -1.0, (corner & 4) ? 1.0 : -1.0);
          const Vec3 c = center + 0.5 * sign.cwiseProduct(cell_size);
          if (c.z() <= 0.0 || !camera.in_image(camera.project(c))) {
            std::ostringstream msg;
            msg << "grid cell (" << i << ", " << j << ", " << k << ") centred at (" << center.x() << ", "
                << center.y() << ", " << center.z() << ") mm leaves the camera frustum";
            throw ValidationError(msg.str());
          }
        }
        plan.cell_centers.push_back(center);
      }
    }
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  for (std::size_t cell = 0; cell < plan.cell_centers.size(); ++cell) {
    AxisOrder order{0, 1, 2};
    std::shuffle(order.begin(), order.end(), rng);
    plan.axis_orders.push_back(order);
    for (int r = 0; r < cfg.rotations_per_cell; ++r) {
      PlannedPose pp;
      pp.cell = static_cast<int>(cell);
      for (double& a : pp.yaw_pitch_roll_deg) a = cfg.rotation_range_deg * sym(rng);
      Vec3 offset;
      for (int a = 0; a < 3; ++a) offset[a] = 0.5 * cfg.position_jitter * cell_size[a] * sym(rng);
      pp.pose.rotation = rotation_from_angles(pp.yaw_pitch_roll_deg, order);
      pp.pose.translation = plan.cell_centers[cell] + offset;
      plan.poses.push_back(pp);
    }
  }
  return plan;
}

}  // namespace headpose
