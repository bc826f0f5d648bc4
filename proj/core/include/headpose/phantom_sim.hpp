#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "headpose/geometry.hpp"
#include "headpose/image.hpp"

namespace headpose {

struct Rgb {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
};

/// Procedural head phantom in its own frame: x right, y down, z towards the
/// back of the head. The face looks along -z, so an identity camera->phantom
/// rotation presents the face to the camera.
struct HeadPhantom {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<Rgb> albedo;
  std::vector<std::uint8_t> is_face;

  std::size_t size() const { return points.size(); }
  std::vector<Vec3> face_points() const;
};

inline constexpr int kMinPhantomPoints = 5000;

/// Ellipsoid cranium with nose, brow ridge, eye sockets, lips and chin.
/// Throws ValidationError if resolution < kMinPhantomPoints.
HeadPhantom build_phantom(std::uint64_t seed, int resolution = 20000);

/// Surface point of the phantom along a unit direction from its centre.
/// Exposed for tests that need the continuous surface.
Vec3 phantom_surface(const Vec3& direction);

struct VirtualCamera {
  double fx = 114.0;
  double fy = 114.0;
  double cx = 79.5;
  double cy = 59.5;
  int width = 160;
  int height = 120;
  double sigma0_mm = 1.5;  // depth noise at 1 m; sigma(z) = sigma0 * (z / 1000)^2
  RigidTransform camera_to_world;

  void validate() const;
  /// Pinhole projection of a camera-frame point (z > 0 assumed).
  Eigen::Vector2d project(const Vec3& p) const;
  Vec3 backproject(double u, double v, double depth) const;
  bool in_image(const Eigen::Vector2d& uv) const;
};

void to_json(nlohmann::json& j, const VirtualCamera& c);
void from_json(const nlohmann::json& j, VirtualCamera& c);

struct TrajectoryConfig {
  WorkspaceBounds workspace{Vec3(-120.0, -80.0, 500.0), Vec3(120.0, 80.0, 900.0)};
  std::array<int, 3> grid_dims{3, 3, 2};
  int rotations_per_cell = 25;
  double rotation_range_deg = 20.0;
  /// Fraction of a cell over which positions are uniformly spread around
  /// the cell centre (0 = exact centres).
  double position_jitter = 1.0;
  std::uint64_t seed = 1;
};

struct PlannedPose {
  RigidTransform pose;  // camera -> phantom
  int cell = 0;
  std::array<double, 3> yaw_pitch_roll_deg{};
};

/// Rotation axes applied per cell; 0 = yaw (y), 1 = pitch (x), 2 = roll (z).
using AxisOrder = std::array<int, 3>;

struct TrajectoryPlan {
  std::vector<PlannedPose> poses;
  std::vector<Vec3> cell_centers;
  std::vector<AxisOrder> axis_orders;
  TrajectoryConfig config;
};

/// Grid over the workspace, rotations_per_cell random yaw/pitch/roll
/// combinations per cell with a randomized axis order per cell. Throws
/// ValidationError naming the first cell whose extent leaves the image.
TrajectoryPlan plan_trajectory(const VirtualCamera& camera, const TrajectoryConfig& cfg);

/// Rotation from yaw/pitch/roll applied in `order` (first entry outermost).
UnitQuaternion rotation_from_angles(const std::array<double, 3>& yaw_pitch_roll_deg, const AxisOrder& order);

inline constexpr int kSplatRadiusPx = 1;

/// Surfel splat renderer: every front-facing point covers the pixels within
/// kSplatRadiusPx of its projection with its tangent plane. Visibility is a
/// z-buffer; among visible surfels the one projecting nearest the pixel
/// centre sets depth (plane depth along the pixel ray plus noise), colour and
/// IR. Throws RuntimeError("empty frame") if nothing is drawn.
Frame render_frame(const HeadPhantom& phantom, const VirtualCamera& camera, const RigidTransform& pose,
                   std::uint64_t noise_seed);

/// Synthetic head scan: a pointer probe touching `count` face points while
/// the head (and its rigidly attached marker) moves. The marker frame equals
/// the phantom frame. pointer_noise_mm perturbs the probe tip.
std::vector<HeadScanSample> simulate_head_scan(const HeadPhantom& phantom, int count, std::uint64_t seed,
                                               double pointer_noise_mm = 0.0);

struct FrameRecord {
  int id = 0;
  std::string file;
  RigidTransform pose;
  std::uint64_t noise_seed = 0;
  int cell = 0;
};

struct Dataset {
  std::filesystem::path dir;
  VirtualCamera camera;
  WorkspaceBounds bounds;
  std::vector<FrameRecord> frames;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
  DetectorChannel detector_channel = DetectorChannel::Ir;
  std::uint64_t phantom_seed = 0;
  int phantom_resolution = 0;

  const FrameRecord& record(int id) const;
  /// Loads pixels and attaches id, pose and seed from the manifest.
  Frame load_frame(int id) const;
};

struct DatasetOptions {
  std::uint64_t split_seed = 7;
  std::uint64_t noise_seed = 11;
  double test_fraction = 0.2;
  double val_fraction = 0.1;  // of the total, taken from the non-test part
  std::optional<int> max_frames;  // subsample the plan, evenly spaced
  DetectorChannel detector_channel = DetectorChannel::Ir;
  std::uint64_t phantom_seed = 0;
  int phantom_resolution = 0;
};

/// Exact split counts for n frames: {train, val, test}.
std::array<int, 3> split_counts(int n, double test_fraction, double val_fraction);

/// Renders every planned pose, writes frame files plus manifest.json and
/// returns the loaded dataset description.
Dataset generate_dataset(const HeadPhantom& phantom, const VirtualCamera& camera, const TrajectoryPlan& plan,
                         const std::filesystem::path& out_dir, const DatasetOptions& options = {});

Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace headpose
