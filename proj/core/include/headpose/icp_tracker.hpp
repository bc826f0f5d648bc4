#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headpose/geometry.hpp"
#include "headpose/image.hpp"
#include "headpose/phantom_sim.hpp"
#include "headpose/roi_detector.hpp"

namespace headpose {

/// Exact 3-D nearest-neighbour index. Ties are broken by the lowest point index.
class KdTree {
 public:
  struct Hit {
    std::size_t index = 0;
    double dist2 = 0.0;
  };

  KdTree() = default;
  explicit KdTree(std::span<const Vec3> points);

  std::size_t size() const { return points_.size(); }
  const Vec3& point(std::size_t i) const { return points_[i]; }
  /// Throws ValidationError on an empty tree.
  Hit nearest(const Vec3& q) const;

 private:
  struct Node {
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t left = -1;
    std::int32_t right = -1;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end);
  void search(std::int32_t node, const Vec3& q, Hit& best) const;

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

/// Camera-frame points for every pixel with depth > 0.
std::vector<Vec3> depth_to_pointcloud(const Frame& frame, const VirtualCamera& camera);

/// Bilinear depth surface sampled subdivisions^2 times per 2x2 pixel quad.
/// Quads with a missing pixel or a depth jump over three pixel footprints
/// are skipped. subdivisions = 1 is depth_to_pointcloud.
std::vector<Vec3> depth_to_surface_points(const Frame& frame, const VirtualCamera& camera, int subdivisions);

/// Least-squares rigid transform mapping src onto dst. Throws
/// ValidationError for fewer than 3 pairs or collinear sources.
RigidTransform kabsch_align(std::span<const Vec3> src, std::span<const Vec3> dst);

struct Template {
  std::vector<Vec3> points;  // phantom (marker) frame, mm
};

inline constexpr std::size_t kMinTemplatePoints = 100;
inline constexpr double kTemplateVoxelMm = 3.0;

/// Compiles the scan and keeps one centroid per occupied voxel, ordered by
/// voxel index. Throws ValidationError below kMinTemplatePoints samples or
/// points.
Template template_from_scan(std::span<const HeadScanSample> samples, double voxel_mm = kTemplateVoxelMm);

void save_template(const std::filesystem::path& path, const Template& t);
Template load_template(const std::filesystem::path& path);

inline constexpr int kMinRoiDepthPixels = 20;

/// Identity rotation; translation moves the template centroid onto the
/// componentwise median of the back-projected depth inside the ROI.
/// Throws RuntimeError when the ROI holds fewer than kMinRoiDepthPixels.
RigidTransform initialize_from_roi(const Roi& roi, const Frame& frame, const VirtualCamera& camera,
                                   const Template& tmpl);

struct IcpConfig {
  int max_iterations = 50;
  double converge_mm = 0.01;
  double converge_deg = 0.01;
  double trim_fraction = 0.2;
  double max_correspondence_mm = 30.0;
  /// Try 2x, 4x, ... multiples of each update and keep the lowest residual.
  bool extrapolate = true;
  /// Also try the Kabsch step over all gated pairs and keep it when it
  /// lowers the trimmed residual.
  bool untrimmed_candidate = true;
  /// On convergence, rotate the pose by this angle about the template
  /// centroid and reconverge, keeping the result if its residual is lower;
  /// 0 disables.
  double escape_deg = 2.0;
  /// Scene sampling used by register_frame and track_sequence.
  int scene_subdivisions = 3;

  void validate() const;
};

struct IcpResult {
  RigidTransform pose;
  int iterations = 0;
  /// sqrt of the mean of min(d, max_correspondence)^2 over the
  /// floor((1 - trim) * N) closest template points.
  double residual_mm = 0.0;
  bool converged = false;
  std::vector<double> residual_history;  // one entry per evaluated pose
  std::size_t inliers = 0;
  std::string message;
};

IcpResult icp_register(const Template& tmpl, const KdTree& scene, const RigidTransform& init,
                       const IcpConfig& cfg = {});
IcpResult icp_register(const Template& tmpl, std::span<const Vec3> scene, const RigidTransform& init,
                       const IcpConfig& cfg = {});

using RoiSource = std::function<std::optional<Roi>(const Frame&)>;

struct TrackedFrame {
  int frame_id = 0;
  RigidTransform pose;
  double residual_mm = 0.0;
  double time_ms = 0.0;
  int iterations = 0;
  bool converged = false;
  bool reinitialized = false;
};

struct TrackOptions {
  IcpConfig icp;
  double divergence_mm = 8.0;  // residual above this triggers re-initialization
};

/// Frame 0 starts from the ROI; later frames from the previous pose. Throws
/// RuntimeError if the ROI source fails on frame 0.
std::vector<TrackedFrame> track_sequence(const Template& tmpl, std::span<const Frame> frames,
                                         const VirtualCamera& camera, const RoiSource& roi_source,
                                         const TrackOptions& options = {});

/// Detection, initialization and registration of a single frame.
TrackedFrame register_frame(const Template& tmpl, const Frame& frame, const VirtualCamera& camera,
                            const RoiSource& roi_source, const IcpConfig& cfg = {});

/// frame_id,qw,qx,qy,qz,tx,ty,tz,residual_mm,time_ms
void write_tracking_csv(const std::filesystem::path& path, std::span<const TrackedFrame> frames);

}  // namespace headpose
