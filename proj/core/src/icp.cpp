#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "headpose/errors.hpp"
#include "headpose/icp_tracker.hpp"

namespace headpose {

namespace {
constexpr double kMaxStepScale = 16.0;
// Residual treated as an exact fit (no escape attempt).
constexpr double kExactFitMm = 1e-6;
constexpr double kMaxQuadJumpPx = 3.0;
}

std::vector<Vec3> depth_to_pointcloud(const Frame& frame, const VirtualCamera& camera) {
  if (frame.width != camera.width || frame.height != camera.height) {
    throw ValidationError("frame size does not match the camera");
  }
  std::vector<Vec3> out;
  for (int v = 0; v < frame.height; ++v) {
    for (int u = 0; u < frame.width; ++u) {
      const double d = frame.at(Channel::Depth, v, u);
      if (d > 0.0) out.push_back(camera.backproject(u, v, d));
    }
  }
  return out;
}

std::vector<Vec3> depth_to_surface_points(const Frame& frame, const VirtualCamera& camera, int subdivisions) {
  if (subdivisions < 1) throw ValidationError("surface subdivisions must be >= 1");
  if (subdivisions == 1) return depth_to_pointcloud(frame, camera);
  if (frame.width != camera.width || frame.height != camera.height) {
    throw ValidationError("frame size does not match the camera");
  }
  std::vector<Vec3> out;
  const double step = 1.0 / subdivisions;
  for (int v = 0; v + 1 < frame.height; ++v) {
    for (int u = 0; u + 1 < frame.width; ++u) {
      const double d00 = frame.at(Channel::Depth, v, u);
      const double d01 = frame.at(Channel::Depth, v, u + 1);
      const double d10 = frame.at(Channel::Depth, v + 1, u);
      const double d11 = frame.at(Channel::Depth, v + 1, u + 1);
      if (!(d00 > 0.0 && d01 > 0.0 && d10 > 0.0 && d11 > 0.0)) continue;
      const double lo = std::min({d00, d01, d10, d11});
      const double hi = std::max({d00, d01, d10, d11});
      if (hi - lo > kMaxQuadJumpPx * lo / camera.fx) continue;  // occlusion edge
      for (int a = 0; a < subdivisions; ++a) {
        const double fy = a * step;
        for (int b = 0; b < subdivisions; ++b) {
          const double fx = b * step;
          const double d = (1 - fy) * ((1 - fx) * d00 + fx * d01) + fy * ((1 - fx) * d10 + fx * d11);
          out.push_back(camera.backproject(u + fx, v + fy, d));
        }
      }
    }
  }
  return out;
}

RigidTransform kabsch_align(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) throw ValidationError("kabsch_align needs equally many source and target points");
  if (src.size() < 3) throw ValidationError("kabsch_align needs at least 3 point pairs");
  const double n = static_cast<double>(src.size());
  Vec3 cs = Vec3::Zero();
  Vec3 cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= n;
  cd /= n;
  Mat3 h = Mat3::Zero();
  Mat3 scatter = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - cs;
    h += a * (dst[i] - cd).transpose();
    scatter += a * a.transpose();
  }
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter, Eigen::EigenvaluesOnly);
  const Vec3 lambda = eig.eigenvalues();  // ascending
  if (!(lambda(2) > 0.0) || lambda(1) <= 1e-12 * lambda(2)) {
    throw ValidationError("kabsch_align: source points are collinear or coincident");
  }
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = v * d * u.transpose();
  RigidTransform t;
  t.rotation = UnitQuaternion::from_matrix(r);
  t.translation = cd - t.rotation.rotate(cs);
  return t;
}

Template template_from_scan(std::span<const HeadScanSample> samples, double voxel_mm) {
  if (samples.size() < kMinTemplatePoints) {
    throw ValidationError("template needs at least " + std::to_string(kMinTemplatePoints) + " scan samples, got " +
                          std::to_string(samples.size()));
  }
  if (!(voxel_mm > 0.0)) throw ValidationError("voxel size must be positive");
  const auto points = compile_head_scan(samples);
  std::map<std::tuple<long, long, long>, std::pair<Vec3, int>> voxels;
  for (const auto& p : points) {
    const auto key = std::make_tuple(std::lround(std::floor(p.x() / voxel_mm)),
                                     std::lround(std::floor(p.y() / voxel_mm)),
                                     std::lround(std::floor(p.z() / voxel_mm)));
    auto& cell = voxels[key];
    if (cell.second == 0) cell.first = Vec3::Zero();
    cell.first += p;
    ++cell.second;
  }
  Template t;
  t.points.reserve(voxels.size());
  for (const auto& [key, cell] : voxels) t.points.push_back(cell.first / cell.second);
  if (t.points.size() < kMinTemplatePoints) {
    throw ValidationError("template has only " + std::to_string(t.points.size()) + " points after downsampling");
  }
  return t;
}

void save_template(const std::filesystem::path& path, const Template& t) { write_point_cloud(path, t.points); }

Template load_template(const std::filesystem::path& path) {
  Template t{read_point_cloud(path)};
  if (t.points.size() < kMinTemplatePoints) {
    throw ValidationError("template " + path.string() + " has fewer than " + std::to_string(kMinTemplatePoints) +
                          " points");
  }
  for (const auto& p : t.points) {
    if (!p.allFinite()) throw ValidationError("template " + path.string() + " has non-finite points");
  }
  return t;
}

RigidTransform initialize_from_roi(const Roi& roi, const Frame& frame, const VirtualCamera& camera,
                                   const Template& tmpl) {
  if (tmpl.points.empty()) throw ValidationError("empty template");
  const int u0 = std::max(0, static_cast<int>(std::ceil(roi.center_u - 0.5 * roi.width)));
  const int u1 = std::min(frame.width - 1, static_cast<int>(std::floor(roi.center_u + 0.5 * roi.width)));
  const int v0 = std::max(0, static_cast<int>(std::ceil(roi.center_v - 0.5 * roi.height)));
  const int v1 = std::min(frame.height - 1, static_cast<int>(std::floor(roi.center_v + 0.5 * roi.height)));
  std::array<std::vector<double>, 3> coords;
  for (int v = v0; v <= v1; ++v) {
    for (int u = u0; u <= u1; ++u) {
      const double d = frame.at(Channel::Depth, v, u);
      if (!(d > 0.0)) continue;
      const Vec3 p = camera.backproject(u, v, d);
      for (int k = 0; k < 3; ++k) coords[k].push_back(p[k]);
    }
  }
  if (coords[0].size() < static_cast<std::size_t>(kMinRoiDepthPixels)) {
    throw RuntimeError("ROI holds " + std::to_string(coords[0].size()) + " depth pixels, need " +
                       std::to_string(kMinRoiDepthPixels));
  }
  Vec3 median;
  for (int k = 0; k < 3; ++k) {
    auto& c = coords[k];
    const std::size_t mid = c.size() / 2;
    std::nth_element(c.begin(), c.begin() + mid, c.end());
    double m = c[mid];
    if (c.size() % 2 == 0) m = 0.5 * (m + *std::max_element(c.begin(), c.begin() + mid));
    median[k] = m;
  }
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : tmpl.points) centroid += p;
  centroid /= static_cast<double>(tmpl.points.size());
  return RigidTransform::from_translation(median - centroid);
}

void IcpConfig::validate() const {
  if (max_iterations < 1) throw ValidationError("ICP max_iterations must be >= 1");
  if (!(converge_mm >= 0.0) || !(converge_deg >= 0.0)) throw ValidationError("ICP convergence thresholds must be >= 0");
  if (!(trim_fraction >= 0.0 && trim_fraction <= 0.5)) throw ValidationError("ICP trim fraction must be in [0, 0.5]");
  if (!(max_correspondence_mm > 0.0)) throw ValidationError("ICP max correspondence distance must be positive");
  if (!(escape_deg >= 0.0 && escape_deg <= 45.0)) throw ValidationError("ICP escape_deg must be in [0, 45]");
  if (scene_subdivisions < 1) throw ValidationError("ICP scene_subdivisions must be >= 1");
}

IcpResult icp_register(const Template& tmpl, const KdTree& scene, const RigidTransform& init, const IcpConfig& cfg) {
  cfg.validate();
  const std::size_t n = tmpl.points.size();
  const auto keep = static_cast<std::size_t>(std::floor((1.0 - cfg.trim_fraction) * n));
  if (keep < 3) throw ValidationError("ICP needs at least 3 template points after trimming");
  if (scene.size() == 0) throw ValidationError("ICP scene is empty");
  const double gate2 = cfg.max_correspondence_mm * cfg.max_correspondence_mm;

  std::vector<KdTree::Hit> hits(n);
  std::vector<std::size_t> rank(n);
  // Nearest neighbours for the pose, ranks by distance (index breaks ties)
  // and returns the capped trimmed residual.
  auto evaluate = [&](const RigidTransform& pose) {
    for (std::size_t i = 0; i < n; ++i) hits[i] = scene.nearest(apply(pose, tmpl.points[i]));
    std::iota(rank.begin(), rank.end(), 0);
    const auto sorted_end = cfg.untrimmed_candidate ? rank.end() : rank.begin() + keep;
    std::partial_sort(rank.begin(), sorted_end, rank.end(), [&](std::size_t a, std::size_t b) {
      return hits[a].dist2 < hits[b].dist2 || (hits[a].dist2 == hits[b].dist2 && a < b);
    });
    double sum = 0.0;
    for (std::size_t k = 0; k < keep; ++k) sum += std::min(hits[rank[k]].dist2, gate2);
    return std::sqrt(sum / keep);
  };

  Vec3 centroid = Vec3::Zero();
  for (const auto& p : tmpl.points) centroid += p;
  centroid /= static_cast<double>(n);

  IcpResult res;
  res.pose = init;
  res.residual_history.push_back(evaluate(init));
  std::vector<Vec3> src;
  std::vector<Vec3> dst;
  std::vector<Vec3> wide_src;
  std::vector<Vec3> wide_dst;
  std::vector<std::pair<std::size_t, KdTree::Hit>> ranked(n);
  int escapes = 0;
  while (res.iterations < cfg.max_iterations) {
    src.clear();
    dst.clear();
    for (std::size_t k = 0; k < keep; ++k) {
      const auto& h = hits[rank[k]];
      if (h.dist2 > gate2) break;
      src.push_back(tmpl.points[rank[k]]);
      dst.push_back(scene.point(h.index));
    }
    for (std::size_t k = 0; k < n; ++k) ranked[k] = {rank[k], hits[rank[k]]};
    res.inliers = src.size();
    if (src.size() < 3) {
      res.message = "only " + std::to_string(src.size()) + " correspondences within " +
                    std::to_string(cfg.max_correspondence_mm) + " mm";
      break;
    }
    RigidTransform next;
    try {
      next = kabsch_align(src, dst);
    } catch (const ValidationError& e) {
      res.message = e.what();
      break;
    }
    ++res.iterations;
    double r_next = evaluate(next);
    bool hits_current = true;
    if (cfg.untrimmed_candidate && keep < n) {
      // The trimmed set can lock onto a partial fit; steps from wider
      // correspondence sets are kept when they lower the trimmed residual.
      for (const std::size_t wide : {(keep + n) / 2, n}) {
        wide_src.clear();
        wide_dst.clear();
        for (std::size_t k = 0; k < wide; ++k) {
          const auto& h = ranked[k];
          if (h.second.dist2 > gate2) break;
          wide_src.push_back(tmpl.points[h.first]);
          wide_dst.push_back(scene.point(h.second.index));
        }
        if (wide_src.size() <= src.size()) continue;
        try {
          const RigidTransform candidate = kabsch_align(wide_src, wide_dst);
          const double r = evaluate(candidate);
          hits_current = r < r_next;
          if (hits_current) {
            next = candidate;
            r_next = r;
          }
        } catch (const ValidationError&) {
        }
      }
    }
    if (cfg.extrapolate) {
      // Stretch the step while the residual keeps dropping.
      const RigidTransform delta = compose(invert(res.pose), next);
      const AxisAngle aa = to_axis_angle(delta.rotation);
      for (double scale = 2.0; scale <= kMaxStepScale; scale *= 2.0) {
        const RigidTransform trial =
            compose(res.pose, RigidTransform{UnitQuaternion::from_axis_angle(aa.axis, deg2rad(scale * aa.angle_deg)),
                                             scale * delta.translation});
        const double r_trial = evaluate(trial);
        if (!(r_trial < r_next)) {
          hits_current = false;
          break;
        }
        r_next = r_trial;
        next = trial;
        hits_current = true;
      }
    }
    if (!hits_current) evaluate(next);
    const auto step = pose_error(res.pose, next);
    res.pose = next;
    res.residual_history.push_back(r_next);
    if (step.position_mm < cfg.converge_mm && step.orientation_deg < cfg.converge_deg) {
      if (cfg.escape_deg > 0.0 && r_next > kExactFitMm && res.iterations < cfg.max_iterations) {
        // Kick the pose about the template centroid and reconverge; the
        // result replaces the current pose only if its residual is lower.
        const Vec3 c = apply(res.pose, centroid);
        const Vec3 axis = Vec3::Unit(escapes % 3);
        ++escapes;
        const UnitQuaternion q = UnitQuaternion::from_axis_angle(axis, deg2rad(cfg.escape_deg));
        IcpConfig sub = cfg;
        sub.escape_deg = 0.0;
        sub.max_iterations = cfg.max_iterations - res.iterations;
        const IcpResult hop = icp_register(tmpl, scene, compose(RigidTransform{q, c - q.rotate(c)}, res.pose), sub);
        res.iterations += hop.iterations;
        if (hop.residual_mm < r_next) {
          res.pose = hop.pose;
          for (const double r : hop.residual_history) {
            if (r < res.residual_history.back()) res.residual_history.push_back(r);
          }
          evaluate(res.pose);
          continue;
        }
      }
      res.converged = true;
      break;
    }
  }
  if (!res.converged && res.message.empty()) res.message = "iteration limit reached";
  res.residual_mm = res.residual_history.back();
  return res;
}

IcpResult icp_register(const Template& tmpl, std::span<const Vec3> scene, const RigidTransform& init,
                       const IcpConfig& cfg) {
  return icp_register(tmpl, KdTree(scene), init, cfg);
}

}  // namespace headpose
