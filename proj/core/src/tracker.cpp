#include <chrono>
#include <fstream>
#include <iomanip>

#include "headpose/errors.hpp"
#include "headpose/icp_tracker.hpp"

namespace headpose {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

TrackedFrame to_tracked(const Frame& frame, const IcpResult& r) {
  TrackedFrame t;
  t.frame_id = frame.id;
  t.pose = r.pose;
  t.residual_mm = r.residual_mm;
  t.iterations = r.iterations;
  t.converged = r.converged;
  return t;
}

}  // namespace

TrackedFrame register_frame(const Template& tmpl, const Frame& frame, const VirtualCamera& camera,
                            const RoiSource& roi_source, const IcpConfig& cfg) {
  const auto start = Clock::now();
  const auto roi = roi_source(frame);
  if (!roi) throw RuntimeError("no face detected in frame " + std::to_string(frame.id));
  const auto init = initialize_from_roi(*roi, frame, camera, tmpl);
  const KdTree scene(depth_to_surface_points(frame, camera, cfg.scene_subdivisions));
  auto out = to_tracked(frame, icp_register(tmpl, scene, init, cfg));
  out.time_ms = elapsed_ms(start);
  return out;
}

std::vector<TrackedFrame> track_sequence(const Template& tmpl, std::span<const Frame> frames,
                                         const VirtualCamera& camera, const RoiSource& roi_source,
                                         const TrackOptions& options) {
  options.icp.validate();
  std::vector<TrackedFrame> out;
  out.reserve(frames.size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const Frame& frame = frames[k];
    const auto start = Clock::now();
    const KdTree scene(depth_to_surface_points(frame, camera, options.icp.scene_subdivisions));
    TrackedFrame t;
    if (k == 0) {
      const auto roi = roi_source(frame);
      if (!roi) throw RuntimeError("tracking aborted: no face detected in frame 0 (id " + std::to_string(frame.id) + ")");
      t = to_tracked(frame, icp_register(tmpl, scene, initialize_from_roi(*roi, frame, camera, tmpl), options.icp));
    } else {
      t = to_tracked(frame, icp_register(tmpl, scene, out.back().pose, options.icp));
      if (t.residual_mm > options.divergence_mm) {
        if (const auto roi = roi_source(frame)) {
          t = to_tracked(frame, icp_register(tmpl, scene, initialize_from_roi(*roi, frame, camera, tmpl), options.icp));
          t.reinitialized = true;
        }
      }
    }
    t.time_ms = elapsed_ms(start);
    out.push_back(t);
  }
  return out;
}

void write_tracking_csv(const std::filesystem::path& path, std::span<const TrackedFrame> frames) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << "frame_id,qw,qx,qy,qz,tx,ty,tz,residual_mm,time_ms\n" << std::setprecision(17);
  for (const auto& f : frames) {
    const auto q = f.pose.rotation.wxyz();
    const auto& t = f.pose.translation;
    os << f.frame_id << ',' << q[0] << ',' << q[1] << ',' << q[2] << ',' << q[3] << ',' << t.x() << ',' << t.y()
       << ',' << t.z() << ',' << f.residual_mm << ',' << f.time_ms << '\n';
  }
}

}  // namespace headpose
