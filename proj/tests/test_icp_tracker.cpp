#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "headpose/errors.hpp"
#include "headpose/icp_tracker.hpp"
#include "test_util.hpp"

using namespace headpose;

namespace {

std::vector<Vec3> random_cloud(std::mt19937_64& rng, std::size_t n, double extent) {
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  return pts;
}

RigidTransform small_perturbation(std::mt19937_64& rng, double mm, double deg) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec3 axis(u(rng), u(rng), u(rng));
  Vec3 dir(u(rng), u(rng), u(rng));
  return {UnitQuaternion::from_axis_angle(axis.normalized(), deg2rad(deg)), mm * dir.normalized()};
}

void expect_monotone(const IcpResult& r) {
  for (std::size_t i = 1; i < r.residual_history.size(); ++i) {
    EXPECT_LE(r.residual_history[i], r.residual_history[i - 1] + 1e-9) << "step " << i;
  }
}

const HeadPhantom& phantom() {
  static const HeadPhantom p = build_phantom(1, 20000);
  return p;
}

const Template& face_template() {
  static const Template t = template_from_scan(simulate_head_scan(phantom(), 3000, 21));
  return t;
}

}  // namespace

TEST(KdTree, MatchesBruteForce) {
  std::mt19937_64 rng(1);
  const auto pts = random_cloud(rng, 2000, 100.0);
  const KdTree tree(pts);
  for (const auto& q : random_cloud(rng, 1000, 120.0)) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      if ((pts[i] - q).squaredNorm() < (pts[best] - q).squaredNorm()) best = i;
    }
    const auto hit = tree.nearest(q);
    EXPECT_EQ(hit.index, best);
    EXPECT_EQ(hit.dist2, (pts[best] - q).squaredNorm());
  }
}

TEST(KdTree, TiesGoToLowestIndex) {
  // Integer lattice with duplicates: many equidistant candidates.
  std::vector<Vec3> pts;
  for (int rep = 0; rep < 3; ++rep) {
    for (int x = 0; x < 6; ++x) {
      for (int y = 0; y < 6; ++y) {
        for (int z = 0; z < 6; ++z) pts.emplace_back(x, y, z);
      }
    }
  }
  const KdTree tree(pts);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> coord(-1, 12);
  for (int k = 0; k < 1000; ++k) {
    const Vec3 q(coord(rng) * 0.5, coord(rng) * 0.5, coord(rng) * 0.5);
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      if ((pts[i] - q).squaredNorm() < (pts[best] - q).squaredNorm()) best = i;
    }
    EXPECT_EQ(tree.nearest(q).index, best);
  }
}

TEST(KdTree, EmptyRejected) { EXPECT_THROW(KdTree().nearest(Vec3::Zero()), ValidationError); }

TEST(DepthToPointcloud, PrincipalPointAndZeroDepth) {
  VirtualCamera cam;
  cam.cx = 80.0;
  cam.cy = 60.0;
  Frame f = Frame::blank(cam.height, cam.width);
  f.at(Channel::Depth, 60, 80) = 500.0f;
  const auto pts = depth_to_pointcloud(f, cam);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts[0], Vec3(0, 0, 500));
}

TEST(DepthToPointcloud, PixelFormula) {
  const VirtualCamera cam;
  Frame f = Frame::blank(cam.height, cam.width);
  f.at(Channel::Depth, 10, 150) = 800.0f;
  const auto pts = depth_to_pointcloud(f, cam);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_NEAR(pts[0].x(), (150 - cam.cx) * 800.0 / cam.fx, 1e-9);
  EXPECT_NEAR(pts[0].y(), (10 - cam.cy) * 800.0 / cam.fy, 1e-9);
  EXPECT_EQ(pts[0].z(), 800.0);
}

TEST(DepthToPointcloud, RenderedSurfaceRecovered) {
  const VirtualCamera cam;
  auto quiet = cam;
  quiet.sigma0_mm = 0.0;
  const auto pose = RigidTransform::from_translation(Vec3(10, -5, 650));
  const auto frame = render_frame(phantom(), quiet, pose, 1);
  const auto pts = depth_to_pointcloud(frame, quiet);
  ASSERT_GT(pts.size(), 500u);
  // Every recovered point lies within the splat footprint of a phantom point:
  // lateral error at most sqrt(2) pixels at its depth, plus float rounding.
  std::vector<Vec3> world;
  for (const auto& p : phantom().points) world.push_back(apply(pose, p));
  const KdTree tree(world);
  for (const auto& p : pts) {
    const double bound = 1.5 * std::sqrt(2.0) * p.z() / cam.fx + 0.01;
    EXPECT_LT(std::sqrt(tree.nearest(p).dist2), bound);
  }
}

TEST(Kabsch, IdentityOnEqualSets) {
  std::mt19937_64 rng(3);
  const auto pts = random_cloud(rng, 20, 50.0);
  const auto t = kabsch_align(pts, pts);
  const auto e = pose_error(t, RigidTransform::identity());
  EXPECT_LT(e.position_mm, 1e-9);
  EXPECT_LT(e.orientation_deg, 1e-9);
}

TEST(Kabsch, RecoversKnownTransform) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto src = random_cloud(rng, 30, 100.0);
    const auto t = test::random_transform(rng);
    std::vector<Vec3> dst;
    for (const auto& p : src) dst.push_back(apply(t, p));
    const auto est = kabsch_align(src, dst);
    const Mat4 m = test::matrix_oracle(est) - test::matrix_oracle(t);
    EXPECT_LT(m.cwiseAbs().maxCoeff(), 1e-9);
    const auto e = pose_error(est, t);
    EXPECT_LT(e.position_mm, 1e-6);
    EXPECT_LT(e.orientation_deg, 1e-6);
  }
}

TEST(Kabsch, ReflectionGivesProperRotation) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto src = random_cloud(rng, 12, 50.0);
    std::vector<Vec3> dst;
    for (const auto& p : src) dst.emplace_back(-p.x(), p.y(), p.z());
    const Mat3 r = kabsch_align(src, dst).rotation.to_matrix();
    EXPECT_NEAR(r.determinant(), 1.0, 1e-9);
    EXPECT_LT((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Kabsch, DegenerateInputRejected) {
  const std::vector<Vec3> two{Vec3(0, 0, 0), Vec3(1, 0, 0)};
  EXPECT_THROW(kabsch_align(two, two), ValidationError);
  const std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2), Vec3(5, 5, 5)};
  EXPECT_THROW(kabsch_align(line, line), ValidationError);
  const std::vector<Vec3> same(5, Vec3(1, 2, 3));
  EXPECT_THROW(kabsch_align(same, same), ValidationError);
  const std::vector<Vec3> three{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  EXPECT_THROW(kabsch_align(three, two), ValidationError);
}

TEST(Icp, NoiselessRecoveryFromPerturbedInit) {
  std::mt19937_64 rng(6);
  const auto& tmpl = face_template();
  for (int trial = 0; trial < 10; ++trial) {
    const RigidTransform truth{UnitQuaternion::from_axis_angle(Vec3(0, 1, 0), deg2rad(15.0 * trial - 60.0)),
                               Vec3(20.0 * trial - 100.0, 10.0, 700.0)};
    std::vector<Vec3> scene;
    for (const auto& p : tmpl.points) scene.push_back(apply(truth, p));
    const auto init = compose(truth, small_perturbation(rng, 10.0, 10.0));
    IcpConfig cfg;
    cfg.trim_fraction = 0.0;
    const auto r = icp_register(tmpl, scene, init, cfg);
    EXPECT_TRUE(r.converged) << r.message;
    const auto e = pose_error(r.pose, truth);
    EXPECT_LT(e.position_mm, 0.1);
    EXPECT_LT(e.orientation_deg, 0.1);
    expect_monotone(r);
  }
}

TEST(Icp, ExactInitIsFixedPoint) {
  const auto& tmpl = face_template();
  const RigidTransform truth{UnitQuaternion::from_axis_angle(Vec3(1, 1, 0).normalized(), 0.2), Vec3(5, 5, 600)};
  std::vector<Vec3> scene;
  for (const auto& p : tmpl.points) scene.push_back(apply(truth, p));
  const auto r = icp_register(tmpl, scene, truth);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 2);
  EXPECT_LT(r.residual_mm, 1e-9);
}

TEST(Icp, TrimmedRobustToOutliers) {
  std::mt19937_64 rng(7);
  const auto& tmpl = face_template();
  const RigidTransform truth{UnitQuaternion::from_axis_angle(Vec3(0, 0, 1), deg2rad(12.0)), Vec3(-30, 20, 750)};
  std::vector<Vec3> scene;
  for (const auto& p : tmpl.points) scene.push_back(apply(truth, p));
  // 20% outliers scattered in a shell 3..25 mm off the surface.
  std::uniform_real_distribution<double> off(3.0, 25.0);
  std::uniform_int_distribution<std::size_t> pick(0, scene.size() - 1);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t outliers = scene.size() / 4;  // 20% of the final cloud
  for (std::size_t k = 0; k < outliers; ++k) {
    Vec3 dir(n(rng), n(rng), n(rng));
    scene.push_back(scene[pick(rng)] + off(rng) * dir.normalized());
  }
  const auto init = compose(truth, small_perturbation(rng, 8.0, 8.0));
  const auto r = icp_register(tmpl, scene, init);
  const auto e = pose_error(r.pose, truth);
  EXPECT_LT(e.position_mm, 1.0);
  EXPECT_LT(e.orientation_deg, 1.0);
  expect_monotone(r);
}

TEST(Icp, ResidualMonotoneOnRenderedFrames) {
  std::mt19937_64 rng(8);
  const VirtualCamera cam;
  const auto& tmpl = face_template();
  for (int trial = 0; trial < 8; ++trial) {
    const RigidTransform truth{rotation_from_angles({10.0 * trial - 35, 5.0, -3.0}, {0, 1, 2}),
                               Vec3(15.0 * trial - 50, 0, 600 + 30.0 * trial)};
    const auto frame = render_frame(phantom(), cam, truth, 50 + trial);
    const auto scene = depth_to_pointcloud(frame, cam);
    const auto init = compose(truth, small_perturbation(rng, 15.0, 15.0));
    const auto r = icp_register(tmpl, scene, init);
    expect_monotone(r);
    EXPECT_LE(r.iterations, IcpConfig{}.max_iterations);
    EXPECT_GE(r.residual_mm, 0.0);
  }
}

TEST(Icp, Equivariant) {
  std::mt19937_64 rng(9);
  const auto& tmpl = face_template();
  const RigidTransform truth{UnitQuaternion::from_axis_angle(Vec3(0, 1, 0), 0.1), Vec3(0, 0, 650)};
  std::vector<Vec3> scene;
  for (const auto& p : tmpl.points) scene.push_back(apply(truth, p));
  const auto init = compose(truth, small_perturbation(rng, 5.0, 5.0));
  const auto a = icp_register(tmpl, scene, init);
  const auto g = test::random_transform(rng, 200.0);
  std::vector<Vec3> moved;
  for (const auto& p : scene) moved.push_back(apply(g, p));
  const auto b = icp_register(tmpl, moved, compose(g, init));
  const auto e = pose_error(b.pose, compose(g, a.pose));
  EXPECT_LT(e.position_mm, 1e-6);
  EXPECT_LT(e.orientation_deg, 1e-6);
}

TEST(Icp, AllCorrespondencesRejected) {
  const auto& tmpl = face_template();
  const std::vector<Vec3> far{Vec3(1e4, 0, 0), Vec3(1e4, 1, 0), Vec3(1e4, 0, 1)};
  const auto r = icp_register(tmpl, far, RigidTransform::identity());
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_FALSE(r.message.empty());
}

TEST(Icp, ConfigValidated) {
  IcpConfig cfg;
  cfg.trim_fraction = 0.6;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.max_iterations = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.scene_subdivisions = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(DepthToSurface, SubdividedPlaneStaysOnPlane) {
  const VirtualCamera cam;
  Frame f = Frame::blank(cam.height, cam.width);
  // Depth of the plane z = 600 + 0.2 x along each pixel ray.
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) {
      const double rx = (u - cam.cx) / cam.fx;
      f.at(Channel::Depth, v, u) = static_cast<float>(600.0 / (1.0 - 0.2 * rx));
    }
  }
  EXPECT_EQ(depth_to_surface_points(f, cam, 1).size(), std::size_t(cam.width) * cam.height);
  const auto pts = depth_to_surface_points(f, cam, 3);
  EXPECT_EQ(pts.size(), std::size_t(cam.width - 1) * (cam.height - 1) * 9);
  for (const auto& p : pts) EXPECT_NEAR(p.z(), 600.0 + 0.2 * p.x(), 0.05);
}

TEST(DepthToSurface, SkipsHolesAndOcclusionEdges) {
  const VirtualCamera cam;
  Frame f = Frame::blank(cam.height, cam.width);
  for (int v = 10; v < 12; ++v) {
    f.at(Channel::Depth, v, 20) = 700.0f;
    f.at(Channel::Depth, v, 21) = 700.0f;
    f.at(Channel::Depth, v, 40) = 700.0f;
    f.at(Channel::Depth, v, 41) = 800.0f;
  }
  const auto pts = depth_to_surface_points(f, cam, 2);
  EXPECT_EQ(pts.size(), 4u);
  for (const auto& p : pts) EXPECT_NEAR(p.z(), 700.0, 1e-9);
}

TEST(TemplateFromScan, WithinOneMillimetreOfSurface) {
  const auto& tmpl = face_template();
  EXPECT_GE(tmpl.points.size(), kMinTemplatePoints);
  // One-sided Hausdorff distance to a dense sampling of the same surface.
  const auto dense = build_phantom(1, 400000);
  const KdTree surface(dense.points);
  double worst = 0.0;
  for (const auto& p : tmpl.points) worst = std::max(worst, std::sqrt(surface.nearest(p).dist2));
  EXPECT_LT(worst, 1.0);
}

TEST(TemplateFromScan, IdentityMarkerGivesDownsampledPointerTips) {
  std::vector<HeadScanSample> samples;
  // Tips on a 1 mm lattice; each 3 mm voxel holds 27 tips around its centre.
  for (int x = 0; x < 30; ++x) {
    for (int y = 0; y < 30; ++y) {
      for (int z = 0; z < 3; ++z) {
        samples.push_back({RigidTransform::identity(), RigidTransform::from_translation(Vec3(x, y, z))});
      }
    }
  }
  const auto t = template_from_scan(samples);
  ASSERT_EQ(t.points.size(), 100u);
  for (std::size_t i = 0; i < t.points.size(); ++i) {
    const Vec3 centre(3.0 * (i / 10) + 1.0, 3.0 * (i % 10) + 1.0, 1.0);
    EXPECT_LT((t.points[i] - centre).norm(), 1e-12) << i;
  }
}

TEST(TemplateFromScan, DeterministicAndValidated) {
  const auto samples = simulate_head_scan(phantom(), 500, 3);
  const auto a = template_from_scan(samples);
  const auto b = template_from_scan(samples);
  EXPECT_EQ(a.points, b.points);
  EXPECT_THROW(template_from_scan(std::span(samples).first(99)), ValidationError);
}

TEST(TemplateFromScan, FileRoundTrip) {
  const auto dir = test::temp_dir("template");
  save_template(dir / "t.hppc", face_template());
  const auto back = load_template(dir / "t.hppc");
  ASSERT_EQ(back.points.size(), face_template().points.size());
  for (std::size_t i = 0; i < back.points.size(); ++i) {
    EXPECT_LT((back.points[i] - face_template().points[i]).norm(), 1e-4);
  }
  std::filesystem::remove_all(dir);
}

TEST(InitializeFromRoi, CentredFrameWithinTwentyMillimetres) {
  const VirtualCamera cam;
  const auto truth = RigidTransform::from_translation(Vec3(0, 0, 700));
  const auto frame = render_frame(phantom(), cam, truth, 2);
  const auto roi = oracle_roi(cam, truth, phantom());
  const auto init = initialize_from_roi(roi, frame, cam, face_template());
  EXPECT_LT(pose_error(init, truth).position_mm, 20.0);
  EXPECT_EQ(pose_error(init, truth).orientation_deg, 0.0);
  const auto again = initialize_from_roi(roi, frame, cam, face_template());
  EXPECT_EQ(init.translation, again.translation);
}

TEST(InitializeFromRoi, EmptyDepthRejected) {
  const VirtualCamera cam;
  const Frame blank = Frame::blank(cam.height, cam.width);
  EXPECT_THROW(initialize_from_roi(Roi{80, 60, 30, 30, 0}, blank, cam, face_template()), RuntimeError);
}

TEST(TrackSequence, StaticPhantomStaysPut) {
  const VirtualCamera cam;
  const RigidTransform truth{rotation_from_angles({5, -5, 0}, {0, 1, 2}), Vec3(10, 0, 700)};
  std::vector<Frame> frames;
  for (int k = 0; k < 6; ++k) {
    frames.push_back(render_frame(phantom(), cam, truth, 300 + k));
    frames.back().id = k;
  }
  const RoiSource roi = [&](const Frame& f) { return std::optional(oracle_roi(cam, f.ground_truth, phantom())); };
  const auto track = track_sequence(face_template(), frames, cam, roi);
  ASSERT_EQ(track.size(), frames.size());
  // Frame 0 starts from the coarse ROI pose; constancy is checked once the
  // tracker runs from its own previous estimate.
  for (std::size_t k = 2; k < track.size(); ++k) {
    const auto e = pose_error(track[k].pose, track[1].pose);
    EXPECT_LT(e.position_mm, 1.0);
    EXPECT_LT(e.orientation_deg, 1.0);
  }
  for (const auto& t : track) {
    const auto e = pose_error(t.pose, truth);
    EXPECT_LT(e.position_mm, 3.0);
    EXPECT_LT(e.orientation_deg, 3.0);
    EXPECT_GE(t.time_ms, 0.0);
  }
}

TEST(TrackSequence, FollowsOneDegreePerFrame) {
  const VirtualCamera cam;
  std::vector<Frame> frames;
  for (int k = 0; k < 20; ++k) {
    const RigidTransform truth{rotation_from_angles({1.0 * k, 0.5 * k, 0}, {0, 1, 2}), Vec3(2.0 * k, 0, 700)};
    frames.push_back(render_frame(phantom(), cam, truth, 400 + k));
    frames.back().id = k;
  }
  const RoiSource roi = [&](const Frame& f) { return std::optional(oracle_roi(cam, f.ground_truth, phantom())); };
  const auto track = track_sequence(face_template(), frames, cam, roi);
  ASSERT_EQ(track.size(), frames.size());
  for (std::size_t k = 0; k < track.size(); ++k) {
    const auto e = pose_error(track[k].pose, frames[k].ground_truth);
    EXPECT_LT(e.position_mm, 2.0) << "frame " << k;
    EXPECT_LT(e.orientation_deg, 2.0) << "frame " << k;
  }
}

TEST(TrackSequence, DetectorFailureOnFirstFrameAborts) {
  const VirtualCamera cam;
  std::vector<Frame> frames{render_frame(phantom(), cam, RigidTransform::from_translation(Vec3(0, 0, 700)), 1)};
  const RoiSource none = [](const Frame&) { return std::optional<Roi>(); };
  EXPECT_THROW(track_sequence(face_template(), frames, cam, none), RuntimeError);
}

TEST(TrackingCsv, HeaderAndRows) {
  const auto dir = test::temp_dir("track_csv");
  std::vector<TrackedFrame> rows(3);
  rows[1].frame_id = 7;
  write_tracking_csv(dir / "t.csv", rows);
  std::ifstream is(dir / "t.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "frame_id,qw,qx,qy,qz,tx,ty,tz,residual_mm,time_ms");
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 3);
  std::filesystem::remove_all(dir);
}
