// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Optional arguments select criteria by number.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "headpose/harness.hpp"
#include "nn_gradcheck.hpp"
#include "test_util.hpp"

using namespace headpose;
using namespace headpose::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    failed_ += ok ? 0 : 1;
    ++checks_;
  }
  bool ok() const { return failed_ == 0; }
  std::string summary() const {
    std::ostringstream os;
    os << checks_ - failed_ << "/" << checks_ << " checks";
    for (const auto& f : failures_) os << "; failed: " << f;
    return os.str();
  }

 private:
  int checks_ = 0;
  int failed_ = 0;
  std::vector<std::string> failures_;
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Shared across criteria 4 to 7.
struct Workspace {
  fs::path root;
  bool have_data = false;
  bool have_detector = false;
  std::map<std::string, fs::path> models;  // "multi-1", "single-2", ...
  std::map<std::string, EvalReport> evals;

  RunConfig config() const {
    RunConfig c;
    c.data_dir = root / "data";
    c.detector_path = root / "detector" / "detector.json";
    c.log = &std::clog;
    return c;
  }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

void ensure_data() {
  auto& w = ws();
  if (w.have_data) return;
  RunConfig c = w.config();
  c.out_dir = c.data_dir;
  cmd_gen(c);
  w.have_data = true;
}

void ensure_detector() {
  auto& w = ws();
  if (w.have_detector) return;
  ensure_data();
  RunConfig c = w.config();
  c.out_dir = w.root / "detector";
  cmd_detect_train(c);
  w.have_detector = true;
}

std::string model_key(Method m, std::uint64_t seed) {
  return std::string(m == Method::MultiPath ? "multi-" : "single-") + std::to_string(seed);
}

const fs::path& ensure_model(Method m, std::uint64_t seed, int epochs = -1) {
  auto& w = ws();
  const std::string key = model_key(m, seed) + (epochs >= 0 ? "-e" + std::to_string(epochs) : "");
  if (auto it = w.models.find(key); it != w.models.end()) return it->second;
  ensure_detector();
  RunConfig c = w.config();
  c.methods = {m};
  c.seed = seed;
  if (epochs >= 0) c.training.epochs = epochs;
  c.out_dir = w.root / key;
  cmd_train(c);
  return w.models[key] = c.out_dir / "model.hpnn";
}

const EvalReport& ensure_eval(Method m, std::uint64_t seed, int epochs = -1) {
  auto& w = ws();
  const std::string key = model_key(m, seed) + (epochs >= 0 ? "-e" + std::to_string(epochs) : "");
  if (auto it = w.evals.find(key); it != w.evals.end()) return it->second;
  const fs::path model = ensure_model(m, seed, epochs);
  RunConfig c = w.config();
  c.methods = {m};
  (m == Method::MultiPath ? c.multi_model : c.single_model) = model;
  c.out_dir = w.root / ("eval-" + key);
  return w.evals[key] = cmd_eval(c).at(0);
}

// 1. Geometry properties on random cases plus the hand-computed pose errors.
Outcome geometry_suite() {
  constexpr int kCases = 2000;
  constexpr double kTol = 1e-9;
  Checker c;
  std::mt19937_64 rng(101);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  auto near = [&](double v, const std::string& what) {
    worst = std::max(worst, std::abs(v));
    c.expect(std::abs(v) <= kTol, what);
  };
  for (int i = 0; i < kCases; ++i) {
    const auto a = test::random_transform(rng);
    const auto b = test::random_transform(rng);
    const auto g = test::random_transform(rng);
    const Mat4 assoc = compose(compose(a, b), g).to_matrix() - compose(a, compose(b, g)).to_matrix();
    near(assoc.cwiseAbs().maxCoeff(), "associativity");
    const Mat4 oracle = test::matrix_oracle(a) * test::matrix_oracle(b);
    near((compose(a, b).to_matrix() - oracle).cwiseAbs().maxCoeff(), "compose vs matrix product");
    const Mat4 id = Mat4::Identity();
    near((compose(a, invert(a)).to_matrix() - id).cwiseAbs().maxCoeff(), "right inverse");
    near((compose(invert(a), a).to_matrix() - id).cwiseAbs().maxCoeff(), "left inverse");
    near((compose(a, RigidTransform::identity()).to_matrix() - a.to_matrix()).cwiseAbs().maxCoeff(), "identity");
    const Mat3 r = a.rotation.to_matrix();
    near((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff(), "orthonormal");
    near(r.determinant() - 1.0, "det +1");

    const double w = n(rng), x = n(rng), y = n(rng), z = n(rng);
    const auto p = to_axis_angle(UnitQuaternion::from_wxyz(w, x, y, z));
    const auto q = to_axis_angle(UnitQuaternion::from_wxyz(-w, -x, -y, -z));
    c.expect(p.angle_deg == q.angle_deg && p.axis == q.axis, "double cover");

    const auto e1 = pose_error(a, b);
    const auto e2 = pose_error(compose(g, a), compose(g, b));
    near(e1.position_mm - e2.position_mm, "left invariance (position)");
    near(deg2rad(e1.orientation_deg - e2.orientation_deg), "left invariance (orientation)");
  }
  const auto t = test::random_transform(rng);
  const auto same = pose_error(t, t);
  near(same.position_mm, "pose_error(T,T) position");
  near(deg2rad(same.orientation_deg), "pose_error(T,T) orientation");
  const auto trans = pose_error(RigidTransform::identity(), RigidTransform::from_translation(Vec3(1, 2, 2)));
  c.expect(trans.position_mm == 3.0 && trans.orientation_deg == 0.0, "translation (1,2,2) -> (3 mm, 0 deg)");
  const auto rz = pose_error(RigidTransform::identity(),
                             RigidTransform::from_rotation(UnitQuaternion::from_axis_angle(Vec3::UnitZ(), deg2rad(10))));
  near(rz.position_mm, "Rz(10) position");
  near(deg2rad(rz.orientation_deg - 10.0), "Rz(10) -> 10 deg");
  return {c.ok(), std::to_string(kCases) + " random cases, worst deviation " + fmt(worst * 1e12, 2) + "e-12; " +
                      c.summary()};
}

// 2. Finite-difference gradient checks for every layer and both networks.
Outcome gradient_suite() {
  std::vector<test::GradCheck> checks = test::layer_grad_checks();
  for (auto& g : test::model_grad_checks()) checks.push_back(g);
  const nn::ArchConfig full;
  checks.push_back(test::check_model_sampled(nn::build_multiscale_model(full), 31, 24, 40));
  checks.push_back(test::check_model_sampled(nn::build_singlepath_model(full), 32, 24, 40));
  double worst = 0.0;
  std::string worst_name;
  int kinks = 0;
  for (const auto& g : checks) {
    if (g.max_error >= worst) {
      worst = g.max_error;
      worst_name = g.name;
    }
    kinks += g.kinks;
  }
  std::ostringstream os;
  os << checks.size() << " checks, max relative error " << std::scientific << std::setprecision(2) << worst << " ("
     << worst_name << "), " << kinks << " coordinates re-stepped at ReLU kinks";
  return {worst < 1e-4, os.str()};
}

// 3. Kabsch recovery, trimmed ICP under 20% outliers and residual monotonicity.
Outcome icp_suite() {
  Checker c;
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  double kabsch_mm = 0.0, kabsch_deg = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vec3> src(40), dst;
    for (auto& p : src) p = Vec3(u(rng), u(rng), u(rng));
    const auto t = test::random_transform(rng);
    for (const auto& p : src) dst.push_back(apply(t, p));
    const auto e = pose_error(kabsch_align(src, dst), t);
    kabsch_mm = std::max(kabsch_mm, e.position_mm);
    kabsch_deg = std::max(kabsch_deg, e.orientation_deg);
  }
  c.expect(kabsch_mm < 1e-6 && kabsch_deg < 1e-6, "noiseless Kabsch");

  const HeadPhantom phantom = build_phantom(1, 20000);
  const Template tmpl = template_from_scan(simulate_head_scan(phantom, 3000, 21));
  std::normal_distribution<double> n(0.0, 1.0);
  auto perturb = [&](double mm, double deg) {
    const Vec3 axis(n(rng), n(rng), n(rng));
    const Vec3 dir(n(rng), n(rng), n(rng));
    return RigidTransform{UnitQuaternion::from_axis_angle(axis.normalized(), deg2rad(deg)), mm * dir.normalized()};
  };
  int runs = 0;
  auto monotone = [&](const IcpResult& r) {
    ++runs;
    for (std::size_t i = 1; i < r.residual_history.size(); ++i) {
      if (r.residual_history[i] > r.residual_history[i - 1] + 1e-9) return false;
    }
    return true;
  };

  double icp_noiseless_mm = 0.0, icp_noiseless_deg = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const RigidTransform truth{UnitQuaternion::from_axis_angle(Vec3(0, 1, 0), deg2rad(8.0 * trial - 16.0)),
                               Vec3(30.0 * trial - 60.0, -10.0, 650.0 + 20 * trial)};
    std::vector<Vec3> scene;
    for (const auto& p : tmpl.points) scene.push_back(apply(truth, p));
    IcpConfig cfg;
    cfg.trim_fraction = 0.0;
    cfg.converge_mm = 1e-9;
    cfg.converge_deg = 1e-9;
    cfg.max_iterations = 200;
    const auto r = icp_register(tmpl, scene, compose(truth, perturb(5.0, 5.0)), cfg);
    const auto e = pose_error(r.pose, truth);
    icp_noiseless_mm = std::max(icp_noiseless_mm, e.position_mm);
    icp_noiseless_deg = std::max(icp_noiseless_deg, e.orientation_deg);
    c.expect(monotone(r), "monotone residual (noiseless)");
  }
  c.expect(icp_noiseless_mm < 1e-6 && icp_noiseless_deg < 1e-6, "noiseless ICP recovery");

  double outlier_mm = 0.0, outlier_deg = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const RigidTransform truth{rotation_from_angles({6.0 * trial - 12.0, 4.0, -5.0}, {0, 1, 2}),
                               Vec3(20.0 * trial - 40.0, 15.0, 700.0)};
    std::vector<Vec3> scene;
    for (const auto& p : tmpl.points) scene.push_back(apply(truth, p));
    std::uniform_real_distribution<double> off(3.0, 25.0);
    std::uniform_int_distribution<std::size_t> pick(0, scene.size() - 1);
    const std::size_t outliers = scene.size() / 4;  // 20% of the final cloud
    for (std::size_t k = 0; k < outliers; ++k) {
      const Vec3 dir(n(rng), n(rng), n(rng));
      scene.push_back(scene[pick(rng)] + off(rng) * dir.normalized());
    }
    const auto r = icp_register(tmpl, scene, compose(truth, perturb(8.0, 8.0)));
    const auto e = pose_error(r.pose, truth);
    outlier_mm = std::max(outlier_mm, e.position_mm);
    outlier_deg = std::max(outlier_deg, e.orientation_deg);
    c.expect(monotone(r), "monotone residual (outliers)");
  }
  c.expect(outlier_mm < 1.0 && outlier_deg < 1.0, "trimmed ICP with 20% outliers");

  const VirtualCamera cam;
  for (int trial = 0; trial < 6; ++trial) {
    const RigidTransform truth{rotation_from_angles({12.0 * trial - 30, 6.0, -4.0}, {1, 0, 2}),
                               Vec3(20.0 * trial - 50, 10, 600 + 40.0 * trial)};
    const Frame f = render_frame(phantom, cam, truth, 400 + trial);
    const KdTree scene(depth_to_surface_points(f, cam, 3));
    c.expect(monotone(icp_register(tmpl, scene, compose(truth, perturb(15.0, 12.0)))), "monotone residual (rendered)");
  }
  return {c.ok(), "Kabsch max " + fmt(kabsch_mm * 1e9, 2) + "e-9 mm / " + fmt(kabsch_deg * 1e9, 2) +
                      "e-9 deg; noiseless ICP max " + fmt(icp_noiseless_mm * 1e6, 3) + "e-6 mm / " +
                      fmt(icp_noiseless_deg * 1e6, 3) + "e-6 deg; 20% outliers max " + fmt(outlier_mm) + " mm / " +
                      fmt(outlier_deg) + " deg; " + std::to_string(runs) + " monotone runs; " + c.summary()};
}

// 4. Detector centre within 10 px of the oracle ROI on 200 held-out frames.
Outcome detector_suite() {
  ensure_data();
  RunConfig c = ws().config();
  c.out_dir = ws().root / "detector";
  const auto s = cmd_detect_train(c);
  ws().have_detector = true;
  const double rate = static_cast<double>(s.within_10px) / s.eval_frames;
  return {s.eval_frames >= 200 && rate >= 0.95,
          std::to_string(s.within_10px) + "/" + std::to_string(s.eval_frames) + " held-out frames within 10 px (" +
              fmt(100 * rate, 1) + "%)"};
}

// 5. Trained multi-path accuracy and improvement over its initialization.
Outcome learning_suite() {
  const EvalReport& trained = ensure_eval(Method::MultiPath, 1);
  const EvalReport& untrained = ensure_eval(Method::MultiPath, 1, 0);
  const double pos = trained.position_mm.mean, ori = trained.orientation_deg.mean;
  const double pos_gain = untrained.position_mm.mean / pos, ori_gain = untrained.orientation_deg.mean / ori;
  const bool ok = pos < 5.0 && ori < 3.0 && pos_gain >= 5.0 && ori_gain >= 5.0;
  return {ok, "multi-path test error " + fmt(pos, 2) + " +- " + fmt(trained.position_mm.std, 2) + " mm, " + fmt(ori, 2) +
                  " +- " + fmt(trained.orientation_deg.std, 2) + " deg over " + std::to_string(trained.frames.size()) +
                  " frames; untrained " + fmt(untrained.position_mm.mean, 1) + " mm, " +
                  fmt(untrained.orientation_deg.mean, 1) + " deg (" + fmt(pos_gain, 1) + "x, " + fmt(ori_gain, 1) +
                  "x better)"};
}

// 6. Multi-path orientation error no worse than single-path for most seeds.
Outcome ordering_suite() {
  int wins = 0;
  std::ostringstream os;
  for (std::uint64_t seed : {1, 2, 3}) {
    const double multi = ensure_eval(Method::MultiPath, seed).orientation_deg.mean;
    const double single = ensure_eval(Method::SinglePath, seed).orientation_deg.mean;
    wins += multi <= single ? 1 : 0;
    os << "seed " << seed << ": multi " << fmt(multi, 2) << " vs single " << fmt(single, 2) << " deg; ";
  }
  os << "multi-path no worse on " << wins << "/3 seeds";
  return {wins >= 2, os.str()};
}

// 7. Timing report with a setup row and a per-image row for all methods.
Outcome timing_suite() {
  RunConfig c = ws().config();
  c.methods = {Method::ModelBased, Method::SinglePath, Method::MultiPath};
  c.single_model = ensure_model(Method::SinglePath, 1);
  c.multi_model = ensure_model(Method::MultiPath, 1);
  c.out_dir = ws().root / "bench";
  const BenchReport r = cmd_bench(c);
  Checker ch;
  ch.expect(r.frames >= 200 && r.warmup == 10, "200 timed frames after 10 warmup");
  ch.expect(r.methods.size() == 3, "three methods");
  std::map<Method, const MethodTiming*> by;
  for (const auto& m : r.methods) {
    by[m.method] = &m;
    ch.expect(m.per_image_ms.size() == static_cast<std::size_t>(r.frames), "per-image samples");
    ch.expect(m.setup_seconds.has_value(), std::string("setup time for ") + method_name(m.method));
    ch.expect(m.per_image.mean > 0.0, "positive per-image time");
  }
  const std::string table = slurp(c.out_dir / "bench.txt");
  ch.expect(table.find("Setup time") != std::string::npos && table.find("Processing time") != std::string::npos,
            "table rows");
  std::cout << table;
  std::string detail = ch.summary();
  if (by.size() == 3) {
    const double icp = by[Method::ModelBased]->per_image.mean;
    const double cnn = by[Method::MultiPath]->per_image.mean;
    detail = "per image: model-based " + fmt(icp, 2) + " ms, single-path " + fmt(by[Method::SinglePath]->per_image.mean, 2) +
             " ms, multi-path " + fmt(cnn, 2) + " ms (CNN " + fmt(icp / cnn, 1) + "x faster than ICP); setup: " +
             fmt(*by[Method::ModelBased]->setup_seconds, 2) + " s template, " +
             fmt(*by[Method::MultiPath]->setup_seconds, 1) + " s multi-path training; " + detail;
  }
  return {ch.ok(), detail};
}

// 8. gen/train/eval twice with the same seeds give identical bytes
// (timing fields removed from the JSON reports).
Outcome determinism_suite() {
  const fs::path root = ws().root / "determinism";
  const json tiny = json::parse(R"({
    "trajectory": {"grid_dims": [2, 2, 1], "rotations_per_cell": 10},
    "dataset": {"max_frames": 40},
    "phantom": {"resolution": 8000},
    "scan": {"samples": 800},
    "training": {"epochs": 2, "batch_size": 8},
    "roi_source": "oracle"
  })");
  auto strip = [](json j) {
    for (auto& m : j.at("methods")) {
      m.erase("time_ms");
      for (auto& f : m.at("per_frame")) f.erase("time_ms");
    }
    return j.dump();
  };
  std::vector<std::map<std::string, std::string>> runs(2);
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / ("run" + std::to_string(run));
    RunConfig c = run_config_from_json(tiny);
    c.seed = 5;
    c.data_dir = dir / "data";
    c.out_dir = c.data_dir;
    cmd_gen(c);
    for (Method m : {Method::SinglePath, Method::MultiPath}) {
      c.methods = {m};
      c.out_dir = dir / method_name(m);
      cmd_train(c);
    }
    c.methods = {Method::ModelBased, Method::SinglePath, Method::MultiPath};
    c.single_model = dir / "single-path" / "model.hpnn";
    c.multi_model = dir / "multi-path" / "model.hpnn";
    c.out_dir = dir / "eval";
    cmd_eval(c);

    auto& files = runs[run];
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const std::string rel = fs::relative(e.path(), dir).string();
      const std::string name = e.path().filename().string();
      if (name == "template.json" || name == "train_report.json") {
        json j = json::parse(slurp(e.path()));
        j.erase("build_seconds");
        j.erase("training_seconds");
        files[rel] = j.dump();
      } else if (name == "report.json") {
        files[rel] = strip(json::parse(slurp(e.path())));
      } else if (name.rfind("frames_", 0) == 0) {
        // Drop the time_ms column.
        std::istringstream is(slurp(e.path()));
        std::string line, out;
        while (std::getline(is, line)) {
          std::vector<std::string> cells;
          std::stringstream ss(line);
          std::string cell;
          while (std::getline(ss, cell, ',')) cells.push_back(cell);
          for (std::size_t k = 0; k < cells.size(); ++k) {
            if (k != 3) out += cells[k] + ",";
          }
          out += "\n";
        }
        files[rel] = out;
      } else {
        files[rel] = slurp(e.path());
      }
    }
  }
  int differing = 0;
  std::string first;
  for (const auto& [rel, bytes] : runs[0]) {
    const auto it = runs[1].find(rel);
    if (it == runs[1].end() || it->second != bytes) {
      if (first.empty()) first = rel;
      ++differing;
    }
  }
  const bool ok = differing == 0 && runs[0].size() == runs[1].size() && runs[0].size() > 40;
  return {ok, std::to_string(runs[0].size()) + " artifacts compared, " + std::to_string(differing) + " differ" +
                  (first.empty() ? "" : " (first: " + first + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"geometry properties", geometry_suite},   {"gradient checks", gradient_suite},
      {"Kabsch/ICP oracle", icp_suite},          {"face detector", detector_suite},
      {"end-to-end learning", learning_suite},   {"multi vs single path", ordering_suite},
      {"timing report", timing_suite},           {"determinism", determinism_suite},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  ws().root = test::temp_dir("acceptance");
  std::vector<std::string> lines;
  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.pass;
    std::ostringstream line;
    line << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[k].first << ": " << o.detail
         << " [" << fmt(secs, 1) << " s]";
    std::cout << line.str() << std::endl;
    lines.push_back(line.str());
  }
  std::cout << "\nacceptance summary\n";
  for (const auto& l : lines) std::cout << l << "\n";
  fs::remove_all(ws().root);
  return all ? 0 : 1;
}
