#include "headpose/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/parallel.hpp"

namespace headpose::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <class T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

DetectorChannel parse_channel(const std::string& s) {
  if (s == "ir") return DetectorChannel::Ir;
  if (s == "luminance") return DetectorChannel::Luminance;
  throw ValidationError("unknown detector channel: " + s);
}

void read_trajectory(const json& j, TrajectoryConfig& t) {
  if (j.contains("workspace")) t.workspace = j.at("workspace").get<WorkspaceBounds>();
  read_if(j, "grid_dims", t.grid_dims);
  read_if(j, "rotations_per_cell", t.rotations_per_cell);
  read_if(j, "rotation_range_deg", t.rotation_range_deg);
  read_if(j, "position_jitter", t.position_jitter);
  read_if(j, "seed", t.seed);
}

void read_dataset_options(const json& j, DatasetOptions& d) {
  if (j.contains("max_frames")) {
    if (j.at("max_frames").is_null()) {
      d.max_frames.reset();
    } else {
      d.max_frames = j.at("max_frames").get<int>();
    }
  }
  read_if(j, "split_seed", d.split_seed);
  read_if(j, "noise_seed", d.noise_seed);
  read_if(j, "test_fraction", d.test_fraction);
  read_if(j, "val_fraction", d.val_fraction);
  if (j.contains("detector_channel")) d.detector_channel = parse_channel(j.at("detector_channel").get<std::string>());
}

void read_detector_layout(const json& j, LinearDetector& d) {
  if (j.contains("window")) {
    const auto w = j.at("window").get<std::array<int, 2>>();
    d.window_w = w[0];
    d.window_h = w[1];
  }
  read_if(j, "cell", d.hog.cell);
  read_if(j, "bins", d.hog.bins);
  read_if(j, "block", d.hog.block);
  read_if(j, "stride", d.stride);
  read_if(j, "scale_step", d.scale_step);
  read_if(j, "levels", d.levels);
}

void read_detect(const json& j, DetectSettings& d) {
  read_detector_layout(j, d.layout);
  read_if(j, "max_frames", d.max_frames);
  read_if(j, "refine_with_depth", d.refine_with_depth);
  read_if(j, "ridge_lambda", d.options.fit.ridge_lambda);
  read_if(j, "holdout_fraction", d.options.fit.holdout_fraction);
  read_if(j, "negatives_per_frame", d.options.negatives_per_frame);
  read_if(j, "min_negative_offset_px", d.options.min_negative_offset_px);
  read_if(j, "mining_rounds", d.options.mining_rounds);
  read_if(j, "hard_negatives_per_frame", d.options.hard_negatives_per_frame);
  read_if(j, "seed", d.options.seed);
}

void read_icp(const json& j, IcpConfig& c) {
  read_if(j, "max_iterations", c.max_iterations);
  read_if(j, "converge_mm", c.converge_mm);
  read_if(j, "converge_deg", c.converge_deg);
  read_if(j, "trim_fraction", c.trim_fraction);
  read_if(j, "max_correspondence_mm", c.max_correspondence_mm);
  read_if(j, "extrapolate", c.extrapolate);
  read_if(j, "untrimmed_candidate", c.untrimmed_candidate);
  read_if(j, "escape_deg", c.escape_deg);
  read_if(j, "scene_subdivisions", c.scene_subdivisions);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << j.dump(1) << '\n';
  if (!os) throw RuntimeError("failed writing " + path.string());
}

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << s;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) throw ValidationError("an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeError("cannot create " + dir.string() + ": " + ec.message());
}

void require_file(const fs::path& path, const std::string& what) {
  if (path.empty()) throw ValidationError(what + " path is required");
  if (!fs::is_regular_file(path)) throw ValidationError(what + " not found: " + path.string());
}

Dataset open_dataset(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) throw ValidationError("a dataset directory is required (--data)");
  return load_dataset(cfg.data_dir);
}

HeadPhantom dataset_phantom(const Dataset& ds) {
  if (ds.phantom_resolution <= 0) throw ValidationError("dataset manifest has no phantom record");
  return build_phantom(ds.phantom_seed, ds.phantom_resolution);
}

std::vector<int> evenly_spaced(const std::vector<int>& ids, int count) {
  if (count <= 0 || static_cast<std::size_t>(count) >= ids.size()) return ids;
  std::vector<int> out;
  for (int i = 0; i < count; ++i) out.push_back(ids[static_cast<std::size_t>(i) * ids.size() / count]);
  return out;
}

fs::path template_path(const RunConfig& cfg) {
  return cfg.template_path.empty() ? cfg.data_dir / "template.hppc" : cfg.template_path;
}

fs::path model_path(const RunConfig& cfg, Method m) {
  return m == Method::SinglePath ? cfg.single_model : cfg.multi_model;
}

const char* arch_name(Method m) { return m == Method::SinglePath ? "single" : "multi"; }

nn::ArchConfig arch_for(const RunConfig& cfg, const Dataset& ds) {
  nn::ArchConfig a = cfg.arch;
  a.image_height = ds.camera.height;
  a.image_width = ds.camera.width;
  return a;
}

void log_line(const RunConfig& cfg, const std::string& s) {
  if (cfg.log) *cfg.log << s << std::endl;
}

void append_rows(nn::Tensor4<float>& dst, const nn::Tensor4<float>& src) {
  if (src.n == 0) return;
  if (dst.n == 0) {
    dst = src;
    return;
  }
  dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
  dst.n += src.n;
}

/// Loads frames in chunks so only the network inputs stay in memory.
nn::TrainingSet build_set(const Dataset& ds, const std::vector<int>& ids, const nn::ArchConfig& arch, bool with_crop,
                          const RoiProvider* rois, int& fallbacks) {
  nn::TrainingSet set;
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < ids.size(); begin += kChunk) {
    const std::size_t end = std::min(ids.size(), begin + kChunk);
    std::vector<Frame> frames(end - begin);
    std::vector<Roi> roi(with_crop ? frames.size() : 0);
    std::vector<char> fell(frames.size(), 0);
    parallel_for(frames.size(), [&](std::size_t k) {
      frames[k] = ds.load_frame(ids[begin + k]);
      if (with_crop) {
        bool fb = false;
        roi[k] = (*rois)(frames[k], &fb);
        fell[k] = fb;
      }
    });
    for (char f : fell) fallbacks += f;
    auto part = nn::make_training_set(frames, roi, arch, ds.bounds, with_crop);
    append_rows(set.full, part.full);
    append_rows(set.crop, part.crop);
    append_rows(set.target, part.target);
    set.ids.insert(set.ids.end(), part.ids.begin(), part.ids.end());
  }
  return set;
}

std::optional<double> read_setup_seconds(const fs::path& path, const char* key) {
  std::ifstream is(path);
  if (!is) return std::nullopt;
  try {
    const json j = json::parse(is);
    if (j.contains(key) && j.at(key).is_number()) return j.at(key).get<double>();
  } catch (const json::exception&) {
  }
  return std::nullopt;
}

/// One method's per-frame pipeline with its artifacts loaded.
class Estimator {
 public:
  Estimator(const RunConfig& cfg, const Dataset& ds, Method method) : method_(method), camera_(ds.camera) {
    if (method == Method::ModelBased) {
      const fs::path tp = template_path(cfg);
      require_file(tp, "template");
      template_ = load_template(tp);
      icp_ = cfg.icp;
      icp_.validate();
    } else {
      const fs::path mp = model_path(cfg, method);
      require_file(mp, std::string(method_name(method)) + " model");
      regressor_ = nn::load_checkpoint(mp);
      if (regressor_->model.spec().arch != arch_name(method)) {
        throw ValidationError("checkpoint " + mp.string() + " holds a '" + regressor_->model.spec().arch +
                              "' network, not " + method_name(method));
      }
      if (regressor_->arch.image_height != ds.camera.height || regressor_->arch.image_width != ds.camera.width) {
        throw ValidationError("checkpoint " + mp.string() + " was trained on a different image size");
      }
    }
    if (method != Method::SinglePath) rois_.emplace(ds, cfg.roi_source, cfg.detector_path, cfg.detect.refine_with_depth);
  }

  /// Pose for one frame; the caller times this call.
  RigidTransform estimate(const Frame& frame, bool* fallback) const {
    if (method_ == Method::SinglePath) return regressor_->predict_pose(frame, Roi{});
    const Roi roi = (*rois_)(frame, fallback);
    if (method_ == Method::MultiPath) return regressor_->predict_pose(frame, roi);
    const RoiSource source = [&](const Frame&) -> std::optional<Roi> { return roi; };
    return register_frame(*template_, frame, camera_, source, icp_).pose;
  }

 private:
  Method method_;
  VirtualCamera camera_;
  std::optional<Template> template_;
  IcpConfig icp_;
  std::optional<nn::PoseRegressor> regressor_;
  std::optional<RoiProvider> rois_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    }
    if (j.contains("single_model")) c.single_model = j.at("single_model").get<std::string>();
    if (j.contains("multi_model")) c.multi_model = j.at("multi_model").get<std::string>();
    if (j.contains("template")) c.template_path = j.at("template").get<std::string>();
    if (j.contains("detector")) c.detector_path = j.at("detector").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("camera")) c.camera = j.at("camera").get<VirtualCamera>();
    if (j.contains("trajectory")) read_trajectory(j.at("trajectory"), c.gen.trajectory);
    if (j.contains("dataset")) read_dataset_options(j.at("dataset"), c.gen.dataset);
    if (j.contains("phantom")) {
      read_if(j.at("phantom"), "seed", c.gen.phantom_seed);
      read_if(j.at("phantom"), "resolution", c.gen.phantom_resolution);
    }
    if (j.contains("scan")) {
      read_if(j.at("scan"), "samples", c.gen.scan_samples);
      read_if(j.at("scan"), "seed", c.gen.scan_seed);
      read_if(j.at("scan"), "pointer_noise_mm", c.gen.pointer_noise_mm);
    }
    if (j.contains("detect")) read_detect(j.at("detect"), c.detect);
    if (j.contains("arch")) c.arch = j.at("arch").get<nn::ArchConfig>();
    if (j.contains("training")) c.training = j.at("training").get<nn::TrainConfig>();
    if (j.contains("roi_source")) {
      const auto s = j.at("roi_source").get<std::string>();
      if (s != "detector" && s != "oracle") throw ValidationError("roi_source must be 'detector' or 'oracle'");
      c.roi_source = s == "oracle" ? RoiSourceKind::Oracle : RoiSourceKind::Detector;
    }
    if (j.contains("icp")) read_icp(j.at("icp"), c.icp);
    if (j.contains("bench")) {
      read_if(j.at("bench"), "frames", c.bench.frames);
      read_if(j.at("bench"), "warmup", c.bench.warmup);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_json(path)); }

RoiProvider::RoiProvider(const Dataset& ds, RoiSourceKind kind, const fs::path& detector_path,
                         bool refine_with_depth)
    : kind_(kind), camera_(ds.camera), refine_(refine_with_depth) {
  if (kind == RoiSourceKind::Oracle) {
    phantom_ = dataset_phantom(ds);
  } else {
    require_file(detector_path, "detector");
    detector_ = load_detector(detector_path);
  }
}

Roi RoiProvider::operator()(const Frame& frame, bool* fallback) const {
  if (fallback) *fallback = false;
  if (phantom_) return oracle_roi(camera_, frame.ground_truth, *phantom_);
  if (auto r = detect(frame, *detector_)) return refine_ ? refine_roi_depth(frame, *r) : *r;
  if (fallback) *fallback = true;
  Roi centre;
  centre.center_u = 0.5 * (frame.width - 1);
  centre.center_v = 0.5 * (frame.height - 1);
  centre.width = detector_->window_w;
  centre.height = detector_->window_h;
  return centre;
}

Dataset cmd_gen(const RunConfig& cfg) {
  ensure_dir(cfg.out_dir);
  GenSettings g = cfg.gen;
  if (cfg.seed) {
    g.trajectory.seed = *cfg.seed;
    g.dataset.noise_seed = *cfg.seed;
    g.dataset.split_seed = *cfg.seed;
  }
  g.dataset.phantom_seed = g.phantom_seed;
  g.dataset.phantom_resolution = g.phantom_resolution;
  const HeadPhantom phantom = build_phantom(g.phantom_seed, g.phantom_resolution);
  const TrajectoryPlan plan = plan_trajectory(cfg.camera, g.trajectory);
  log_line(cfg, "rendering " + std::to_string(g.dataset.max_frames ? std::min<std::size_t>(*g.dataset.max_frames,
                                                                                           plan.poses.size())
                                                                     : plan.poses.size()) +
                    " frames");
  Dataset ds = generate_dataset(phantom, cfg.camera, plan, cfg.out_dir, g.dataset);

  const auto start = Clock::now();
  const Template tmpl = template_from_scan(simulate_head_scan(phantom, g.scan_samples, g.scan_seed, g.pointer_noise_mm));
  const double build = seconds_since(start);
  save_template(cfg.out_dir / "template.hppc", tmpl);
  write_json(cfg.out_dir / "template.json", {{"points", tmpl.points.size()},
                                             {"scan_samples", g.scan_samples},
                                             {"scan_seed", g.scan_seed},
                                             {"build_seconds", build}});
  return ds;
}

DetectTrainSummary cmd_detect_train(const RunConfig& cfg) {
  const Dataset ds = open_dataset(cfg);
  ensure_dir(cfg.out_dir);
  const HeadPhantom phantom = dataset_phantom(ds);
  LinearDetector layout = cfg.detect.layout;
  layout.channel = ds.detector_channel;
  FrameTrainOptions options = cfg.detect.options;
  if (cfg.seed) options.seed = *cfg.seed;

  const auto train_ids = evenly_spaced(ds.train, cfg.detect.max_frames);
  std::vector<Frame> frames(train_ids.size());
  parallel_for(frames.size(), [&](std::size_t k) { frames[k] = ds.load_frame(train_ids[k]); });
  log_line(cfg, "training detector on " + std::to_string(frames.size()) + " frames");

  DetectTrainSummary s;
  s.detector = train_detector_on_frames(frames, ds.camera, phantom, layout, options, &s.report);
  save_detector(cfg.out_dir / "detector.json", s.detector);

  const auto test_ids = evenly_spaced(ds.test, 200);
  std::vector<char> hit(test_ids.size(), 0);
  parallel_for(test_ids.size(), [&](std::size_t k) {
    const Frame f = ds.load_frame(test_ids[k]);
    const Roi truth = oracle_roi(ds.camera, f.ground_truth, phantom);
    if (const auto r = detect(f, s.detector)) {
      hit[k] = std::hypot(r->center_u - truth.center_u, r->center_v - truth.center_v) <= 10.0;
    }
  });
  s.eval_frames = static_cast<int>(test_ids.size());
  for (char h : hit) s.within_10px += h;

  write_json(cfg.out_dir / "detect_report.json",
             {{"train_frames", frames.size()},
              {"positives", s.report.fit.positives},
              {"negatives", s.report.fit.negatives},
              {"hard_negatives_added", s.report.hard_negatives_added},
              {"holdout_balanced_accuracy", s.report.fit.holdout_balanced_accuracy},
              {"test_frames", s.eval_frames},
              {"test_within_10px", s.within_10px}});
  return s;
}

TrainSummary cmd_train(const RunConfig& cfg) {
  if (cfg.methods.size() != 1 || cfg.methods[0] == Method::ModelBased) {
    throw ValidationError("train needs exactly one network architecture (single or multi)");
  }
  const Method method = cfg.methods[0];
  const Dataset ds = open_dataset(cfg);
  ensure_dir(cfg.out_dir);
  const nn::ArchConfig arch = arch_for(cfg, ds);
  nn::TrainConfig tc = cfg.training;
  if (cfg.seed) tc.seed = *cfg.seed;
  tc.validate();

  const bool with_crop = method == Method::MultiPath;
  std::optional<RoiProvider> rois;
  if (with_crop) rois.emplace(ds, cfg.roi_source, cfg.detector_path, cfg.detect.refine_with_depth);

  TrainSummary s;
  s.method = method;
  log_line(cfg, "preparing " + std::to_string(ds.train.size()) + " training frames");
  auto train = build_set(ds, ds.train, arch, with_crop, rois ? &*rois : nullptr, s.roi_fallbacks);
  auto val = build_set(ds, ds.val, arch, with_crop, rois ? &*rois : nullptr, s.roi_fallbacks);

  const auto spec = with_crop ? nn::build_multiscale_model(arch) : nn::build_singlepath_model(arch);
  nn::PoseRegressor reg{nn::Model<float>(spec, tc.seed), arch, ds.bounds, {}};
  if (tc.rescale_targets) {
    reg.scaling = nn::TargetScaling::fit(train.target, tc.output_weights);
    reg.scaling.apply(train.target);
    reg.scaling.apply(val.target);
  }
  s.parameters = reg.model.parameter_count();
  s.result = nn::train_model(reg.model, train, val.size() ? &val : nullptr, tc, [&](const nn::EpochLoss& e) {
    std::ostringstream os;
    os << "epoch " << e.epoch << "  train_mse " << e.train_mse << "  val_mse " << e.val_mse;
    log_line(cfg, os.str());
  });

  nn::save_checkpoint(cfg.out_dir / "model.hpnn", reg);
  nn::write_loss_csv(cfg.out_dir / "loss.csv", s.result.curve);
  const auto& last = s.result.curve.empty() ? nn::EpochLoss{} : s.result.curve.back();
  auto nan_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  write_json(cfg.out_dir / "train_report.json",
             {{"method", method_name(method)},
              {"parameters", s.parameters},
              {"train_frames", train.size()},
              {"val_frames", val.size()},
              {"roi_source", cfg.roi_source == RoiSourceKind::Oracle ? "oracle" : "detector"},
              {"roi_fallbacks", s.roi_fallbacks},
              {"training", tc},
              {"arch", arch},
              {"initial_val_mse", nan_null(s.result.initial_val_mse)},
              {"final_train_mse", nan_null(last.train_mse)},
              {"final_val_mse", nan_null(last.val_mse)},
              {"training_seconds", s.result.seconds}});
  return s;
}

std::vector<EvalReport> cmd_eval(const RunConfig& cfg) {
  if (cfg.methods.empty()) throw ValidationError("no methods to evaluate");
  const Dataset ds = open_dataset(cfg);
  ensure_dir(cfg.out_dir);
  std::vector<EvalReport> reports;
  for (Method m : cfg.methods) {
    const Estimator est(cfg, ds, m);
    log_line(cfg, std::string("evaluating ") + method_name(m) + " on " + std::to_string(ds.test.size()) + " frames");
    EvalReport r;
    r.method = m;
    r.frames.resize(ds.test.size());
    parallel_for(ds.test.size(), [&](std::size_t k) {
      const Frame f = ds.load_frame(ds.test[k]);
      FrameResult& out = r.frames[k];
      out.frame_id = f.id;
      const auto start = Clock::now();
      out.predicted = est.estimate(f, &out.roi_fallback);
      out.time_ms = ms_since(start);
      out.error = pose_error(out.predicted, f.ground_truth);
    });
    r.finalize();
    write_frames_csv(cfg.out_dir / (std::string("frames_") + method_name(m) + ".csv"), r);
    reports.push_back(std::move(r));
  }
  json methods = json::array();
  for (const auto& r : reports) methods.push_back(r);
  write_json(cfg.out_dir / "report.json", {{"split", "test"}, {"frames", ds.test.size()}, {"methods", methods}});
  write_text(cfg.out_dir / "report.txt", accuracy_table(reports));
  return reports;
}

BenchReport cmd_bench(const RunConfig& cfg) {
  if (cfg.methods.empty()) throw ValidationError("no methods to benchmark");
  if (cfg.bench.frames < 1 || cfg.bench.warmup < 0) throw ValidationError("bench needs frames >= 1 and warmup >= 0");
  const Dataset ds = open_dataset(cfg);
  if (ds.test.empty()) throw ValidationError("dataset has an empty test split");
  ensure_dir(cfg.out_dir);

  const int total = cfg.bench.frames + cfg.bench.warmup;
  std::vector<Frame> frames(static_cast<std::size_t>(total));
  parallel_for(frames.size(), [&](std::size_t k) { frames[k] = ds.load_frame(ds.test[k % ds.test.size()]); });

  BenchReport report;
  report.frames = cfg.bench.frames;
  report.warmup = cfg.bench.warmup;
  for (Method m : cfg.methods) {
    const Estimator est(cfg, ds, m);
    MethodTiming t;
    t.method = m;
    if (m == Method::ModelBased) {
      t.setup_kind = "template build";
      t.setup_seconds = read_setup_seconds(template_path(cfg).parent_path() / "template.json", "build_seconds");
    } else {
      t.setup_kind = "training";
      t.setup_seconds = read_setup_seconds(model_path(cfg, m).parent_path() / "train_report.json", "training_seconds");
    }
    log_line(cfg, std::string("timing ") + method_name(m));
    for (int k = 0; k < total; ++k) {
      const auto start = Clock::now();
      bool fallback = false;
      const RigidTransform pose = est.estimate(frames[k], &fallback);
      const double ms = ms_since(start);
      if (!pose.translation.allFinite()) throw RuntimeError("non-finite pose while benchmarking");
      if (k >= cfg.bench.warmup) t.per_image_ms.push_back(ms);
    }
    t.per_image = mean_std(t.per_image_ms);
    report.methods.push_back(std::move(t));
  }
  write_json(cfg.out_dir / "bench.json", report);
  write_text(cfg.out_dir / "bench.txt", timing_table(report));
  return report;
}

}  // namespace headpose::harness
