#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "headpose/icp_tracker.hpp"
#include "headpose/nn.hpp"
#include "headpose/phantom_sim.hpp"
#include "headpose/roi_detector.hpp"

namespace headpose::harness {

enum class Method { ModelBased, SinglePath, MultiPath };

/// "model-based", "single-path", "multi-path".
const char* method_name(Method m);
/// Accepts the names above plus "single" and "multi".
Method parse_method(const std::string& s);

enum class RoiSourceKind { Detector, Oracle };

struct GenSettings {
  GenSettings() {
    trajectory.rotations_per_cell = 112;  // 3x3x2 cells x 112 = 2016 planned poses
    dataset.max_frames = 2000;
  }

  TrajectoryConfig trajectory;
  DatasetOptions dataset;
  std::uint64_t phantom_seed = 1;
  int phantom_resolution = 20000;
  int scan_samples = 3000;  // pointer-probe samples for the ICP template
  std::uint64_t scan_seed = 21;
  double pointer_noise_mm = 0.0;
};

struct DetectSettings {
  LinearDetector layout;
  FrameTrainOptions options;
  int max_frames = 200;  // evenly spaced over the train split
  /// Detections are re-centred with refine_roi_depth before use.
  bool refine_with_depth = true;
};

struct BenchSettings {
  int frames = 200;
  int warmup = 10;
};

/// Everything a CLI invocation needs. Paths left empty fall back to the
/// conventional file names inside data_dir or the artifact directories.
struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::vector<Method> methods{Method::ModelBased, Method::SinglePath, Method::MultiPath};
  std::filesystem::path single_model;
  std::filesystem::path multi_model;
  std::filesystem::path template_path;  // default: data_dir/template.hppc
  std::filesystem::path detector_path;
  std::optional<std::uint64_t> seed;

  VirtualCamera camera;
  GenSettings gen;
  DetectSettings detect;
  nn::ArchConfig arch;
  nn::TrainConfig training;
  RoiSourceKind roi_source = RoiSourceKind::Detector;
  IcpConfig icp;
  BenchSettings bench;

  std::ostream* log = nullptr;  // progress lines; not part of the JSON config
};

/// Reads the sections of a JSON config; absent keys keep their defaults.
/// Throws ValidationError on unknown enum values or malformed JSON.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Crop placement for CNN input and ICP initialization. With a detector,
/// frames without a detection get a window centred in the image and are
/// counted as fallbacks; detections are optionally re-centred on depth.
class RoiProvider {
 public:
  RoiProvider(const Dataset& ds, RoiSourceKind kind, const std::filesystem::path& detector_path,
              bool refine_with_depth = true);

  Roi operator()(const Frame& frame, bool* fallback = nullptr) const;
  RoiSourceKind kind() const { return kind_; }

 private:
  RoiSourceKind kind_;
  VirtualCamera camera_;
  std::optional<HeadPhantom> phantom_;
  std::optional<LinearDetector> detector_;
  bool refine_ = true;
};

struct Stats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 below two values
};

/// Plain left-to-right sums, so a reader of the per-frame CSV gets the same
/// doubles.
Stats mean_std(std::span<const double> values);

struct FrameResult {
  int frame_id = 0;
  RigidTransform predicted;
  PoseError error;
  double time_ms = 0.0;
  bool roi_fallback = false;
};

struct EvalReport {
  Method method = Method::MultiPath;
  std::vector<FrameResult> frames;
  Stats position_mm;
  Stats orientation_deg;
  Stats time_ms;
  int roi_fallbacks = 0;

  /// Aggregates from `frames`.
  void finalize();
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// frame_id,position_mm,orientation_deg,time_ms,qw,qx,qy,qz,tx,ty,tz at full
/// double precision.
void write_frames_csv(const std::filesystem::path& path, const EvalReport& r);
/// Method, position and orientation error as mean +- std.
std::string accuracy_table(std::span<const EvalReport> reports);

struct MethodTiming {
  Method method = Method::MultiPath;
  std::string setup_kind;                // "template build" or "training"
  std::optional<double> setup_seconds;   // absent if the artifact has no record
  std::vector<double> per_image_ms;      // warmup excluded
  Stats per_image;
};

struct BenchReport {
  int frames = 0;
  int warmup = 0;
  std::vector<MethodTiming> methods;
};

void to_json(nlohmann::json& j, const BenchReport& r);
/// Setup row and per-image row, one column per method.
std::string timing_table(const BenchReport& r);

/// Renders the dataset into out_dir, then simulates a head scan and writes
/// the ICP template (template.hppc, with template.json holding its build
/// time).
Dataset cmd_gen(const RunConfig& cfg);

struct DetectTrainSummary {
  LinearDetector detector;
  FrameTrainReport report;
  int eval_frames = 0;
  int within_10px = 0;  // test-split detections within 10 px of the oracle centre
};

/// Trains on the train split; writes detector.json and detect_report.json.
DetectTrainSummary cmd_detect_train(const RunConfig& cfg);

struct TrainSummary {
  Method method = Method::MultiPath;
  nn::TrainResult result;
  std::size_t parameters = 0;
  int roi_fallbacks = 0;
};

/// Trains methods[0] (single- or multi-path) on the train split with the
/// val split for monitoring. Writes model.hpnn, loss.csv and
/// train_report.json.
TrainSummary cmd_train(const RunConfig& cfg);

/// Per-frame errors on the test split for each method. Writes report.json,
/// report.txt and frames_<method>.csv.
std::vector<EvalReport> cmd_eval(const RunConfig& cfg);

/// Serial per-image timing on the test split (cycled if short). Writes
/// bench.json and bench.txt.
BenchReport cmd_bench(const RunConfig& cfg);

}  // namespace headpose::harness
