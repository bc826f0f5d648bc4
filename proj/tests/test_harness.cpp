#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>
#include <unistd.h>

#include "headpose/errors.hpp"
#include "headpose/harness.hpp"

using namespace headpose;
using namespace headpose::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json load(const fs::path& p) { return json::parse(slurp(p)); }

RunConfig tiny_config(const fs::path& root) {
  RunConfig c = run_config_from_json(json::parse(R"({
    "trajectory": {"grid_dims": [2, 2, 1], "rotations_per_cell": 6},
    "dataset": {"max_frames": 24},
    "phantom": {"resolution": 6000},
    "scan": {"samples": 600},
    "training": {"epochs": 2, "batch_size": 4},
    "roi_source": "oracle",
    "bench": {"frames": 6, "warmup": 2}
  })"));
  c.data_dir = root / "data";
  return c;
}

class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fs::temp_directory_path() / ("headpose_harness_" + std::to_string(::getpid())));
    fs::remove_all(*root_);
    RunConfig c = tiny_config(*root_);
    c.out_dir = c.data_dir;
    cmd_gen(c);
    for (const char* arch : {"single", "multi"}) {
      RunConfig t = tiny_config(*root_);
      t.methods = {parse_method(arch)};
      t.out_dir = *root_ / arch;
      cmd_train(t);
    }
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }

  static RunConfig with_models() {
    RunConfig c = tiny_config(*root_);
    c.single_model = *root_ / "single" / "model.hpnn";
    c.multi_model = *root_ / "multi" / "model.hpnn";
    return c;
  }

  static inline fs::path* root_ = nullptr;
};

}  // namespace

TEST(Stats, MeanAndSampleStd) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  const Stats s = mean_std(v);
  EXPECT_DOUBLE_EQ(s.mean, 5.0);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(32.0 / 7.0));
  EXPECT_EQ(mean_std(std::vector<double>{3.0}).std, 0.0);
  EXPECT_EQ(mean_std(std::vector<double>{}).mean, 0.0);
}

TEST(Report, GroundTruthPredictionsGiveZeroErrors) {
  EvalReport r;
  r.method = Method::ModelBased;
  for (int i = 0; i < 5; ++i) {
    const RigidTransform gt{UnitQuaternion::from_axis_angle(Vec3(0.3, 1.0, -0.2).normalized(), 0.1 * i),
                            Vec3(i, -2.0 * i, 700.0)};
    FrameResult f;
    f.frame_id = i;
    f.predicted = gt;
    f.error = pose_error(f.predicted, gt);
    r.frames.push_back(f);
  }
  r.finalize();
  EXPECT_EQ(r.position_mm.mean, 0.0);
  EXPECT_EQ(r.position_mm.std, 0.0);
  EXPECT_NEAR(r.orientation_deg.mean, 0.0, 1e-6);
}

TEST(Report, TablesHaveOneRowPerMethod) {
  std::vector<EvalReport> reports(3);
  reports[0].method = Method::ModelBased;
  reports[1].method = Method::SinglePath;
  reports[2].method = Method::MultiPath;
  const std::string t = accuracy_table(reports);
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 4);
  EXPECT_NE(t.find("model-based"), std::string::npos);
  EXPECT_NE(t.find("multi-path"), std::string::npos);

  BenchReport b;
  b.methods.resize(2);
  b.methods[0].method = Method::ModelBased;
  b.methods[0].setup_seconds = 1.5;
  b.methods[1].method = Method::MultiPath;
  const std::string tt = timing_table(b);
  EXPECT_NE(tt.find("Setup time"), std::string::npos);
  EXPECT_NE(tt.find("Processing time"), std::string::npos);
  EXPECT_NE(tt.find("n/a"), std::string::npos);
}

TEST(Config, ParsesSectionsAndRejectsUnknownValues) {
  const RunConfig d = run_config_from_json(json::object());
  EXPECT_EQ(d.gen.trajectory.rotations_per_cell, 112);
  EXPECT_EQ(*d.gen.dataset.max_frames, 2000);
  EXPECT_EQ(d.methods.size(), 3u);
  EXPECT_EQ(d.roi_source, RoiSourceKind::Detector);

  const RunConfig c = run_config_from_json(json::parse(R"({
    "methods": ["multi"], "seed": 9, "training": {"epochs": 3, "learning_rate": 0.01},
    "arch": {"widths": [8, 16]}, "dataset": {"max_frames": null}, "bench": {"warmup": 0}})"));
  ASSERT_EQ(c.methods.size(), 1u);
  EXPECT_EQ(c.methods[0], Method::MultiPath);
  EXPECT_EQ(*c.seed, 9u);
  EXPECT_EQ(c.training.epochs, 3);
  EXPECT_EQ(c.training.learning_rate, 0.01);
  EXPECT_EQ(c.arch.widths, (std::vector<int>{8, 16}));
  EXPECT_FALSE(c.gen.dataset.max_frames.has_value());
  EXPECT_EQ(c.bench.warmup, 0);

  EXPECT_THROW(run_config_from_json(json::parse(R"({"roi_source": "psychic"})")), ValidationError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"methods": ["ransac"]})")), ValidationError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"training": {"epochs": "many"}})")), ValidationError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), ValidationError);
}

TEST(Method, NamesRoundTrip) {
  for (Method m : {Method::ModelBased, Method::SinglePath, Method::MultiPath}) {
    EXPECT_EQ(parse_method(method_name(m)), m);
  }
  EXPECT_EQ(parse_method("single"), Method::SinglePath);
  EXPECT_THROW(parse_method("both"), ValidationError);
}

TEST_F(TinyPipeline, GenWritesDatasetAndTemplate) {
  const Dataset ds = load_dataset(*root_ / "data");
  EXPECT_EQ(ds.frames.size(), 24u);
  EXPECT_EQ(ds.train.size() + ds.val.size() + ds.test.size(), 24u);
  EXPECT_EQ(ds.phantom_resolution, 6000);
  EXPECT_GE(load_template(*root_ / "data" / "template.hppc").points.size(), kMinTemplatePoints);
  EXPECT_TRUE(load(*root_ / "data" / "template.json").contains("build_seconds"));
}

TEST_F(TinyPipeline, GenIsByteReproducible) {
  RunConfig c = tiny_config(*root_);
  c.out_dir = *root_ / "data_again";
  cmd_gen(c);
  EXPECT_EQ(slurp(*root_ / "data" / "manifest.json"), slurp(c.out_dir / "manifest.json"));
  EXPECT_EQ(slurp(*root_ / "data" / "template.hppc"), slurp(c.out_dir / "template.hppc"));
  for (int id : {0, 7, 23}) {
    const std::string f = load_dataset(c.out_dir).record(id).file;
    EXPECT_EQ(slurp(*root_ / "data" / f), slurp(c.out_dir / f)) << f;
  }
  c.seed = 99;
  c.out_dir = *root_ / "data_seed99";
  cmd_gen(c);
  EXPECT_NE(slurp(*root_ / "data" / "manifest.json"), slurp(c.out_dir / "manifest.json"));
}

TEST_F(TinyPipeline, TrainIsByteReproducible) {
  RunConfig c = tiny_config(*root_);
  c.methods = {Method::MultiPath};
  c.out_dir = *root_ / "multi_again";
  cmd_train(c);
  EXPECT_EQ(slurp(*root_ / "multi" / "model.hpnn"), slurp(c.out_dir / "model.hpnn"));
  EXPECT_EQ(slurp(*root_ / "multi" / "loss.csv"), slurp(c.out_dir / "loss.csv"));
  const json report = load(c.out_dir / "train_report.json");
  EXPECT_EQ(report.at("parameters").get<std::size_t>(), nn::parameter_count(nn::build_multiscale_model(c.arch)));
  EXPECT_EQ(report.at("train_frames").get<int>() + report.at("val_frames").get<int>(),
            static_cast<int>(load_dataset(*root_ / "data").train.size() + load_dataset(*root_ / "data").val.size()));
}

TEST_F(TinyPipeline, TrainRejectsModelBasedAndMissingDetector) {
  RunConfig c = tiny_config(*root_);
  c.out_dir = *root_ / "bad";
  c.methods = {Method::ModelBased};
  EXPECT_THROW(cmd_train(c), ValidationError);
  c.methods = {Method::MultiPath};
  c.roi_source = RoiSourceKind::Detector;
  EXPECT_THROW(cmd_train(c), ValidationError);
}

TEST_F(TinyPipeline, EvalStatsMatchPerFrameCsv) {
  RunConfig c = with_models();
  c.out_dir = *root_ / "eval";
  const auto reports = cmd_eval(c);
  ASSERT_EQ(reports.size(), 3u);
  const json j = load(c.out_dir / "report.json");
  ASSERT_EQ(j.at("methods").size(), 3u);
  const auto test_size = load_dataset(c.data_dir).test.size();
  for (const auto& m : j.at("methods")) {
    const std::string name = m.at("method").get<std::string>();
    std::ifstream csv(c.out_dir / ("frames_" + name + ".csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line.rfind("frame_id,position_mm,orientation_deg,time_ms", 0), 0u);
    std::vector<double> pos, ori;
    while (std::getline(csv, line)) {
      std::stringstream ss(line);
      std::string cell;
      std::getline(ss, cell, ',');
      std::getline(ss, cell, ',');
      pos.push_back(std::stod(cell));
      std::getline(ss, cell, ',');
      ori.push_back(std::stod(cell));
    }
    ASSERT_EQ(pos.size(), test_size) << name;
    // Independent recomputation: two-pass mean and sample deviation.
    double sp = 0, so = 0;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      sp += pos[i];
      so += ori[i];
    }
    const double mp = sp / pos.size();
    const double mo = so / ori.size();
    double vp = 0, vo = 0;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      vp += (pos[i] - mp) * (pos[i] - mp);
      vo += (ori[i] - mo) * (ori[i] - mo);
    }
    EXPECT_EQ(m.at("position_mm").at("mean").get<double>(), mp) << name;
    EXPECT_EQ(m.at("orientation_deg").at("mean").get<double>(), mo) << name;
    EXPECT_EQ(m.at("position_mm").at("std").get<double>(), std::sqrt(vp / (pos.size() - 1))) << name;
    EXPECT_EQ(m.at("orientation_deg").at("std").get<double>(), std::sqrt(vo / (ori.size() - 1))) << name;
  }
  const std::string table = slurp(c.out_dir / "report.txt");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
}

TEST_F(TinyPipeline, EvalIsReproducibleApartFromTiming) {
  auto strip = [](json j) {
    for (auto& m : j.at("methods")) {
      m.erase("time_ms");
      for (auto& f : m.at("per_frame")) f.erase("time_ms");
    }
    return j;
  };
  RunConfig c = with_models();
  c.methods = {Method::SinglePath, Method::MultiPath};
  c.out_dir = *root_ / "eval_a";
  cmd_eval(c);
  c.out_dir = *root_ / "eval_b";
  cmd_eval(c);
  EXPECT_EQ(strip(load(*root_ / "eval_a" / "report.json")), strip(load(*root_ / "eval_b" / "report.json")));
}

TEST_F(TinyPipeline, EvalRejectsMismatchedArtifacts) {
  RunConfig c = with_models();
  c.out_dir = *root_ / "eval_bad";
  c.methods = {Method::MultiPath};
  c.multi_model = c.single_model;
  EXPECT_THROW(cmd_eval(c), ValidationError);
  c = with_models();
  c.out_dir = *root_ / "eval_bad";
  c.methods = {Method::SinglePath};
  c.single_model = *root_ / "missing.hpnn";
  EXPECT_THROW(cmd_eval(c), ValidationError);
  c.methods = {Method::ModelBased};
  c.template_path = *root_ / "missing.hppc";
  EXPECT_THROW(cmd_eval(c), ValidationError);
}

TEST_F(TinyPipeline, BenchReportsSetupAndPerImageRows) {
  RunConfig c = with_models();
  c.out_dir = *root_ / "bench";
  const BenchReport r = cmd_bench(c);
  ASSERT_EQ(r.methods.size(), 3u);
  for (const auto& m : r.methods) {
    EXPECT_EQ(m.per_image_ms.size(), 6u) << method_name(m.method);
    EXPECT_TRUE(m.setup_seconds.has_value()) << method_name(m.method);
    EXPECT_GT(m.per_image.mean, 0.0);
  }
  EXPECT_EQ(r.methods[0].setup_kind, "template build");
  EXPECT_EQ(r.methods[2].setup_kind, "training");
  const json j = load(c.out_dir / "bench.json");
  EXPECT_EQ(j.at("warmup").get<int>(), 2);
  EXPECT_EQ(j.at("methods")[1].at("samples_ms").size(), 6u);
  EXPECT_NE(slurp(c.out_dir / "bench.txt").find("Setup time"), std::string::npos);
}
