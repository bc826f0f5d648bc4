#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/harness.hpp"

namespace {

using namespace headpose;
using namespace headpose::harness;

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string data;
  std::vector<std::string> methods;
  std::string single_model;
  std::string multi_model;
  std::string template_path;
  std::string detector;
  std::string roi_source;
  int frames = 0;
  int warmup = -1;
  int epochs = -1;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--seed", f.seed, "Seed override");
  cmd->add_option("--out", f.out, "Output directory")->required();
  cmd->add_flag("--quiet", f.quiet, "No progress output");
}

void add_data(CLI::App* cmd, Flags& f) { cmd->add_option("--data", f.data, "Dataset directory")->required(); }

void add_artifacts(CLI::App* cmd, Flags& f) {
  cmd->add_option("--method", f.methods, "model-based, single-path or multi-path (repeatable)");
  cmd->add_option("--single-model", f.single_model, "Single-path checkpoint");
  cmd->add_option("--multi-model", f.multi_model, "Multi-path checkpoint");
  cmd->add_option("--template", f.template_path, "ICP template (default: <data>/template.hppc)");
  cmd->add_option("--detector", f.detector, "Face detector JSON");
  cmd->add_option("--roi-source", f.roi_source, "detector or oracle")->check(CLI::IsMember({"detector", "oracle"}));
}

RunConfig resolve(const Flags& f, const CLI::App* cmd) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (cmd->count("--seed")) c.seed = f.seed;
  if (!f.out.empty()) c.out_dir = f.out;
  if (!f.data.empty()) c.data_dir = f.data;
  if (!f.methods.empty()) {
    c.methods.clear();
    for (const auto& m : f.methods) c.methods.push_back(parse_method(m));
  }
  if (!f.single_model.empty()) c.single_model = f.single_model;
  if (!f.multi_model.empty()) c.multi_model = f.multi_model;
  if (!f.template_path.empty()) c.template_path = f.template_path;
  if (!f.detector.empty()) c.detector_path = f.detector;
  if (!f.roi_source.empty()) c.roi_source = f.roi_source == "oracle" ? RoiSourceKind::Oracle : RoiSourceKind::Detector;
  if (f.frames > 0) c.bench.frames = f.frames;
  if (f.warmup >= 0) c.bench.warmup = f.warmup;
  if (f.epochs >= 0) c.training.epochs = f.epochs;
  if (!f.quiet) c.log = &std::cerr;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head pose estimation: dataset generation, training, evaluation and timing"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen", "Render a synthetic dataset and the ICP template");
  add_common(gen, f);

  auto* detect = app.add_subcommand("detect-train", "Train the HOG face detector on the train split");
  add_common(detect, f);
  add_data(detect, f);

  auto* train = app.add_subcommand("train", "Train a single- or multi-path network");
  add_common(train, f);
  add_data(train, f);
  train->add_option("--arch", f.methods, "single or multi")->required()->expected(1);
  train->add_option("--detector", f.detector, "Face detector JSON (multi-path crops)");
  train->add_option("--roi-source", f.roi_source, "detector or oracle")->check(CLI::IsMember({"detector", "oracle"}));
  train->add_option("--epochs", f.epochs, "Epoch override");

  auto* eval = app.add_subcommand("eval", "Per-frame pose errors on the test split");
  add_common(eval, f);
  add_data(eval, f);
  add_artifacts(eval, f);

  auto* bench = app.add_subcommand("bench", "Per-image processing time and setup time");
  add_common(bench, f);
  add_data(bench, f);
  add_artifacts(bench, f);
  bench->add_option("--frames", f.frames, "Timed frames (default 200)");
  bench->add_option("--warmup", f.warmup, "Untimed warmup frames (default 10)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const auto ds = cmd_gen(resolve(f, gen));
      std::cout << "wrote " << ds.frames.size() << " frames (" << ds.train.size() << " train, " << ds.val.size()
                << " val, " << ds.test.size() << " test) to " << ds.dir.string() << "\n";
    } else if (*detect) {
      const auto s = cmd_detect_train(resolve(f, detect));
      std::cout << "detector: held-out balanced accuracy " << s.report.fit.holdout_balanced_accuracy << ", "
                << s.within_10px << "/" << s.eval_frames << " test frames within 10 px\n";
    } else if (*train) {
      const auto s = cmd_train(resolve(f, train));
      std::cout << method_name(s.method) << ": " << s.parameters << " parameters, " << s.result.curve.size()
                << " epochs in " << s.result.seconds << " s";
      if (!s.result.curve.empty()) std::cout << ", final val_mse " << s.result.curve.back().val_mse;
      std::cout << "\n";
    } else if (*eval) {
      const auto reports = cmd_eval(resolve(f, eval));
      std::cout << accuracy_table(reports);
    } else if (*bench) {
      std::cout << timing_table(cmd_bench(resolve(f, bench)));
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
