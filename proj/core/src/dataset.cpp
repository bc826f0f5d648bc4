#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/parallel.hpp"
#include "headpose/phantom_sim.hpp"

namespace headpose {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::string frame_file(int id) {
  std::ostringstream s;
  s << "frames/" << std::setw(6) << std::setfill('0') << id << ".hpf";
  return s.str();
}

std::string channel_name(DetectorChannel c) { return c == DetectorChannel::Ir ? "ir" : "luminance"; }

DetectorChannel parse_channel(const std::string& s) {
  if (s == "ir") return DetectorChannel::Ir;
  if (s == "luminance") return DetectorChannel::Luminance;
  throw ValidationError("unknown detector channel: " + s);
}

}  // namespace

std::array<int, 3> split_counts(int n, double test_fraction, double val_fraction) {
  if (n < 1) throw ValidationError("dataset must contain at least one frame");
  if (test_fraction < 0.0 || val_fraction < 0.0 || test_fraction + val_fraction > 1.0) {
    throw ValidationError("split fractions must be non-negative and sum to <= 1");
  }
  const int test = static_cast<int>(std::lround(n * test_fraction));
  const int val = std::min(n - test, static_cast<int>(std::lround(n * val_fraction)));
  return {n - test - val, val, test};
}

const FrameRecord& Dataset::record(int id) const {
  if (id >= 0 && static_cast<std::size_t>(id) < frames.size() && frames[id].id == id) return frames[id];
  const auto it = std::find_if(frames.begin(), frames.end(), [id](const FrameRecord& r) { return r.id == id; });
  if (it == frames.end()) throw ValidationError("no frame with id " + std::to_string(id));
  return *it;
}

Frame Dataset::load_frame(int id) const {
  const FrameRecord& r = record(id);
  Frame f = read_frame(dir / r.file);
  if (f.width != camera.width || f.height != camera.height) {
    throw RuntimeError("frame " + std::to_string(id) + " size does not match camera");
  }
  f.id = r.id;
  f.ground_truth = r.pose;
  f.noise_seed = r.noise_seed;
  return f;
}

Dataset generate_dataset(const HeadPhantom& phantom, const VirtualCamera& camera, const TrajectoryPlan& plan,
                         const fs::path& out_dir, const DatasetOptions& options) {
  camera.validate();
  if (plan.poses.empty()) throw ValidationError("trajectory plan has no poses");

  std::vector<std::size_t> chosen;
  const std::size_t total = plan.poses.size();
  const std::size_t n = options.max_frames ? std::min<std::size_t>(total, std::max(1, *options.max_frames)) : total;
  for (std::size_t i = 0; i < n; ++i) chosen.push_back(i * total / n);

  std::error_code ec;
  fs::create_directories(out_dir / "frames", ec);
  if (ec) throw RuntimeError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  Dataset ds;
  ds.dir = out_dir;
  ds.camera = camera;
  ds.bounds = plan.config.workspace;
  ds.detector_channel = options.detector_channel;
  ds.phantom_seed = options.phantom_seed;
  ds.phantom_resolution = options.phantom_resolution;
  ds.frames.resize(n);
  std::set<int> ids;
  for (std::size_t i = 0; i < n; ++i) {
    FrameRecord& r = ds.frames[i];
    r.id = static_cast<int>(i);
    r.file = frame_file(r.id);
    r.pose = plan.poses[chosen[i]].pose;
    r.cell = plan.poses[chosen[i]].cell;
    r.noise_seed = splitmix64(options.noise_seed ^ (static_cast<std::uint64_t>(r.id) << 20));
    if (!ids.insert(r.id).second) throw ValidationError("duplicate frame id " + std::to_string(r.id));
    if (!ds.bounds.contains(r.pose.translation)) {
      throw ValidationError("planned pose for frame " + std::to_string(r.id) + " is outside the workspace bounds");
    }
  }

  parallel_for(n, [&](std::size_t i) {
    const FrameRecord& r = ds.frames[i];
    Frame f = render_frame(phantom, camera, r.pose, r.noise_seed);
    write_frame(out_dir / r.file, f);
  });

  const auto counts = split_counts(static_cast<int>(n), options.test_fraction, options.val_fraction);
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  std::mt19937_64 rng(options.split_seed);
  std::shuffle(order.begin(), order.end(), rng);
  ds.test.assign(order.begin(), order.begin() + counts[2]);
  ds.val.assign(order.begin() + counts[2], order.begin() + counts[2] + counts[1]);
  ds.train.assign(order.begin() + counts[2] + counts[1], order.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.val.begin(), ds.val.end());
  std::sort(ds.test.begin(), ds.test.end());

  json frames = json::array();
  for (const auto& r : ds.frames) {
    frames.push_back({{"id", r.id}, {"file", r.file}, {"pose", r.pose}, {"noise_seed", r.noise_seed}, {"cell", r.cell}});
  }
  const auto& tc = plan.config;
  json manifest = {
      {"format", "headpose-dataset-1"},
      {"camera", camera},
      {"bounds", ds.bounds},
      {"detector_channel", channel_name(ds.detector_channel)},
      {"phantom", {{"seed", options.phantom_seed}, {"resolution", options.phantom_resolution}}},
      {"trajectory",
       {{"grid_dims", tc.grid_dims},
        {"rotations_per_cell", tc.rotations_per_cell},
        {"rotation_range_deg", tc.rotation_range_deg},
        {"position_jitter", tc.position_jitter},
        {"seed", tc.seed}}},
      {"noise_seed", options.noise_seed},
      {"split", {{"seed", options.split_seed}, {"train", ds.train}, {"val", ds.val}, {"test", ds.test}}},
      {"frames", frames},
  };
  std::ofstream os(out_dir / "manifest.json", std::ios::trunc);
  if (!os) throw RuntimeError("cannot write manifest in " + out_dir.string());
  os << manifest.dump(1) << '\n';
  if (!os) throw RuntimeError("failed writing manifest in " + out_dir.string());
  return ds;
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ValidationError("no manifest.json in " + dir.string());
  json m;
  try {
    is >> m;
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  Dataset ds;
  ds.dir = dir;
  try {
    ds.camera = m.at("camera").get<VirtualCamera>();
    ds.bounds = m.at("bounds").get<WorkspaceBounds>();
    ds.detector_channel = parse_channel(m.value("detector_channel", std::string("ir")));
    if (m.contains("phantom")) {
      ds.phantom_seed = m["phantom"].value("seed", std::uint64_t{0});
      ds.phantom_resolution = m["phantom"].value("resolution", 0);
    }
    std::set<int> ids;
    for (const auto& f : m.at("frames")) {
      FrameRecord r;
      r.id = f.at("id").get<int>();
      r.file = f.at("file").get<std::string>();
      r.pose = f.at("pose").get<RigidTransform>();
      r.noise_seed = f.at("noise_seed").get<std::uint64_t>();
      r.cell = f.value("cell", 0);
      if (!ids.insert(r.id).second) throw ValidationError("duplicate frame id " + std::to_string(r.id));
      ds.frames.push_back(std::move(r));
    }
    const auto& split = m.at("split");
    ds.train = split.at("train").get<std::vector<int>>();
    ds.val = split.at("val").get<std::vector<int>>();
    ds.test = split.at("test").get<std::vector<int>>();
    std::set<int> seen;
    for (const auto* part : {&ds.train, &ds.val, &ds.test}) {
      for (int id : *part) {
        if (!ids.count(id)) throw ValidationError("split references unknown frame " + std::to_string(id));
        if (!seen.insert(id).second) throw ValidationError("frame " + std::to_string(id) + " in more than one split");
      }
    }
    if (seen.size() != ids.size()) throw ValidationError("split does not cover every frame");
  } catch (const json::exception& e) {
    throw ValidationError("invalid manifest in " + dir.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace headpose
