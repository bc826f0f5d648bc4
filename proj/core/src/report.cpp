#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/harness.hpp"

namespace headpose::harness {

using nlohmann::json;

const char* method_name(Method m) {
  switch (m) {
    case Method::ModelBased:
      return "model-based";
    case Method::SinglePath:
      return "single-path";
    case Method::MultiPath:
      return "multi-path";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "model-based" || s == "icp") return Method::ModelBased;
  if (s == "single-path" || s == "single") return Method::SinglePath;
  if (s == "multi-path" || s == "multi") return Method::MultiPath;
  throw ValidationError("unknown method '" + s + "' (expected model-based, single-path or multi-path)");
}

Stats mean_std(std::span<const double> values) {
  Stats s;
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return s;
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  return s;
}

void EvalReport::finalize() {
  std::vector<double> pos, ori, time;
  roi_fallbacks = 0;
  for (const auto& f : frames) {
    pos.push_back(f.error.position_mm);
    ori.push_back(f.error.orientation_deg);
    time.push_back(f.time_ms);
    roi_fallbacks += f.roi_fallback ? 1 : 0;
  }
  position_mm = mean_std(pos);
  orientation_deg = mean_std(ori);
  time_ms = mean_std(time);
}

namespace {

json stats_json(const Stats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

std::string pm(const Stats& s, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << s.mean << " +- " << s.std;
  return os.str();
}

}  // namespace

void to_json(json& j, const EvalReport& r) {
  json frames = json::array();
  for (const auto& f : r.frames) {
    frames.push_back({{"frame_id", f.frame_id},
                      {"position_mm", f.error.position_mm},
                      {"orientation_deg", f.error.orientation_deg},
                      {"time_ms", f.time_ms},
                      {"roi_fallback", f.roi_fallback}});
  }
  j = json{{"method", method_name(r.method)},
           {"frames", r.frames.size()},
           {"roi_fallbacks", r.roi_fallbacks},
           {"position_mm", stats_json(r.position_mm)},
           {"orientation_deg", stats_json(r.orientation_deg)},
           {"time_ms", stats_json(r.time_ms)},
           {"per_frame", frames}};
}

void write_frames_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << "frame_id,position_mm,orientation_deg,time_ms,qw,qx,qy,qz,tx,ty,tz\n" << std::setprecision(17);
  for (const auto& f : r.frames) {
    const auto q = f.predicted.rotation.wxyz();
    const auto& t = f.predicted.translation;
    os << f.frame_id << ',' << f.error.position_mm << ',' << f.error.orientation_deg << ',' << f.time_ms << ','
       << q[0] << ',' << q[1] << ',' << q[2] << ',' << q[3] << ',' << t.x() << ',' << t.y() << ',' << t.z() << '\n';
  }
  if (!os) throw RuntimeError("failed writing " + path.string());
}

std::string accuracy_table(std::span<const EvalReport> reports) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Method" << std::setw(24) << "Position error (mm)"
     << "Orientation error (deg)\n";
  for (const auto& r : reports) {
    os << std::left << std::setw(14) << method_name(r.method) << std::setw(24) << pm(r.position_mm, 2)
       << pm(r.orientation_deg, 3) << '\n';
  }
  return os.str();
}

void to_json(json& j, const BenchReport& r) {
  json methods = json::array();
  for (const auto& m : r.methods) {
    methods.push_back({{"method", method_name(m.method)},
                       {"setup_kind", m.setup_kind},
                       {"setup_seconds", m.setup_seconds ? json(*m.setup_seconds) : json(nullptr)},
                       {"per_image_ms", stats_json(m.per_image)},
                       {"samples_ms", m.per_image_ms}});
  }
  j = json{{"frames", r.frames}, {"warmup", r.warmup}, {"methods", methods}};
}

std::string timing_table(const BenchReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "";
  for (const auto& m : r.methods) os << std::setw(20) << method_name(m.method);
  os << "\n" << std::setw(18) << "Setup time";
  for (const auto& m : r.methods) {
    std::ostringstream cell;
    if (m.setup_seconds) {
      cell << std::fixed << std::setprecision(2) << *m.setup_seconds << " s";
    } else {
      cell << "n/a";
    }
    os << std::setw(20) << cell.str();
  }
  os << "\n" << std::setw(18) << "Processing time";
  for (const auto& m : r.methods) os << std::setw(20) << pm(m.per_image, 2) + " ms";
  os << '\n';
  return os.str();
}

}  // namespace headpose::harness
