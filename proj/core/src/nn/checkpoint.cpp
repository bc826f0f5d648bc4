#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"
#include "headpose/nn/train.hpp"

namespace headpose::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'H', 'P', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const PoseRegressor& r) {
  nlohmann::json meta;
  meta["spec"] = r.model.spec();
  meta["arch"] = r.arch;
  meta["bounds"] = r.bounds;
  meta["target_scaling"] = r.scaling;
  meta["parameters"] = r.model.parameter_count();
  const std::string text = meta.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& p = r.model.params();
  os.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
  if (!os) throw RuntimeError("failed writing " + path.string());
}

PoseRegressor load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path.string());
  char magic[4] = {};
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw ValidationError(path.string() + " is not an HPNN checkpoint");
  const std::uint32_t version = read_u32(is);
  if (version != kVersion) throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t len = read_u32(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw ValidationError("truncated checkpoint header in " + path.string());
  PoseRegressor r;
  ModelSpec spec;
  std::size_t count = 0;
  try {
    const auto meta = nlohmann::json::parse(text);
    spec = meta.at("spec").get<ModelSpec>();
    r.arch = meta.at("arch").get<ArchConfig>();
    r.bounds = meta.at("bounds").get<WorkspaceBounds>();
    if (meta.contains("target_scaling")) r.scaling = meta.at("target_scaling").get<TargetScaling>();
    count = meta.at("parameters").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  std::vector<float> params(count);
  is.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!is) throw ValidationError("truncated parameters in " + path.string());
  r.model = Model<float>(std::move(spec), std::move(params));
  return r;
}

}  // namespace headpose::nn
