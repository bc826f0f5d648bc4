#include "headpose/image.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "headpose/errors.hpp"

namespace headpose {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

template <typename T>
void put(std::ostream& os, T value) {
  value = to_little(value);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw RuntimeError("unexpected end of file");
  return to_little(value);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeError("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open for reading: " + path.string());
  return is;
}

void check_magic(std::istream& is, const char* magic, const std::filesystem::path& path) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) {
    throw RuntimeError("bad magic in " + path.string() + ", expected " + magic);
  }
}

}  // namespace

Frame Frame::blank(int height, int width) {
  if (height <= 0 || width <= 0) throw ValidationError("frame dimensions must be positive");
  Frame f;
  f.height = height;
  f.width = width;
  f.data.assign(static_cast<std::size_t>(kFrameChannels) * height * width, 0.0f);
  return f;
}

std::span<float> Frame::channel(Channel c) {
  return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
}

std::span<const float> Frame::channel(Channel c) const {
  return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
}

GrayImage ir_image(const Frame& f) {
  GrayImage g(f.height, f.width);
  const auto ir = f.channel(Channel::Ir);
  std::copy(ir.begin(), ir.end(), g.px.begin());
  return g;
}

GrayImage luminance_image(const Frame& f) {
  GrayImage g(f.height, f.width);
  const auto r = f.channel(Channel::R);
  const auto gr = f.channel(Channel::G);
  const auto b = f.channel(Channel::B);
  for (std::size_t i = 0; i < g.px.size(); ++i) {
    g.px[i] = 0.299f * r[i] + 0.587f * gr[i] + 0.114f * b[i];
  }
  return g;
}

GrayImage gray_from(const Frame& f, DetectorChannel c) {
  return c == DetectorChannel::Ir ? ir_image(f) : luminance_image(f);
}

GrayImage resize_bilinear(const GrayImage& img, int height, int width) {
  if (height <= 0 || width <= 0) throw ValidationError("resize target must be positive");
  GrayImage out(height, width);
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  for (int v = 0; v < height; ++v) {
    const double y = std::clamp((v + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(y);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fy = y - y0;
    for (int u = 0; u < width; ++u) {
      const double x = std::clamp((u + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(x);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double fx = x - x0;
      const double top = (1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1);
      const double bottom = (1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1);
      out.at(v, u) = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

void write_frame(const std::filesystem::path& path, const Frame& frame) {
  if (frame.data.size() != static_cast<std::size_t>(kFrameChannels) * frame.plane_size()) {
    throw ValidationError("frame buffer size does not match dimensions");
  }
  auto os = open_out(path);
  os.write("HPF1", 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(frame.height));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(frame.width));
  put<std::uint32_t>(os, kFrameChannels);
  for (float v : frame.data) put<float>(os, v);
  if (!os) throw RuntimeError("write failed: " + path.string());
}

Frame read_frame(const std::filesystem::path& path) {
  auto is = open_in(path);
  check_magic(is, "HPF1", path);
  const auto h = get<std::uint32_t>(is);
  const auto w = get<std::uint32_t>(is);
  const auto c = get<std::uint32_t>(is);
  if (c != kFrameChannels || h == 0 || w == 0 || h > 1u << 15 || w > 1u << 15) {
    throw RuntimeError("bad frame header in " + path.string());
  }
  Frame f = Frame::blank(static_cast<int>(h), static_cast<int>(w));
  for (float& v : f.data) v = get<float>(is);
  return f;
}

void write_point_cloud(const std::filesystem::path& path, std::span<const Vec3> points) {
  auto os = open_out(path);
  os.write("HPPC", 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(points.size()));
  for (const auto& p : points) {
    put<float>(os, static_cast<float>(p.x()));
    put<float>(os, static_cast<float>(p.y()));
    put<float>(os, static_cast<float>(p.z()));
  }
  if (!os) throw RuntimeError("write failed: " + path.string());
}

std::vector<Vec3> read_point_cloud(const std::filesystem::path& path) {
  auto is = open_in(path);
  check_magic(is, "HPPC", path);
  const auto n = get<std::uint32_t>(is);
  std::vector<Vec3> points;
  points.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const float x = get<float>(is);
    const float y = get<float>(is);
    const float z = get<float>(is);
    points.emplace_back(x, y, z);
  }
  return points;
}

}  // namespace headpose
