#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "headpose/geometry.hpp"

namespace headpose {

enum class Channel : int { R = 0, G = 1, B = 2, Depth = 3, Ir = 4 };
inline constexpr int kFrameChannels = 5;

/// Five-channel frame, channel-planar and row-major: R, G, B in [0, 1],
/// depth in millimetres (0 = no return), IR in [0, 1].
struct Frame {
  int id = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;
  RigidTransform ground_truth;  // camera -> phantom
  std::uint64_t noise_seed = 0;

  static Frame blank(int height, int width);

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  std::span<float> channel(Channel c);
  std::span<const float> channel(Channel c) const;
  float& at(Channel c, int v, int u) { return data[index(c, v, u)]; }
  float at(Channel c, int v, int u) const { return data[index(c, v, u)]; }

 private:
  std::size_t index(Channel c, int v, int u) const {
    return static_cast<std::size_t>(c) * plane_size() + static_cast<std::size_t>(v) * width + u;
  }
};

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<float> px;

  GrayImage() = default;
  GrayImage(int h, int w, float fill = 0.0f) : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int v, int u) { return px[static_cast<std::size_t>(v) * width + u]; }
  float at(int v, int u) const { return px[static_cast<std::size_t>(v) * width + u]; }
};

enum class DetectorChannel { Ir, Luminance };

GrayImage ir_image(const Frame& f);
/// Rec. 601 luma of the RGB planes.
GrayImage luminance_image(const Frame& f);
GrayImage gray_from(const Frame& f, DetectorChannel c);

/// Bilinear resampling with pixel-centre alignment and edge clamping.
GrayImage resize_bilinear(const GrayImage& img, int height, int width);

/// "HPF1" frame file: 16-byte header (magic, u32 height, u32 width,
/// u32 channels=5) then little-endian f32 planes R, G, B, D, IR.
void write_frame(const std::filesystem::path& path, const Frame& frame);
/// Pixel data only; id, pose and seed come from the dataset manifest.
Frame read_frame(const std::filesystem::path& path);

/// "HPPC" point file: magic, u32 count, then little-endian f32 xyz triples.
void write_point_cloud(const std::filesystem::path& path, std::span<const Vec3> points);
std::vector<Vec3> read_point_cloud(const std::filesystem::path& path);

}  // namespace headpose
