#include <algorithm>
#include <cmath>
#include <string>

#include "headpose/errors.hpp"
#include "headpose/roi_detector.hpp"

namespace headpose {

HogBlockGrid::HogBlockGrid(const GrayImage& img, const HogParams& params) : params_(params) {
  if (params.cell < 1 || params.bins < 1 || params.block < 1) {
    throw ValidationError("HOG cell, bins and block must be >= 1");
  }
  const int min_px = params.cell * params.block;
  if (img.width < min_px || img.height < min_px) {
    throw ValidationError("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " is smaller than one HOG block (" + std::to_string(min_px) + " px)");
  }
  cells_x_ = img.width / params.cell;
  cells_y_ = img.height / params.cell;
  blocks_x_ = cells_x_ - params.block + 1;
  blocks_y_ = cells_y_ - params.block + 1;

  const int bins = params.bins;
  const double bin_width = 180.0 / bins;
  std::vector<double> hist(static_cast<std::size_t>(cells_x_) * cells_y_ * bins, 0.0);
  const int w = img.width;
  const int h = img.height;
  for (int v = 0; v < cells_y_ * params.cell; ++v) {
    for (int u = 0; u < cells_x_ * params.cell; ++u) {
      const double gx = img.at(v, std::min(u + 1, w - 1)) - img.at(v, std::max(u - 1, 0));
      const double gy = img.at(std::min(v + 1, h - 1), u) - img.at(std::max(v - 1, 0), u);
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double angle = std::atan2(gy, gx) * 180.0 / kPi;
      if (angle < 0.0) angle += 180.0;
      if (angle >= 180.0) angle -= 180.0;
      // Linear interpolation between the two nearest bin centres.
      const double pos = angle / bin_width - 0.5;
      const int lo = static_cast<int>(std::floor(pos));
      const double frac = pos - lo;
      const int b0 = (lo + bins) % bins;
      const int b1 = (lo + 1) % bins;
      double* cell = &hist[(static_cast<std::size_t>(v / params.cell) * cells_x_ + u / params.cell) * bins];
      cell[b0] += mag * (1.0 - frac);
      cell[b1] += mag * frac;
    }
  }

  const int len = block_length();
  blocks_.assign(static_cast<std::size_t>(blocks_x_) * blocks_y_ * len, 0.0f);
  std::vector<double> buf(len);
  for (int by = 0; by < blocks_y_; ++by) {
    for (int bx = 0; bx < blocks_x_; ++bx) {
      int k = 0;
      double norm2 = 0.0;
      for (int cy = 0; cy < params.block; ++cy) {
        for (int cx = 0; cx < params.block; ++cx) {
          const double* cell = &hist[(static_cast<std::size_t>(by + cy) * cells_x_ + bx + cx) * bins];
          for (int b = 0; b < bins; ++b) {
            buf[k++] = cell[b];
            norm2 += cell[b] * cell[b];
          }
        }
      }
      const double inv = 1.0 / std::sqrt(norm2 + kHogEpsilon * kHogEpsilon);
      float* out = &blocks_[(static_cast<std::size_t>(by) * blocks_x_ + bx) * len];
      for (int i = 0; i < len; ++i) out[i] = static_cast<float>(buf[i] * inv);
    }
  }
}

std::span<const float> HogBlockGrid::block(int bx, int by) const {
  const std::size_t len = block_length();
  return {blocks_.data() + (static_cast<std::size_t>(by) * blocks_x_ + bx) * len, len};
}

std::vector<float> HogBlockGrid::window(int cx0, int cy0, int cells_w, int cells_h) const {
  const int bw = cells_w - params_.block + 1;
  const int bh = cells_h - params_.block + 1;
  if (cx0 < 0 || cy0 < 0 || bw < 1 || bh < 1 || cx0 + bw > blocks_x_ || cy0 + bh > blocks_y_) {
    throw ValidationError("HOG window outside the block grid");
  }
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(bw) * bh * block_length());
  for (int by = 0; by < bh; ++by) {
    for (int bx = 0; bx < bw; ++bx) {
      const auto b = block(cx0 + bx, cy0 + by);
      out.insert(out.end(), b.begin(), b.end());
    }
  }
  return out;
}

double HogBlockGrid::score(int cx0, int cy0, int cells_w, int cells_h, std::span<const double> weights) const {
  const int bw = cells_w - params_.block + 1;
  const int bh = cells_h - params_.block + 1;
  const std::size_t len = block_length();
  double s = 0.0;
  std::size_t k = 0;
  for (int by = 0; by < bh; ++by) {
    for (int bx = 0; bx < bw; ++bx) {
      const auto b = block(cx0 + bx, cy0 + by);
      for (std::size_t i = 0; i < len; ++i) s += weights[k++] * b[i];
    }
  }
  return s;
}

HogDescriptor hog_features(const GrayImage& img, const HogParams& params) {
  const HogBlockGrid grid(img, params);
  HogDescriptor d;
  d.params = params;
  d.blocks_x = grid.blocks_x();
  d.blocks_y = grid.blocks_y();
  d.features = grid.window(0, 0, grid.cells_x(), grid.cells_y());
  return d;
}

}  // namespace headpose
