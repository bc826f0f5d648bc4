#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "headpose/image.hpp"
#include "headpose/phantom_sim.hpp"

namespace headpose {

struct HogParams {
  int cell = 4;   // pixels per cell side
  int bins = 9;   // unsigned orientation bins over [0, 180)
  int block = 2;  // cells per block side; blocks slide by one cell
};

inline constexpr double kHogEpsilon = 1e-5;

/// Block-normalized HOG features of a whole image. Block order is row-major
/// over block positions, then row-major cells inside a block, then bins.
struct HogDescriptor {
  HogParams params;
  int blocks_x = 0;
  int blocks_y = 0;
  std::vector<float> features;
};

/// Normalized block vectors for every block position of an image, so that
/// any cell-aligned window descriptor is a gather from this grid.
class HogBlockGrid {
 public:
  HogBlockGrid(const GrayImage& img, const HogParams& params);

  int cells_x() const { return cells_x_; }
  int cells_y() const { return cells_y_; }
  int blocks_x() const { return blocks_x_; }
  int blocks_y() const { return blocks_y_; }
  int block_length() const { return params_.block * params_.block * params_.bins; }
  const HogParams& params() const { return params_; }

  std::span<const float> block(int bx, int by) const;
  /// Descriptor of a window spanning cells_w x cells_h cells at cell (cx0, cy0).
  std::vector<float> window(int cx0, int cy0, int cells_w, int cells_h) const;
  /// Dot product of the window descriptor with `weights` without materializing it.
  double score(int cx0, int cy0, int cells_w, int cells_h, std::span<const double> weights) const;

 private:
  HogParams params_;
  int cells_x_ = 0;
  int cells_y_ = 0;
  int blocks_x_ = 0;
  int blocks_y_ = 0;
  std::vector<float> blocks_;
};

/// Throws ValidationError if the image is smaller than one block.
HogDescriptor hog_features(const GrayImage& img, const HogParams& params = {});

/// Region of interest in pixel-index coordinates (pixel u spans u +- 0.5).
struct Roi {
  double center_u = 0.0;
  double center_v = 0.0;
  double width = 0.0;
  double height = 0.0;
  double score = 0.0;
};

struct LinearDetector {
  HogParams hog;
  int window_w = 24;
  int window_h = 24;
  int stride = 4;  // pixels, multiple of hog.cell
  double scale_step = 1.25;
  int levels = 3;
  DetectorChannel channel = DetectorChannel::Ir;
  std::vector<double> weights;
  double bias = 0.0;
  double threshold = 0.0;

  int cells_w() const { return window_w / hog.cell; }
  int cells_h() const { return window_h / hog.cell; }
  std::size_t descriptor_length() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const LinearDetector& d);
void from_json(const nlohmann::json& j, LinearDetector& d);
void save_detector(const std::filesystem::path& path, const LinearDetector& d);
LinearDetector load_detector(const std::filesystem::path& path);

struct DetectorTrainOptions {
  double ridge_lambda = 1e-3;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 3;
};

struct DetectorTrainReport {
  double holdout_balanced_accuracy = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

inline constexpr std::size_t kMinWindowsPerClass = 50;

/// Ridge regression (targets +1/-1, unregularized bias) on a stratified 80%
/// of the windows; the threshold maximizes balanced accuracy on the rest.
/// `layout` supplies window geometry and HOG parameters; its weights are
/// replaced.
LinearDetector train_detector(std::span<const std::vector<float>> positives,
                              std::span<const std::vector<float>> negatives, const LinearDetector& layout,
                              const DetectorTrainOptions& options = {}, DetectorTrainReport* report = nullptr);

/// Every evaluated window, mapped to base resolution.
std::vector<Roi> score_windows(const GrayImage& img, const LinearDetector& detector);
/// Highest-scoring window at or above the threshold, or nothing.
std::optional<Roi> detect(const GrayImage& img, const LinearDetector& detector);
std::optional<Roi> detect(const Frame& frame, const LinearDetector& detector);

/// Re-centres the ROI on the centroid of the pixels with depth inside a
/// window `grow` times the ROI size, repeated `passes` times. Size and score
/// are kept; an empty window leaves the ROI unchanged.
Roi refine_roi_depth(const Frame& frame, const Roi& roi, double grow = 1.5, int passes = 2);

/// Bounding box of the projected face-region points, clipped to the image.
Roi oracle_roi(const VirtualCamera& camera, const RigidTransform& pose, const HeadPhantom& phantom);

/// crop_px x crop_px window centred on the ROI, shifted to stay inside the
/// image. The pose and id are kept. Throws ValidationError if crop_px exceeds
/// the frame.
Frame crop(const Frame& frame, const Roi& roi, int crop_px);

struct WindowSet {
  std::vector<std::vector<float>> positives;
  std::vector<std::vector<float>> negatives;
};

/// Training windows from labelled frames: the window nearest the oracle ROI
/// at the best-matching pyramid level is positive; randomly drawn windows
/// whose centres are at least `min_negative_offset_px` away are negative.
WindowSet collect_windows(std::span<const Frame> frames, const VirtualCamera& camera, const HeadPhantom& phantom,
                          const LinearDetector& layout, int negatives_per_frame = 12,
                          double min_negative_offset_px = 6.0, std::uint64_t seed = 5);

struct FrameTrainOptions {
  DetectorTrainOptions fit;
  int negatives_per_frame = 12;
  double min_negative_offset_px = 6.0;
  std::uint64_t seed = 5;
  int mining_rounds = 2;           // hard-negative mining passes after the first fit
  int hard_negatives_per_frame = 3;
};

struct FrameTrainReport {
  DetectorTrainReport fit;
  std::vector<std::size_t> hard_negatives_added;  // per mining round
};

/// collect_windows, fit, then repeatedly add the highest-scoring windows
/// that pass the threshold away from the face as negatives and refit.
LinearDetector train_detector_on_frames(std::span<const Frame> frames, const VirtualCamera& camera,
                                        const HeadPhantom& phantom, const LinearDetector& layout,
                                        const FrameTrainOptions& options = {}, FrameTrainReport* report = nullptr);

}  // namespace headpose
