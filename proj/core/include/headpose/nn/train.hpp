#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "headpose/geometry.hpp"
#include "headpose/image.hpp"
#include "headpose/nn/adam.hpp"
#include "headpose/nn/model.hpp"
#include "headpose/roi_detector.hpp"

namespace headpose::nn {

/// Depth is divided by this before entering the network; colour and IR are
/// already in [0, 1].
inline constexpr double kDepthScaleMm = 1200.0;

/// Full frame area-averaged by cfg.downsample: 1 x H/f x W/f x C.
Tensor4<float> full_input(const Frame& frame, const ArchConfig& cfg);
/// cfg.crop square around the ROI (see headpose::crop): 1 x crop x crop x C.
Tensor4<float> crop_input(const Frame& frame, const Roi& roi, const ArchConfig& cfg);

/// Stacked network inputs and scaled targets. `crop` is empty (n = 0) for
/// single-path models.
struct TrainingSet {
  Tensor4<float> full;
  Tensor4<float> crop;
  Tensor4<float> target;
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  /// Inputs for rows [begin, end) in model order.
  std::vector<Tensor4<float>> inputs(std::size_t begin, std::size_t end) const;
  Tensor4<float> targets(std::size_t begin, std::size_t end) const;
};

/// Per frame: full input, crop around rois[k] when with_crop, and
/// pose_to_target(ground truth). Throws ValidationError on size mismatch.
TrainingSet make_training_set(std::span<const Frame> frames, std::span<const Roi> rois, const ArchConfig& cfg,
                              const WorkspaceBounds& bounds, bool with_crop);

/// Per-output min-max rescaling on top of pose_to_target, fitted on the
/// training targets so every output spans [0, weight] (the quaternion part of
/// pose_to_target only fills a narrow band). Default is the identity.
struct TargetScaling {
  std::array<double, kPoseOutputs> lo{};
  std::array<double, kPoseOutputs> span{1, 1, 1, 1, 1, 1, 1};

  /// Empty weights mean 1 for every output.
  static TargetScaling fit(const Tensor4<float>& targets, std::span<const double> weights = {});
  void apply(Tensor4<float>& targets) const;
  std::array<double, kPoseOutputs> invert(std::span<const float> row) const;
};

void to_json(nlohmann::json& j, const TargetScaling& s);
void from_json(const nlohmann::json& j, TargetScaling& s);

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  int batch_size = 4;
  int epochs = 60;
  double learning_rate = 3e-3;
  /// Cosine decays per epoch from learning_rate to final_lr_fraction of it.
  LrSchedule schedule = LrSchedule::Cosine;
  double final_lr_fraction = 0.01;
  /// Fit a TargetScaling on the training targets before training.
  bool rescale_targets = true;
  /// Rescaled target range per output (x, y, z, qw, qx, qy, qz); a larger
  /// range weighs that output more in the MSE.
  std::array<double, kPoseOutputs> output_weights{3, 3, 4, 1, 1, 1, 1};
  std::uint64_t seed = 1;
  AdamConfig adam;  // learning_rate is taken from above

  void validate() const;
  double learning_rate_at(int epoch) const;  // epoch is 1-based
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochLoss {
  int epoch = 0;
  double train_mse = 0.0;  // mean over the epoch's minibatches, weighted by size
  double val_mse = 0.0;    // after the epoch; NaN without a validation set
};

struct TrainResult {
  std::vector<EpochLoss> curve;
  double initial_val_mse = 0.0;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

/// Epoch-shuffled minibatch Adam on MSE. Throws ValidationError on an empty
/// set and RuntimeError (with epoch, batch and frame ids) on a non-finite
/// loss.
TrainResult train_model(Model<float>& model, const TrainingSet& train, const TrainingSet* val, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {});

/// Mean squared error of the model over a set, evaluated in chunks.
double evaluate_mse(const Model<float>& model, const TrainingSet& set, std::size_t chunk = 64);

void write_loss_csv(const std::filesystem::path& path, std::span<const EpochLoss> curve);

/// Trained network with everything needed to turn a frame into a pose.
struct PoseRegressor {
  Model<float> model;
  ArchConfig arch;
  WorkspaceBounds bounds;
  TargetScaling scaling;

  bool uses_crop() const { return model.input_count() == 2; }
  /// Forward pass and target_to_pose on a 1 x 7 output.
  RigidTransform predict_pose(const Frame& frame, const Roi& roi) const;
};

/// Renormalized, canonicalized pose of one output row.
RigidTransform output_to_pose(const Tensor4<float>& out, int row, const WorkspaceBounds& bounds,
                             const TargetScaling& scaling = {});

/// "HPNN", u32 version, u32 JSON length, JSON (spec, arch, bounds, parameter
/// count), then little-endian f32 parameters in node order.
void save_checkpoint(const std::filesystem::path& path, const PoseRegressor& r);
PoseRegressor load_checkpoint(const std::filesystem::path& path);

}  // namespace headpose::nn
