#include "headpose/nn/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"

namespace headpose::nn {

namespace {

float scaled(Channel c, float v) {
  return c == Channel::Depth ? static_cast<float>(v / kDepthScaleMm) : v;
}

void check_channels(const Frame& frame, const ArchConfig& cfg) {
  if (cfg.channels != kFrameChannels) {
    throw ValidationError("network expects " + std::to_string(cfg.channels) + " channels; frames have " +
                          std::to_string(kFrameChannels));
  }
  if (frame.height != cfg.image_height || frame.width != cfg.image_width) {
    throw ValidationError("frame is " + std::to_string(frame.height) + "x" + std::to_string(frame.width) +
                          ", network expects " + std::to_string(cfg.image_height) + "x" +
                          std::to_string(cfg.image_width));
  }
}

Tensor4<float> gather(const Tensor4<float>& src, std::span<const std::size_t> rows) {
  Tensor4<float> out(static_cast<int>(rows.size()), src.h, src.w, src.c);
  const std::size_t len = static_cast<std::size_t>(src.h) * src.w * src.c;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::memcpy(out.sample(static_cast<int>(k)), src.sample(static_cast<int>(rows[k])), sizeof(float) * len);
  }
  return out;
}

Tensor4<float> slice(const Tensor4<float>& src, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return gather(src, rows);
}

void append(Tensor4<float>& dst, const Tensor4<float>& row) {
  if (dst.n == 0) {
    dst = row;
    return;
  }
  dst.data.insert(dst.data.end(), row.data.begin(), row.data.end());
  dst.n += row.n;
}

}  // namespace

Tensor4<float> full_input(const Frame& frame, const ArchConfig& cfg) {
  check_channels(frame, cfg);
  const int f = cfg.downsample;
  Tensor4<float> out(1, cfg.full_height(), cfg.full_width(), kFrameChannels);
  const float norm = 1.0f / static_cast<float>(f * f);
  for (int ch = 0; ch < kFrameChannels; ++ch) {
    const auto c = static_cast<Channel>(ch);
    for (int y = 0; y < out.h; ++y) {
      for (int x = 0; x < out.w; ++x) {
        float sum = 0.0f;
        for (int dy = 0; dy < f; ++dy) {
          for (int dx = 0; dx < f; ++dx) sum += frame.at(c, y * f + dy, x * f + dx);
        }
        out.at(0, y, x, ch) = scaled(c, sum * norm);
      }
    }
  }
  return out;
}

Tensor4<float> crop_input(const Frame& frame, const Roi& roi, const ArchConfig& cfg) {
  check_channels(frame, cfg);
  const Frame c = crop(frame, roi, cfg.crop);
  Tensor4<float> out(1, c.height, c.width, kFrameChannels);
  for (int ch = 0; ch < kFrameChannels; ++ch) {
    const auto channel = static_cast<Channel>(ch);
    for (int y = 0; y < c.height; ++y) {
      for (int x = 0; x < c.width; ++x) out.at(0, y, x, ch) = scaled(channel, c.at(channel, y, x));
    }
  }
  return out;
}

std::vector<Tensor4<float>> TrainingSet::inputs(std::size_t begin, std::size_t end) const {
  std::vector<Tensor4<float>> out{slice(full, begin, end)};
  if (crop.n > 0) out.push_back(slice(crop, begin, end));
  return out;
}

Tensor4<float> TrainingSet::targets(std::size_t begin, std::size_t end) const { return slice(target, begin, end); }

TrainingSet make_training_set(std::span<const Frame> frames, std::span<const Roi> rois, const ArchConfig& cfg,
                              const WorkspaceBounds& bounds, bool with_crop) {
  cfg.validate();
  if (with_crop && rois.size() != frames.size()) {
    throw ValidationError("need one ROI per frame: " + std::to_string(frames.size()) + " frames, " +
                          std::to_string(rois.size()) + " ROIs");
  }
  TrainingSet set;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const Frame& f = frames[k];
    append(set.full, full_input(f, cfg));
    if (with_crop) append(set.crop, crop_input(f, rois[k], cfg));
    const PoseTarget t = pose_to_target(f.ground_truth, bounds);
    Tensor4<float> row(1, 1, 1, kPoseOutputs);
    for (int i = 0; i < kPoseOutputs; ++i) row.data[i] = static_cast<float>(t[i]);
    append(set.target, row);
    set.ids.push_back(f.id);
  }
  return set;
}

TargetScaling TargetScaling::fit(const Tensor4<float>& targets, std::span<const double> weights) {
  if (targets.n == 0 || targets.h * targets.w * targets.c != kPoseOutputs) {
    throw ValidationError("target scaling needs a non-empty N x 7 target tensor");
  }
  if (!weights.empty() && weights.size() != kPoseOutputs) throw ValidationError("need one weight per pose output");
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("output weights must be positive");
  }
  TargetScaling s;
  std::array<double, kPoseOutputs> hi{};
  for (int i = 0; i < kPoseOutputs; ++i) s.lo[i] = hi[i] = targets.sample(0)[i];
  for (int r = 1; r < targets.n; ++r) {
    for (int i = 0; i < kPoseOutputs; ++i) {
      s.lo[i] = std::min<double>(s.lo[i], targets.sample(r)[i]);
      hi[i] = std::max<double>(hi[i], targets.sample(r)[i]);
    }
  }
  for (int i = 0; i < kPoseOutputs; ++i) {
    s.span[i] = hi[i] - s.lo[i] > 1e-9 ? hi[i] - s.lo[i] : 1.0;
    if (!weights.empty()) s.span[i] /= weights[i];
  }
  return s;
}

void TargetScaling::apply(Tensor4<float>& targets) const {
  for (int r = 0; r < targets.n; ++r) {
    float* row = targets.sample(r);
    for (int i = 0; i < kPoseOutputs; ++i) row[i] = static_cast<float>((row[i] - lo[i]) / span[i]);
  }
}

std::array<double, kPoseOutputs> TargetScaling::invert(std::span<const float> row) const {
  std::array<double, kPoseOutputs> t{};
  for (int i = 0; i < kPoseOutputs; ++i) t[i] = lo[i] + span[i] * row[i];
  return t;
}

void to_json(nlohmann::json& j, const TargetScaling& s) { j = nlohmann::json{{"lo", s.lo}, {"span", s.span}}; }

void from_json(const nlohmann::json& j, TargetScaling& s) {
  s.lo = j.at("lo").get<std::array<double, kPoseOutputs>>();
  s.span = j.at("span").get<std::array<double, kPoseOutputs>>();
  for (double v : s.span) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("target scaling spans must be positive");
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  if (epochs < 0) throw ValidationError("epoch count must be >= 0");
  if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
    throw ValidationError("final_lr_fraction must lie in (0, 1]");
  }
  for (double w : output_weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("output weights must be positive");
  }
  AdamConfig a = adam;
  a.learning_rate = learning_rate;
  a.validate();
}

double TrainConfig::learning_rate_at(int epoch) const {
  if (schedule == LrSchedule::Constant || epochs <= 1) return learning_rate;
  const double progress = static_cast<double>(epoch - 1) / static_cast<double>(epochs - 1);
  const double f = final_lr_fraction + (1.0 - final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return learning_rate * f;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},  {"epochs", c.epochs},         {"learning_rate", c.learning_rate},
                     {"schedule", c.schedule == LrSchedule::Cosine ? "cosine" : "constant"},
                     {"final_lr_fraction", c.final_lr_fraction}, {"rescale_targets", c.rescale_targets},
                     {"output_weights", c.output_weights},
                     {"seed", c.seed},              {"beta1", c.adam.beta1},      {"beta2", c.adam.beta2},
                     {"epsilon", c.adam.epsilon}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  const std::string schedule = j.value("schedule", std::string("cosine"));
  if (schedule != "cosine" && schedule != "constant") throw ValidationError("unknown schedule '" + schedule + "'");
  c.schedule = schedule == "cosine" ? LrSchedule::Cosine : LrSchedule::Constant;
  c.final_lr_fraction = j.value("final_lr_fraction", d.final_lr_fraction);
  c.rescale_targets = j.value("rescale_targets", d.rescale_targets);
  c.output_weights = j.value("output_weights", d.output_weights);
  c.seed = j.value("seed", d.seed);
  c.adam.beta1 = j.value("beta1", d.adam.beta1);
  c.adam.beta2 = j.value("beta2", d.adam.beta2);
  c.adam.epsilon = j.value("epsilon", d.adam.epsilon);
}

double evaluate_mse(const Model<float>& model, const TrainingSet& set, std::size_t chunk) {
  if (set.size() == 0) throw ValidationError("cannot evaluate on an empty set");
  double sum = 0.0;
  for (std::size_t begin = 0; begin < set.size(); begin += chunk) {
    const std::size_t end = std::min(set.size(), begin + chunk);
    const auto inputs = set.inputs(begin, end);
    const auto pred = model.predict(inputs);
    const auto target = set.targets(begin, end);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      const double d = static_cast<double>(pred.data[i]) - target.data[i];
      sum += d * d;
    }
  }
  return sum / static_cast<double>(set.size() * kPoseOutputs);
}

TrainResult train_model(Model<float>& model, const TrainingSet& train, const TrainingSet* val, const TrainConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.size() == 0) throw ValidationError("empty training set");
  if ((train.crop.n > 0) != (model.input_count() == 2)) {
    throw ValidationError("training set inputs do not match the model's input count");
  }
  const auto start = std::chrono::steady_clock::now();
  AdamConfig adam = cfg.adam;
  adam.learning_rate = cfg.learning_rate;
  AdamState<float> state(model.parameter_count(), adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const bool has_val = val && val->size() > 0;

  TrainResult result;
  result.initial_val_mse = has_val ? evaluate_mse(model, *val) : std::numeric_limits<double>::quiet_NaN();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    state.config.learning_rate = cfg.learning_rate_at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double weighted = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      std::vector<Tensor4<float>> inputs{gather(train.full, rows)};
      if (train.crop.n > 0) inputs.push_back(gather(train.crop, rows));
      const auto pred = model.forward(inputs);
      const auto [loss, grad] = mse_loss(pred, gather(train.target, rows));
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite training loss in epoch " << epoch << ", batch " << begin / batch << " (frames";
        for (auto r : rows) os << ' ' << train.ids[r];
        os << ")";
        throw RuntimeError(os.str());
      }
      model.zero_grad();
      model.backward(grad);
      adam_step<float>(model.params(), model.grads(), state, model.blocks());
      weighted += static_cast<double>(loss) * static_cast<double>(rows.size());
    }
    EpochLoss e;
    e.epoch = epoch;
    e.train_mse = weighted / static_cast<double>(order.size());
    e.val_mse = has_val ? evaluate_mse(model, *val) : std::numeric_limits<double>::quiet_NaN();
    result.curve.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const EpochLoss> curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << "epoch,train_mse,val_mse\n" << std::setprecision(9);
  for (const auto& e : curve) os << e.epoch << ',' << e.train_mse << ',' << e.val_mse << '\n';
}

RigidTransform output_to_pose(const Tensor4<float>& out, int row, const WorkspaceBounds& bounds,
                             const TargetScaling& scaling) {
  if (out.h * out.w * out.c != kPoseOutputs || row < 0 || row >= out.n) {
    throw ValidationError("expected an N x 7 network output");
  }
  return target_to_pose(scaling.invert({out.sample(row), static_cast<std::size_t>(kPoseOutputs)}), bounds);
}

RigidTransform PoseRegressor::predict_pose(const Frame& frame, const Roi& roi) const {
  std::vector<Tensor4<float>> inputs{full_input(frame, arch)};
  if (uses_crop()) inputs.push_back(crop_input(frame, roi, arch));
  return output_to_pose(model.predict(inputs), 0, bounds, scaling);
}

}  // namespace headpose::nn
