#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "headpose/nn/layers.hpp"
#include "headpose/nn/tensor.hpp"

namespace headpose::nn {

enum class NodeKind { Input, Conv2d, Relu, ResBottleneck, Concat, AdaptiveAvgPool, GlobalAvgPool, Dense };

const char* node_kind_name(NodeKind k);

/// One graph node. Inputs refer to earlier nodes by index, so the node list
/// is its own topological order.
struct NodeSpec {
  NodeKind kind = NodeKind::Input;
  std::string name;
  std::vector<int> inputs;
  int kernel = 0;  // Conv2d (square)
  int out_ch = 0;  // Conv2d, ResBottleneck, Dense
  int stride = 1;  // Conv2d, ResBottleneck
  int height = 0;  // Input shape; AdaptiveAvgPool target
  int width = 0;
  int channels = 0;  // Input only
};

struct ModelSpec {
  std::string arch;
  std::vector<NodeSpec> nodes;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

struct NodeShape {
  int h = 0;
  int w = 0;
  int c = 0;
  bool operator==(const NodeShape&) const = default;
};

/// Per-node output shapes. Throws ValidationError for forward references,
/// channel or size mismatches, unused nodes, or an output other than a
/// single 7-wide Dense sink.
std::vector<NodeShape> infer_shapes(const ModelSpec& spec);
std::size_t parameter_count(const ModelSpec& spec);

inline constexpr int kPoseOutputs = 7;

struct ArchConfig {
  int image_height = 120;
  int image_width = 160;
  int channels = 5;
  int downsample = 2;  // area-averaging factor of the full-image path
  int crop = 60;       // square crop side of the face path
  /// Stem width is widths[0]; one bottleneck per entry, the first at stride
  /// 1 and the rest at stride 2.
  std::vector<int> widths{16, 32, 64, 128, 128};
  int fusion_width = 128;

  int full_height() const { return image_height / downsample; }
  int full_width() const { return image_width / downsample; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ArchConfig& c);
void from_json(const nlohmann::json& j, ArchConfig& c);

/// Full-image and crop paths, concatenated once their feature maps agree in
/// size (the larger one is average-pooled down if it dominates in both
/// dimensions), then ResBottleneck(fusion_width, /2), global pooling and a
/// 7-wide Dense. Inputs: "full" then "crop".
ModelSpec build_multiscale_model(const ArchConfig& cfg);
/// The full-image path and the same head. Input: "full".
ModelSpec build_singlepath_model(const ArchConfig& cfg);

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

template <class T>
class Model {
 public:
  Model() = default;
  /// Fan-in scaled normal weights (sqrt(2 / fan_in); sqrt(1 / fan_in) for the
  /// output Dense), zero biases.
  Model(ModelSpec spec, std::uint64_t seed);
  /// Takes parameters as given. Throws ValidationError on a count mismatch.
  Model(ModelSpec spec, std::vector<T> params);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<NodeShape>& shapes() const { return shapes_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t parameter_count() const { return params_.size(); }
  AlignedVector<T>& params() { return params_; }
  const AlignedVector<T>& params() const { return params_; }
  AlignedVector<T>& grads() { return grads_; }
  const AlignedVector<T>& grads() const { return grads_; }
  void zero_grad();

  int input_count() const { return static_cast<int>(input_nodes_.size()); }
  NodeShape input_shape(int k) const { return shapes_[input_nodes_.at(k)]; }

  /// Keeps activations for backward().
  Tensor4<T> forward(std::span<const Tensor4<T>> inputs);
  /// Stateless forward; safe to call concurrently.
  Tensor4<T> predict(std::span<const Tensor4<T>> inputs) const;
  /// Accumulates parameter gradients of sum(dout * output) for the last
  /// forward() batch.
  void backward(const Tensor4<T>& dout);
  /// Gradient with respect to input k from the last backward().
  const Tensor4<T>& input_grad(int k) const { return node_grads_[input_nodes_.at(k)]; }

  template <class U>
  Model<U> cast() const {
    return Model<U>(spec_, std::vector<U>(params_.begin(), params_.end()));
  }

 private:
  struct Workspace {
    std::vector<Tensor4<T>> acts;
    std::vector<BottleneckCache<T>> caches;
  };

  void setup();
  Tensor4<T> run(std::span<const Tensor4<T>> inputs, Workspace& ws) const;
  std::span<const T> param_span(int node, std::size_t skip, std::size_t count) const;

  ModelSpec spec_;
  std::vector<NodeShape> shapes_;
  std::vector<ParamBlock> blocks_;       // one per parameterized node
  std::vector<std::size_t> node_param_;  // offset of each node's parameters
  std::vector<int> input_nodes_;
  AlignedVector<T> params_;
  AlignedVector<T> grads_;
  Workspace ws_;
  std::vector<Tensor4<T>> node_grads_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace headpose::nn
