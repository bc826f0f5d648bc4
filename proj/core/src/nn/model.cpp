#include "headpose/nn/model.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "headpose/errors.hpp"

namespace headpose::nn {

namespace {

struct KindName {
  NodeKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {NodeKind::Input, "input"},
    {NodeKind::Conv2d, "conv2d"},
    {NodeKind::Relu, "relu"},
    {NodeKind::ResBottleneck, "res_bottleneck"},
    {NodeKind::Concat, "concat"},
    {NodeKind::AdaptiveAvgPool, "adaptive_avg_pool"},
    {NodeKind::GlobalAvgPool, "global_avg_pool"},
    {NodeKind::Dense, "dense"},
};

NodeKind parse_kind(const std::string& s) {
  for (const auto& k : kKindNames) {
    if (s == k.name) return k.kind;
  }
  throw ValidationError("unknown node kind '" + s + "'");
}

std::string node_label(const ModelSpec& spec, std::size_t i) {
  return "node " + std::to_string(i) + " (" + spec.nodes[i].name + ")";
}

std::string hw(const NodeShape& s) { return std::to_string(s.h) + "x" + std::to_string(s.w); }

ConvShape conv_shape(const NodeSpec& n, int in_ch) { return {n.kernel, n.kernel, in_ch, n.out_ch, n.stride}; }

BottleneckShape bottleneck_shape(const NodeSpec& n, int in_ch) { return {in_ch, n.out_ch, n.stride}; }

std::size_t node_param_count(const NodeSpec& n, const NodeShape& in) {
  switch (n.kind) {
    case NodeKind::Conv2d:
      return conv_shape(n, in.c).param_count();
    case NodeKind::ResBottleneck:
      return bottleneck_shape(n, in.c).param_count();
    case NodeKind::Dense:
      return (static_cast<std::size_t>(in.h) * in.w * in.c + 1) * n.out_ch;
    default:
      return 0;
  }
}

class SpecBuilder {
 public:
  explicit SpecBuilder(std::string arch) { spec_.arch = std::move(arch); }

  int add(NodeSpec n) {
    spec_.nodes.push_back(std::move(n));
    return static_cast<int>(spec_.nodes.size()) - 1;
  }
  int input(const std::string& name, int h, int w, int c) {
    NodeSpec n;
    n.kind = NodeKind::Input;
    n.name = name;
    n.height = h;
    n.width = w;
    n.channels = c;
    return add(n);
  }
  int op(NodeKind kind, const std::string& name, std::vector<int> inputs, int out_ch = 0, int stride = 1,
         int kernel = 0) {
    NodeSpec n;
    n.kind = kind;
    n.name = name;
    n.inputs = std::move(inputs);
    n.out_ch = out_ch;
    n.stride = stride;
    n.kernel = kernel;
    return add(n);
  }
  int pool(const std::string& name, int input, int h, int w) {
    NodeSpec n;
    n.kind = NodeKind::AdaptiveAvgPool;
    n.name = name;
    n.inputs = {input};
    n.height = h;
    n.width = w;
    return add(n);
  }

  int path(const std::string& prefix, int input, const ArchConfig& cfg) {
    int x = op(NodeKind::Conv2d, prefix + ".stem", {input}, cfg.widths[0], 1, 3);
    x = op(NodeKind::Relu, prefix + ".stem.relu", {x});
    for (std::size_t k = 0; k < cfg.widths.size(); ++k) {
      x = op(NodeKind::ResBottleneck, prefix + ".res" + std::to_string(k + 1), {x}, cfg.widths[k], k == 0 ? 1 : 2);
    }
    return x;
  }

  void head(int x, const ArchConfig& cfg) {
    x = op(NodeKind::ResBottleneck, "head.res", {x}, cfg.fusion_width, 2);
    x = op(NodeKind::GlobalAvgPool, "head.pool", {x});
    op(NodeKind::Dense, "head.dense", {x}, kPoseOutputs);
  }

  const ModelSpec& spec() const { return spec_; }

 private:
  ModelSpec spec_;
};

}  // namespace

const char* node_kind_name(NodeKind k) {
  for (const auto& e : kKindNames) {
    if (e.kind == k) return e.name;
  }
  return "?";
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json::object();
  j["arch"] = s.arch;
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (const auto& n : s.nodes) {
    nlohmann::json o;
    o["kind"] = node_kind_name(n.kind);
    o["name"] = n.name;
    o["inputs"] = n.inputs;
    switch (n.kind) {
      case NodeKind::Input:
        o["height"] = n.height;
        o["width"] = n.width;
        o["channels"] = n.channels;
        break;
      case NodeKind::Conv2d:
        o["kernel"] = n.kernel;
        o["out_ch"] = n.out_ch;
        o["stride"] = n.stride;
        break;
      case NodeKind::ResBottleneck:
        o["out_ch"] = n.out_ch;
        o["stride"] = n.stride;
        break;
      case NodeKind::AdaptiveAvgPool:
        o["height"] = n.height;
        o["width"] = n.width;
        break;
      case NodeKind::Dense:
        o["out_ch"] = n.out_ch;
        break;
      default:
        break;
    }
    nodes.push_back(std::move(o));
  }
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  try {
    s = ModelSpec{};
    s.arch = j.at("arch").get<std::string>();
    for (const auto& o : j.at("nodes")) {
      NodeSpec n;
      n.kind = parse_kind(o.at("kind").get<std::string>());
      n.name = o.at("name").get<std::string>();
      n.inputs = o.at("inputs").get<std::vector<int>>();
      n.kernel = o.value("kernel", 0);
      n.out_ch = o.value("out_ch", 0);
      n.stride = o.value("stride", 1);
      n.height = o.value("height", 0);
      n.width = o.value("width", 0);
      n.channels = o.value("channels", 0);
      s.nodes.push_back(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad model spec: ") + e.what());
  }
}

namespace {

std::vector<NodeShape> infer_shapes_impl(const ModelSpec& spec, bool complete) {
  if (spec.nodes.empty()) throw ValidationError("model graph is empty");
  std::vector<NodeShape> shapes(spec.nodes.size());
  std::vector<int> consumers(spec.nodes.size(), 0);
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const NodeSpec& n = spec.nodes[i];
    const std::string label = node_label(spec, i);
    for (int in : n.inputs) {
      if (in < 0 || static_cast<std::size_t>(in) >= i) {
        throw ValidationError(label + " refers to node " + std::to_string(in) + ", which does not precede it");
      }
      ++consumers[in];
    }
    const std::size_t want_inputs = n.kind == NodeKind::Input ? 0 : 1;
    if (n.kind == NodeKind::Concat ? n.inputs.size() < 2 : n.inputs.size() != want_inputs) {
      throw ValidationError(label + " has " + std::to_string(n.inputs.size()) + " inputs");
    }
    const NodeShape in = n.inputs.empty() ? NodeShape{} : shapes[n.inputs[0]];
    try {
      switch (n.kind) {
        case NodeKind::Input:
          if (n.height < 1 || n.width < 1 || n.channels < 1) throw ValidationError("input shape must be positive");
          shapes[i] = {n.height, n.width, n.channels};
          break;
        case NodeKind::Conv2d: {
          const ConvShape s = conv_shape(n, in.c);
          s.validate();
          shapes[i] = {same_extent(in.h, n.stride), same_extent(in.w, n.stride), n.out_ch};
          break;
        }
        case NodeKind::Relu:
          shapes[i] = in;
          break;
        case NodeKind::ResBottleneck:
          bottleneck_shape(n, in.c).validate();
          shapes[i] = {same_extent(in.h, n.stride), same_extent(in.w, n.stride), n.out_ch};
          break;
        case NodeKind::Concat: {
          NodeShape out = in;
          out.c = 0;
          for (int k : n.inputs) {
            if (shapes[k].h != in.h || shapes[k].w != in.w) {
              throw ValidationError("concat inputs disagree: " + hw(in) + " vs " + hw(shapes[k]));
            }
            out.c += shapes[k].c;
          }
          shapes[i] = out;
          break;
        }
        case NodeKind::AdaptiveAvgPool:
          if (n.height < 1 || n.width < 1 || n.height > in.h || n.width > in.w) {
            throw ValidationError("cannot pool " + hw(in) + " to " + std::to_string(n.height) + "x" +
                                  std::to_string(n.width));
          }
          shapes[i] = {n.height, n.width, in.c};
          break;
        case NodeKind::GlobalAvgPool:
          shapes[i] = {1, 1, in.c};
          break;
        case NodeKind::Dense:
          if (n.out_ch < 1) throw ValidationError("dense width must be >= 1");
          shapes[i] = {1, 1, n.out_ch};
          break;
      }
    } catch (const ValidationError& e) {
      throw ValidationError(label + ": " + e.what());
    }
  }
  if (!complete) return shapes;
  for (std::size_t i = 0; i + 1 < spec.nodes.size(); ++i) {
    if (consumers[i] == 0) throw ValidationError(node_label(spec, i) + " is not used; the graph needs a single output");
  }
  const NodeSpec& last = spec.nodes.back();
  if (last.kind != NodeKind::Dense || last.out_ch != kPoseOutputs) {
    throw ValidationError("the output node must be a Dense layer with " + std::to_string(kPoseOutputs) + " outputs");
  }
  return shapes;
}

}  // namespace

std::vector<NodeShape> infer_shapes(const ModelSpec& spec) { return infer_shapes_impl(spec, true); }

std::size_t parameter_count(const ModelSpec& spec) {
  const auto shapes = infer_shapes(spec);
  std::size_t total = 0;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    if (!n.inputs.empty()) total += node_param_count(n, shapes[n.inputs[0]]);
  }
  return total;
}

void ArchConfig::validate() const {
  if (image_height < 1 || image_width < 1 || channels < 1) throw ValidationError("image shape must be positive");
  if (downsample < 1) throw ValidationError("downsample factor must be >= 1");
  if (full_height() < 1 || full_width() < 1) throw ValidationError("downsample factor larger than the image");
  if (crop < 1 || crop > image_height || crop > image_width) {
    throw ValidationError("crop side " + std::to_string(crop) + " does not fit the image");
  }
  if (widths.empty()) throw ValidationError("at least one path width is required");
  for (int w : widths) {
    if (w < 4 || w % 4 != 0) throw ValidationError("path widths must be positive multiples of 4");
  }
  if (fusion_width < 4 || fusion_width % 4 != 0) throw ValidationError("fusion width must be a positive multiple of 4");
}

void to_json(nlohmann::json& j, const ArchConfig& c) {
  j = nlohmann::json{{"image_height", c.image_height}, {"image_width", c.image_width}, {"channels", c.channels},
                     {"downsample", c.downsample},     {"crop", c.crop},               {"widths", c.widths},
                     {"fusion_width", c.fusion_width}};
}

void from_json(const nlohmann::json& j, ArchConfig& c) {
  const ArchConfig d;
  c.image_height = j.value("image_height", d.image_height);
  c.image_width = j.value("image_width", d.image_width);
  c.channels = j.value("channels", d.channels);
  c.downsample = j.value("downsample", d.downsample);
  c.crop = j.value("crop", d.crop);
  c.widths = j.value("widths", d.widths);
  c.fusion_width = j.value("fusion_width", d.fusion_width);
}

ModelSpec build_multiscale_model(const ArchConfig& cfg) {
  cfg.validate();
  SpecBuilder b("multi");
  const int full_in = b.input("full", cfg.full_height(), cfg.full_width(), cfg.channels);
  const int crop_in = b.input("crop", cfg.crop, cfg.crop, cfg.channels);
  int full = b.path("full", full_in, cfg);
  int crop = b.path("crop", crop_in, cfg);
  const auto shapes = infer_shapes_impl(b.spec(), false);
  const NodeShape fs = shapes[full];
  const NodeShape cs = shapes[crop];
  if (fs.h >= cs.h && fs.w >= cs.w) {
    if (fs.h != cs.h || fs.w != cs.w) full = b.pool("full.fit", full, cs.h, cs.w);
  } else if (cs.h >= fs.h && cs.w >= fs.w) {
    crop = b.pool("crop.fit", crop, fs.h, fs.w);
  } else {
    throw ValidationError("cannot fuse paths: full-image features " + hw(fs) + " vs crop features " + hw(cs));
  }
  b.head(b.op(NodeKind::Concat, "fuse", {full, crop}), cfg);
  infer_shapes(b.spec());
  return b.spec();
}

ModelSpec build_singlepath_model(const ArchConfig& cfg) {
  cfg.validate();
  SpecBuilder b("single");
  const int full_in = b.input("full", cfg.full_height(), cfg.full_width(), cfg.channels);
  b.head(b.path("full", full_in, cfg), cfg);
  infer_shapes(b.spec());
  return b.spec();
}

template <class T>
Model<T>::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  setup();
  std::mt19937_64 rng(seed);
  auto fill_normal = [&](std::size_t offset, std::size_t count, double fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    for (std::size_t k = 0; k < count; ++k) params_[offset + k] = static_cast<T>(dist(rng));
  };
  auto init_conv = [&](std::size_t& at, const ConvShape& s) {
    fill_normal(at, s.weight_count(), static_cast<double>(s.kernel_h) * s.kernel_w * s.in_ch, 2.0);
    at += s.param_count();
  };
  for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
    const NodeSpec& n = spec_.nodes[i];
    if (n.inputs.empty()) continue;
    const NodeShape in = shapes_[n.inputs[0]];
    std::size_t at = node_param_[i];
    switch (n.kind) {
      case NodeKind::Conv2d:
        init_conv(at, conv_shape(n, in.c));
        break;
      case NodeKind::ResBottleneck: {
        const auto s = bottleneck_shape(n, in.c);
        init_conv(at, s.reduce());
        init_conv(at, s.spatial());
        init_conv(at, s.expand());
        if (s.projection()) init_conv(at, s.shortcut());
        break;
      }
      case NodeKind::Dense: {
        const std::size_t fan_in = static_cast<std::size_t>(in.h) * in.w * in.c;
        const bool output = i + 1 == spec_.nodes.size();
        fill_normal(at, fan_in * n.out_ch, static_cast<double>(fan_in), output ? 1.0 : 2.0);
        break;
      }
      default:
        break;
    }
  }
}

template <class T>
Model<T>::Model(ModelSpec spec, std::vector<T> params) : spec_(std::move(spec)) {
  setup();
  if (params.size() != params_.size()) {
    throw ValidationError("model expects " + std::to_string(params_.size()) + " parameters, got " +
                          std::to_string(params.size()));
  }
  params_.assign(params.begin(), params.end());
}

template <class T>
void Model<T>::setup() {
  shapes_ = infer_shapes(spec_);
  node_param_.assign(spec_.nodes.size(), 0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
    const NodeSpec& n = spec_.nodes[i];
    node_param_[i] = total;
    if (n.kind == NodeKind::Input) {
      input_nodes_.push_back(static_cast<int>(i));
      continue;
    }
    const std::size_t count = node_param_count(n, shapes_[n.inputs[0]]);
    if (count > 0) blocks_.push_back({n.name, total, count});
    total += count;
  }
  params_.assign(total, T(0));
  grads_.assign(total, T(0));
}

template <class T>
void Model<T>::zero_grad() {
  std::fill(grads_.begin(), grads_.end(), T(0));
}

template <class T>
std::span<const T> Model<T>::param_span(int node, std::size_t skip, std::size_t count) const {
  return std::span<const T>(params_).subspan(node_param_[node] + skip, count);
}

template <class T>
Tensor4<T> Model<T>::run(std::span<const Tensor4<T>> inputs, Workspace& ws) const {
  if (inputs.size() != input_nodes_.size()) {
    throw ValidationError("model takes " + std::to_string(input_nodes_.size()) + " inputs, got " +
                          std::to_string(inputs.size()));
  }
  const int batch = inputs.empty() ? 0 : inputs[0].n;
  if (batch < 1) throw ValidationError("empty batch");
  ws.acts.assign(spec_.nodes.size(), Tensor4<T>{});
  ws.caches.assign(spec_.nodes.size(), BottleneckCache<T>{});
  int next_input = 0;
  for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
    const NodeSpec& n = spec_.nodes[i];
    const int node = static_cast<int>(i);
    Tensor4<T>& out = ws.acts[i];
    if (n.kind == NodeKind::Input) {
      const auto& x = inputs[next_input++];
      expect_shape(x.shape(), {batch, n.height, n.width, n.channels}, "input '" + n.name + "'");
      out = x;
      continue;
    }
    const Tensor4<T>& x = ws.acts[n.inputs[0]];
    const NodeShape in = shapes_[n.inputs[0]];
    switch (n.kind) {
      case NodeKind::Conv2d: {
        const auto s = conv_shape(n, in.c);
        out = conv2d_forward(x, param_span(node, 0, s.weight_count()), param_span(node, s.weight_count(), n.out_ch),
                             s);
        break;
      }
      case NodeKind::Relu:
        out = relu_forward(x);
        break;
      case NodeKind::ResBottleneck: {
        const auto s = bottleneck_shape(n, in.c);
        out = bottleneck_forward(x, param_span(node, 0, s.param_count()), s, &ws.caches[i]);
        break;
      }
      case NodeKind::Concat: {
        std::vector<const Tensor4<T>*> xs;
        for (int k : n.inputs) xs.push_back(&ws.acts[k]);
        out = concat_forward<T>(xs);
        break;
      }
      case NodeKind::AdaptiveAvgPool:
        out = adaptive_avg_pool_forward(x, n.height, n.width);
        break;
      case NodeKind::GlobalAvgPool:
        out = global_avg_pool_forward(x);
        break;
      case NodeKind::Dense: {
        const int fan_in = in.h * in.w * in.c;
        const std::size_t wc = static_cast<std::size_t>(fan_in) * n.out_ch;
        out = dense_forward(x, param_span(node, 0, wc), param_span(node, wc, n.out_ch), fan_in, n.out_ch);
        break;
      }
      case NodeKind::Input:
        break;
    }
  }
  return ws.acts.back();
}

template <class T>
Tensor4<T> Model<T>::forward(std::span<const Tensor4<T>> inputs) {
  return run(inputs, ws_);
}

template <class T>
Tensor4<T> Model<T>::predict(std::span<const Tensor4<T>> inputs) const {
  Workspace ws;
  return run(inputs, ws);
}

template <class T>
void Model<T>::backward(const Tensor4<T>& dout) {
  if (ws_.acts.size() != spec_.nodes.size()) throw RuntimeError("backward() called before forward()");
  expect_shape(dout.shape(), ws_.acts.back().shape(), "output gradient");
  const std::size_t count = spec_.nodes.size();
  node_grads_.assign(count, Tensor4<T>{});
  std::vector<char> has(count, 0);
  node_grads_.back() = dout;
  has.back() = 1;
  auto accumulate = [&](int k, Tensor4<T>&& g) {
    if (!has[k]) {
      node_grads_[k] = std::move(g);
      has[k] = 1;
      return;
    }
    auto& dst = node_grads_[k].data;
    for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += g.data[e];
  };
  std::span<T> grads(grads_);
  for (std::size_t r = count; r-- > 0;) {
    const NodeSpec& n = spec_.nodes[r];
    if (n.kind == NodeKind::Input) continue;
    const int node = static_cast<int>(r);
    const Tensor4<T>& dy = node_grads_[r];
    const int src = n.inputs[0];
    const Tensor4<T>& x = ws_.acts[src];
    const NodeShape in = shapes_[src];
    const std::size_t at = node_param_[r];
    Tensor4<T> dx;
    switch (n.kind) {
      case NodeKind::Conv2d: {
        const auto s = conv_shape(n, in.c);
        conv2d_backward(x, param_span(node, 0, s.weight_count()), s, dy, &dx, grads.subspan(at, s.weight_count()),
                        grads.subspan(at + s.weight_count(), n.out_ch));
        accumulate(src, std::move(dx));
        break;
      }
      case NodeKind::Relu:
        accumulate(src, relu_backward(ws_.acts[r], dy));
        break;
      case NodeKind::ResBottleneck: {
        const auto s = bottleneck_shape(n, in.c);
        bottleneck_backward(x, param_span(node, 0, s.param_count()), s, ws_.caches[r], dy, &dx,
                            grads.subspan(at, s.param_count()));
        accumulate(src, std::move(dx));
        break;
      }
      case NodeKind::Concat: {
        std::vector<int> channels;
        for (int k : n.inputs) channels.push_back(shapes_[k].c);
        auto parts = concat_backward(dy, std::span<const int>(channels));
        for (std::size_t k = 0; k < parts.size(); ++k) accumulate(n.inputs[k], std::move(parts[k]));
        break;
      }
      case NodeKind::AdaptiveAvgPool:
        accumulate(src, adaptive_avg_pool_backward(dy, in.h, in.w));
        break;
      case NodeKind::GlobalAvgPool:
        accumulate(src, global_avg_pool_backward(dy, in.h, in.w));
        break;
      case NodeKind::Dense: {
        const int fan_in = in.h * in.w * in.c;
        const std::size_t wc = static_cast<std::size_t>(fan_in) * n.out_ch;
        dense_backward(x, param_span(node, 0, wc), fan_in, n.out_ch, dy, &dx, grads.subspan(at, wc),
                       grads.subspan(at + wc, n.out_ch));
        accumulate(src, std::move(dx));
        break;
      }
      case NodeKind::Input:
        break;
    }
  }
}

template class Model<float>;
template class Model<double>;

}  // namespace headpose::nn
