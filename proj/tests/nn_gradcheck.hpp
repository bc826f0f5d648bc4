#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "headpose/nn.hpp"

// Central finite-difference checks in double precision. Every check uses the
// scalar objective L = sum(R * output) for a fixed random R, so the analytic
// path is the layer's backward with dy = R.
namespace headpose::test {

using nn::Tensor4;

inline constexpr double kFdStep = 1e-4;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline Tensor4<double> random_tensor(std::mt19937_64& rng, int n, int h, int w, int c, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor4<double> t(n, h, w, c);
  for (auto& v : t.data) v = d(rng);
  return t;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline double weighted_sum(const Tensor4<double>& y, const Tensor4<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * r.data[i];
  return s;
}

// Largest relative error between analytic[i] and the central difference of
// objective() in values[i]. Along one coordinate a ReLU network is piecewise
// linear, so one-sided slopes that disagree mean the +-step interval holds a
// kink. Such coordinates are counted and retried with smaller steps; a
// one-sided slope is used instead when the next interval on that side has
// the same slope (no kink on that side).
struct FdResult {
  double max_error = 0.0;
  int kinks = 0;
};

inline bool same_slope(double a, double b) {
  return std::abs(a - b) <= 1e-6 * std::max({std::abs(a), std::abs(b), 1e-3});
}

// Checks only `indices` when given.
inline FdResult fd_check(std::span<double> values, std::span<const double> analytic,
                         const std::function<double()>& objective, std::span<const std::size_t> indices = {}) {
  FdResult res;
  const double f0 = objective();
  const std::size_t count = indices.empty() ? values.size() : indices.size();
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = indices.empty() ? k : indices[k];
    const double keep = values[i];
    auto at = [&](double x) {
      values[i] = x;
      const double f = objective();
      values[i] = keep;
      return f;
    };
    double numeric = 0.0;
    for (double step = kFdStep; step >= 1e-8; step *= 0.1) {
      const double up = at(keep + step);
      const double down = at(keep - step);
      numeric = (up - down) / (2.0 * step);
      const double fwd = (up - f0) / step;
      const double bwd = (f0 - down) / step;
      if (same_slope(fwd, bwd)) break;
      if (step == kFdStep) ++res.kinks;
      if (same_slope(fwd, (at(keep + 2.0 * step) - up) / step)) {
        numeric = fwd;
        break;
      }
      if (same_slope(bwd, (down - at(keep - 2.0 * step)) / step)) {
        numeric = bwd;
        break;
      }
    }
    res.max_error = std::max(res.max_error, relative_error(analytic[i], numeric));
  }
  return res;
}

inline double max_fd_error(std::span<double> values, std::span<const double> analytic,
                           const std::function<double()>& objective) {
  return fd_check(values, analytic, objective).max_error;
}

struct GradCheck {
  std::string name;
  double max_error = 0.0;
  int kinks = 0;  // coordinates that needed a smaller step
};

inline GradCheck check_conv(std::uint64_t seed, int kernel, int stride, int n = 2, int h = 5, int w = 5, int cin = 3,
                            int cout = 4) {
  std::mt19937_64 rng(seed);
  const nn::ConvShape s{kernel, kernel, cin, cout, stride};
  auto x = random_tensor(rng, n, h, w, cin);
  auto wt = random_vector(rng, s.weight_count());
  auto b = random_vector(rng, static_cast<std::size_t>(cout));
  const auto y = nn::conv2d_forward<double>(x, wt, b, s);
  const auto r = random_tensor(rng, y.n, y.h, y.w, y.c);
  Tensor4<double> dx;
  std::vector<double> dw(wt.size(), 0.0), db(b.size(), 0.0);
  nn::conv2d_backward<double>(x, wt, s, r, &dx, dw, db);
  const auto obj = [&] { return weighted_sum(nn::conv2d_forward<double>(x, wt, b, s), r); };
  const double e = std::max({max_fd_error(x.data, dx.data, obj), max_fd_error(wt, dw, obj), max_fd_error(b, db, obj)});
  return {"conv2d " + std::to_string(kernel) + "x" + std::to_string(kernel) + " stride " + std::to_string(stride), e};
}

inline GradCheck check_relu(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x = random_tensor(rng, 2, 4, 4, 3);
  for (auto& v : x.data) v += v >= 0.0 ? 0.1 : -0.1;  // keep clear of the kink
  const auto y = nn::relu_forward(x);
  const auto r = random_tensor(rng, 2, 4, 4, 3);
  const auto dx = nn::relu_backward(y, r);
  return {"relu", max_fd_error(x.data, dx.data, [&] { return weighted_sum(nn::relu_forward(x), r); })};
}

inline GradCheck check_concat(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto a = random_tensor(rng, 2, 3, 4, 2);
  auto b = random_tensor(rng, 2, 3, 4, 5);
  const auto fwd = [&] {
    const Tensor4<double>* xs[] = {&a, &b};
    return nn::concat_forward<double>(xs);
  };
  const auto r = random_tensor(rng, 2, 3, 4, 7);
  const int channels[] = {2, 5};
  const auto parts = nn::concat_backward<double>(r, channels);
  const auto obj = [&] { return weighted_sum(fwd(), r); };
  return {"concat", std::max(max_fd_error(a.data, parts[0].data, obj), max_fd_error(b.data, parts[1].data, obj))};
}

inline GradCheck check_adaptive_pool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x = random_tensor(rng, 2, 7, 9, 3);
  const auto r = random_tensor(rng, 2, 3, 4, 3);
  const auto dx = nn::adaptive_avg_pool_backward(r, 7, 9);
  return {"adaptive_avg_pool",
          max_fd_error(x.data, dx.data, [&] { return weighted_sum(nn::adaptive_avg_pool_forward(x, 3, 4), r); })};
}

inline GradCheck check_global_pool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x = random_tensor(rng, 2, 3, 5, 4);
  const auto r = random_tensor(rng, 2, 1, 1, 4);
  const auto dx = nn::global_avg_pool_backward(r, 3, 5);
  return {"global_avg_pool",
          max_fd_error(x.data, dx.data, [&] { return weighted_sum(nn::global_avg_pool_forward(x), r); })};
}

inline GradCheck check_dense(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int in = 12, out = 7;
  auto x = random_tensor(rng, 3, 2, 2, 3);
  auto w = random_vector(rng, static_cast<std::size_t>(in) * out);
  auto b = random_vector(rng, out);
  const auto r = random_tensor(rng, 3, 1, 1, out);
  Tensor4<double> dx;
  std::vector<double> dw(w.size(), 0.0), db(b.size(), 0.0);
  nn::dense_backward<double>(x, w, in, out, r, &dx, dw, db);
  const auto obj = [&] { return weighted_sum(nn::dense_forward<double>(x, w, b, in, out), r); };
  return {"dense", std::max({max_fd_error(x.data, dx.data, obj), max_fd_error(w, dw, obj), max_fd_error(b, db, obj)})};
}

inline GradCheck check_bottleneck(std::uint64_t seed, int in_ch, int out_ch, int stride) {
  std::mt19937_64 rng(seed);
  const nn::BottleneckShape s{in_ch, out_ch, stride};
  auto x = random_tensor(rng, 2, 5, 6, in_ch);
  auto p = random_vector(rng, s.param_count(), 0.5);
  nn::BottleneckCache<double> cache;
  const auto y = nn::bottleneck_forward<double>(x, p, s, &cache);
  const auto r = random_tensor(rng, y.n, y.h, y.w, y.c);
  Tensor4<double> dx;
  std::vector<double> dp(p.size(), 0.0);
  nn::bottleneck_backward<double>(x, p, s, cache, r, &dx, dp);
  const auto obj = [&] { return weighted_sum(nn::bottleneck_forward<double>(x, p, s), r); };
  return {std::string("res_bottleneck ") + (s.projection() ? "projection" : "identity"),
          std::max(max_fd_error(x.data, dx.data, obj), max_fd_error(p, dp, obj))};
}

inline GradCheck check_mse(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pred = random_tensor(rng, 3, 1, 1, 7);
  const auto target = random_tensor(rng, 3, 1, 1, 7);
  const auto [loss, grad] = nn::mse_loss(pred, target);
  (void)loss;
  return {"mse_loss", max_fd_error(pred.data, grad.data, [&] { return nn::mse_loss(pred, target).first; })};
}

// Small image sizes keep the whole-model check fast while exercising every
// node kind, including the fusion pooling.
inline nn::ArchConfig tiny_arch() {
  nn::ArchConfig cfg;
  cfg.image_height = 16;
  cfg.image_width = 24;
  cfg.crop = 12;
  cfg.widths = {4, 8};
  cfg.fusion_width = 8;
  return cfg;
}

// All parameters and all input elements of a 2-sample batch.
inline GradCheck check_model(const nn::ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::Model<double> model(spec, seed);
  // Zero biases behind ReLU outputs put many pre-activations exactly on the
  // kink; jitter every parameter to evaluate at a generic point.
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : model.params()) p += jitter(rng);
  std::vector<Tensor4<double>> inputs;
  for (int k = 0; k < model.input_count(); ++k) {
    const auto s = model.input_shape(k);
    inputs.push_back(random_tensor(rng, 2, s.h, s.w, s.c));
  }
  const auto r = random_tensor(rng, 2, 1, 1, nn::kPoseOutputs);
  model.zero_grad();
  model.forward(inputs);
  model.backward(r);
  const auto obj = [&] { return weighted_sum(model.predict(inputs), r); };
  GradCheck out{"model " + spec.arch};
  auto take = [&out](const FdResult& f) {
    out.max_error = std::max(out.max_error, f.max_error);
    out.kinks += f.kinks;
  };
  take(fd_check(model.params(), model.grads(), obj));
  for (int k = 0; k < model.input_count(); ++k) take(fd_check(inputs[k].data, model.input_grad(k).data, obj));
  return out;
}

// Default-size network: `per_block` random coordinates of every parameter
// block and `per_input` of every input, on a 2-sample batch.
inline GradCheck check_model_sampled(const nn::ModelSpec& spec, std::uint64_t seed, int per_block, int per_input) {
  std::mt19937_64 rng(seed);
  nn::Model<double> model(spec, seed);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : model.params()) p += jitter(rng);
  std::vector<Tensor4<double>> inputs;
  for (int k = 0; k < model.input_count(); ++k) {
    const auto s = model.input_shape(k);
    inputs.push_back(random_tensor(rng, 2, s.h, s.w, s.c));
  }
  const auto r = random_tensor(rng, 2, 1, 1, nn::kPoseOutputs);
  model.zero_grad();
  model.forward(inputs);
  model.backward(r);
  const auto obj = [&] { return weighted_sum(model.predict(inputs), r); };
  auto sample = [&rng](std::size_t begin, std::size_t count, int n) {
    std::uniform_int_distribution<std::size_t> pick(begin, begin + count - 1);
    std::vector<std::size_t> idx;
    for (int i = 0; i < n; ++i) idx.push_back(pick(rng));
    return idx;
  };
  GradCheck out{"model " + spec.arch + " (default size, sampled)"};
  auto take = [&out](const FdResult& f) {
    out.max_error = std::max(out.max_error, f.max_error);
    out.kinks += f.kinks;
  };
  for (const auto& b : model.blocks()) take(fd_check(model.params(), model.grads(), obj, sample(b.offset, b.count, per_block)));
  for (int k = 0; k < model.input_count(); ++k) {
    take(fd_check(inputs[k].data, model.input_grad(k).data, obj, sample(0, inputs[k].data.size(), per_input)));
  }
  return out;
}

inline std::vector<GradCheck> layer_grad_checks() {
  return {check_conv(1, 3, 1),
          check_conv(2, 3, 2),
          check_conv(3, 1, 1),
          check_conv(4, 1, 2),
          check_conv(5, 3, 2, 2, 6, 6, 3, 4),
          check_relu(6),
          check_concat(7),
          check_adaptive_pool(8),
          check_global_pool(9),
          check_dense(10),
          check_bottleneck(11, 8, 8, 1),
          check_bottleneck(12, 4, 8, 2),
          check_mse(13)};
}

inline std::vector<GradCheck> model_grad_checks() {
  return {check_model(nn::build_multiscale_model(tiny_arch()), 21),
          check_model(nn::build_singlepath_model(tiny_arch()), 22)};
}

}  // namespace headpose::test
