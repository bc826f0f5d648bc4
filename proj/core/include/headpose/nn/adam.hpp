#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "headpose/nn/model.hpp"

namespace headpose::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, const AdamConfig& cfg) : config(cfg), m(n, T(0)), v(n, T(0)) {}
};

/// One bias-corrected Adam update. Throws RuntimeError naming the parameter
/// (via `blocks` when given) if any gradient is non-finite; nothing is
/// modified in that case.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               std::span<const ParamBlock> blocks = {});

}  // namespace headpose::nn
