#include "headpose/nn/adam.hpp"

#include <cmath>
#include <string>

#include "headpose/errors.hpp"

namespace headpose::nn {

void AdamConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ValidationError("Adam epsilon must be > 0");
}

namespace {

std::string parameter_name(std::size_t index, std::span<const ParamBlock> blocks) {
  for (const auto& b : blocks) {
    if (index >= b.offset && index < b.offset + b.count) {
      return b.name + "[" + std::to_string(index - b.offset) + "]";
    }
  }
  return "parameter " + std::to_string(index);
}

}  // namespace

template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, std::span<const ParamBlock> blocks) {
  state.config.validate();
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ValidationError("Adam: parameter, gradient and moment sizes differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grads[i]))) {
      throw RuntimeError("non-finite gradient for " + parameter_name(i, blocks));
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    const double v = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    params[i] -= static_cast<T>(c.learning_rate * (m / correct1) / (std::sqrt(v / correct2) + c.epsilon));
  }
}

template void adam_step(std::span<float>, std::span<const float>, AdamState<float>&, std::span<const ParamBlock>);
template void adam_step(std::span<double>, std::span<const double>, AdamState<double>&, std::span<const ParamBlock>);

}  // namespace headpose::nn
