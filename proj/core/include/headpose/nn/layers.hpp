#pragma once

#include <span>
#include <utility>
#include <vector>

#include "headpose/nn/tensor.hpp"

namespace headpose::nn {

/// Output extent of a "same"-padded convolution: ceil(in / stride).
int same_extent(int in, int stride);
/// Leading zero padding of a "same" convolution (the extra pixel, if any,
/// goes to the trailing side).
int same_pad_before(int in, int kernel, int stride);

/// Weights are stored kernel_h x kernel_w x in_ch x out_ch.
struct ConvShape {
  int kernel_h = 3;
  int kernel_w = 3;
  int in_ch = 1;
  int out_ch = 1;
  int stride = 1;

  std::size_t weight_count() const;
  std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(out_ch); }
  void validate() const;
};

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> w, std::span<const T> b, const ConvShape& s);

/// Accumulates into dw and db; overwrites *dx when dx is non-null.
template <class T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> w, const ConvShape& s, const Tensor4<T>& dy,
                     Tensor4<T>* dx, std::span<T> dw, std::span<T> db);

template <class T>
Tensor4<T> relu_forward(const Tensor4<T>& x);
/// Gradient through a ReLU given its output y.
template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy);

/// Channel concatenation; inputs must agree on N, H and W.
template <class T>
Tensor4<T> concat_forward(std::span<const Tensor4<T>* const> xs);
template <class T>
std::vector<Tensor4<T>> concat_backward(const Tensor4<T>& dy, std::span<const int> channels);

/// Output cell (i, j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh)) and the
/// matching columns.
template <class T>
Tensor4<T> adaptive_avg_pool_forward(const Tensor4<T>& x, int out_h, int out_w);
template <class T>
Tensor4<T> adaptive_avg_pool_backward(const Tensor4<T>& dy, int in_h, int in_w);

template <class T>
Tensor4<T> global_avg_pool_forward(const Tensor4<T>& x);
template <class T>
Tensor4<T> global_avg_pool_backward(const Tensor4<T>& dy, int in_h, int in_w);

/// x is flattened per sample; w is in x out. Output is N x 1 x 1 x out.
template <class T>
Tensor4<T> dense_forward(const Tensor4<T>& x, std::span<const T> w, std::span<const T> b, int in, int out);
template <class T>
void dense_backward(const Tensor4<T>& x, std::span<const T> w, int in, int out, const Tensor4<T>& dy, Tensor4<T>* dx,
                    std::span<T> dw, std::span<T> db);

/// 1x1 reduce to out_ch/4, 3x3 at the block stride, 1x1 expand to out_ch,
/// plus an identity or 1x1 projection shortcut. ReLU after the first two
/// convolutions and after the sum.
struct BottleneckShape {
  int in_ch = 1;
  int out_ch = 4;
  int stride = 1;

  int mid() const { return out_ch / 4; }
  bool projection() const { return in_ch != out_ch || stride != 1; }
  ConvShape reduce() const { return {1, 1, in_ch, mid(), 1}; }
  ConvShape spatial() const { return {3, 3, mid(), mid(), stride}; }
  ConvShape expand() const { return {1, 1, mid(), out_ch, 1}; }
  ConvShape shortcut() const { return {1, 1, in_ch, out_ch, stride}; }
  /// reduce, spatial, expand and (if present) shortcut; weights then bias.
  std::size_t param_count() const;
  void validate() const;
};

template <class T>
struct BottleneckCache {
  Tensor4<T> a1;
  Tensor4<T> a2;
  Tensor4<T> out;
};

template <class T>
Tensor4<T> bottleneck_forward(const Tensor4<T>& x, std::span<const T> params, const BottleneckShape& s,
                              BottleneckCache<T>* cache = nullptr);
/// Needs the cache filled by bottleneck_forward on the same x.
template <class T>
void bottleneck_backward(const Tensor4<T>& x, std::span<const T> params, const BottleneckShape& s,
                         const BottleneckCache<T>& cache, const Tensor4<T>& dy, Tensor4<T>* dx, std::span<T> dparams);

/// Mean over all entries of (pred - target)^2 and its gradient.
template <class T>
std::pair<T, Tensor4<T>> mse_loss(const Tensor4<T>& pred, const Tensor4<T>& target);

}  // namespace headpose::nn
