#include "headpose/nn/layers.hpp"

#include <algorithm>
#include <cstring>

#include <Eigen/Core>

#include "headpose/errors.hpp"

namespace headpose::nn {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMat = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstRow = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <class T>
using MutRow = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

struct ConvGeom {
  int out_h;
  int out_w;
  int pad_top;
  int pad_left;
};

ConvGeom conv_geom(int h, int w, const ConvShape& s) {
  return {same_extent(h, s.stride), same_extent(w, s.stride), same_pad_before(h, s.kernel_h, s.stride),
          same_pad_before(w, s.kernel_w, s.stride)};
}

bool is_pointwise(const ConvShape& s) { return s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1; }

template <class T>
void im2col(const Tensor4<T>& x, const ConvShape& s, const ConvGeom& g, T* cols) {
  const int c = x.c;
  const std::size_t row_len = static_cast<std::size_t>(s.kernel_h) * s.kernel_w * c;
  T* dst = cols;
  for (int i = 0; i < x.n; ++i) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox) {
        T* row = dst;
        for (int ky = 0; ky < s.kernel_h; ++ky) {
          const int iy = oy * s.stride - g.pad_top + ky;
          for (int kx = 0; kx < s.kernel_w; ++kx) {
            const int ix = ox * s.stride - g.pad_left + kx;
            if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) {
              std::fill(row, row + c, T(0));
            } else {
              std::memcpy(row, &x.data[x.offset(i, iy, ix, 0)], sizeof(T) * c);
            }
            row += c;
          }
        }
        dst += row_len;
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const ConvShape& s, const ConvGeom& g, Tensor4<T>& dx) {
  dx.fill(T(0));
  const int c = dx.c;
  const T* src = cols;
  for (int i = 0; i < dx.n; ++i) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox) {
        for (int ky = 0; ky < s.kernel_h; ++ky) {
          const int iy = oy * s.stride - g.pad_top + ky;
          for (int kx = 0; kx < s.kernel_w; ++kx) {
            const int ix = ox * s.stride - g.pad_left + kx;
            if (iy >= 0 && iy < dx.h && ix >= 0 && ix < dx.w) {
              T* d = &dx.data[dx.offset(i, iy, ix, 0)];
              for (int ch = 0; ch < c; ++ch) d[ch] += src[ch];
            }
            src += c;
          }
        }
      }
    }
  }
}

void check_span(std::size_t got, std::size_t expected, const char* what) {
  if (got != expected) {
    throw ValidationError(std::string(what) + ": expected " + std::to_string(expected) + " values, got " +
                          std::to_string(got));
  }
}

struct BottleneckOffsets {
  std::size_t w1, b1, w2, b2, w3, b3, ws, bs, end;
};

BottleneckOffsets offsets(const BottleneckShape& s) {
  BottleneckOffsets o{};
  std::size_t at = 0;
  auto take = [&at](std::size_t n) {
    const std::size_t begin = at;
    at += n;
    return begin;
  };
  o.w1 = take(s.reduce().weight_count());
  o.b1 = take(static_cast<std::size_t>(s.mid()));
  o.w2 = take(s.spatial().weight_count());
  o.b2 = take(static_cast<std::size_t>(s.mid()));
  o.w3 = take(s.expand().weight_count());
  o.b3 = take(static_cast<std::size_t>(s.out_ch));
  if (s.projection()) {
    o.ws = take(s.shortcut().weight_count());
    o.bs = take(static_cast<std::size_t>(s.out_ch));
  } else {
    o.ws = o.bs = at;
  }
  o.end = at;
  return o;
}

}  // namespace

int same_extent(int in, int stride) { return (in + stride - 1) / stride; }

int same_pad_before(int in, int kernel, int stride) {
  const int total = std::max((same_extent(in, stride) - 1) * stride + kernel - in, 0);
  return total / 2;
}

std::size_t ConvShape::weight_count() const {
  return static_cast<std::size_t>(kernel_h) * kernel_w * in_ch * out_ch;
}

void ConvShape::validate() const {
  if (kernel_h < 1 || kernel_w < 1 || in_ch < 1 || out_ch < 1) throw ValidationError("conv dimensions must be >= 1");
  if (stride != 1 && stride != 2) throw ValidationError("conv stride must be 1 or 2");
}

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> w, std::span<const T> b, const ConvShape& s) {
  s.validate();
  if (x.c != s.in_ch) {
    throw ValidationError("conv2d: input has " + std::to_string(x.c) + " channels, expected " +
                          std::to_string(s.in_ch));
  }
  check_span(w.size(), s.weight_count(), "conv2d weights");
  check_span(b.size(), static_cast<std::size_t>(s.out_ch), "conv2d bias");
  const ConvGeom g = conv_geom(x.h, x.w, s);
  Tensor4<T> y(x.n, g.out_h, g.out_w, s.out_ch);
  const Eigen::Index rows = static_cast<Eigen::Index>(x.n) * g.out_h * g.out_w;
  const Eigen::Index k = static_cast<Eigen::Index>(s.weight_count() / s.out_ch);
  const ConstMat<T> wm(w.data(), k, s.out_ch);
  MutMat<T> ym(y.data.data(), rows, s.out_ch);
  if (is_pointwise(s)) {
    ym.noalias() = ConstMat<T>(x.data.data(), rows, k) * wm;
  } else {
    AlignedVector<T> cols(static_cast<std::size_t>(rows * k));
    im2col(x, s, g, cols.data());
    ym.noalias() = ConstMat<T>(cols.data(), rows, k) * wm;
  }
  ym.rowwise() += ConstRow<T>(b.data(), s.out_ch);
  return y;
}

template <class T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> w, const ConvShape& s, const Tensor4<T>& dy,
                     Tensor4<T>* dx, std::span<T> dw, std::span<T> db) {
  s.validate();
  const ConvGeom g = conv_geom(x.h, x.w, s);
  expect_shape(dy.shape(), {x.n, g.out_h, g.out_w, s.out_ch}, "conv2d gradient");
  check_span(w.size(), s.weight_count(), "conv2d weights");
  check_span(dw.size(), s.weight_count(), "conv2d weight gradient");
  check_span(db.size(), static_cast<std::size_t>(s.out_ch), "conv2d bias gradient");
  const Eigen::Index rows = static_cast<Eigen::Index>(x.n) * g.out_h * g.out_w;
  const Eigen::Index k = static_cast<Eigen::Index>(s.weight_count() / s.out_ch);
  const ConstMat<T> wm(w.data(), k, s.out_ch);
  const ConstMat<T> dym(dy.data.data(), rows, s.out_ch);
  MutRow<T>(db.data(), s.out_ch) += dym.colwise().sum();
  MutMat<T> dwm(dw.data(), k, s.out_ch);
  if (is_pointwise(s)) {
    dwm.noalias() += ConstMat<T>(x.data.data(), rows, k).transpose() * dym;
    if (dx) {
      *dx = Tensor4<T>(x.n, x.h, x.w, x.c);
      MutMat<T>(dx->data.data(), rows, k).noalias() = dym * wm.transpose();
    }
    return;
  }
  AlignedVector<T> cols(static_cast<std::size_t>(rows * k));
  im2col(x, s, g, cols.data());
  dwm.noalias() += ConstMat<T>(cols.data(), rows, k).transpose() * dym;
  if (dx) {
    MutMat<T>(cols.data(), rows, k).noalias() = dym * wm.transpose();
    *dx = Tensor4<T>(x.n, x.h, x.w, x.c);
    col2im(cols.data(), s, g, *dx);
  }
}

template <class T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
  Tensor4<T> y = x;
  for (auto& v : y.data) v = v > T(0) ? v : T(0);
  return y;
}

template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy) {
  expect_shape(dy.shape(), y.shape(), "relu gradient");
  Tensor4<T> dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i) {
    if (!(y.data[i] > T(0))) dx.data[i] = T(0);
  }
  return dx;
}

template <class T>
Tensor4<T> concat_forward(std::span<const Tensor4<T>* const> xs) {
  if (xs.empty()) throw ValidationError("concat needs at least one input");
  const auto& first = *xs.front();
  int channels = 0;
  for (const auto* x : xs) {
    if (x->n != first.n || x->h != first.h || x->w != first.w) {
      throw ValidationError("concat inputs disagree: " + shape_string(first.shape()) + " vs " +
                            shape_string(x->shape()));
    }
    channels += x->c;
  }
  Tensor4<T> y(first.n, first.h, first.w, channels);
  const std::size_t pixels = static_cast<std::size_t>(first.n) * first.h * first.w;
  for (std::size_t p = 0; p < pixels; ++p) {
    T* dst = &y.data[p * channels];
    for (const auto* x : xs) {
      std::memcpy(dst, &x->data[p * x->c], sizeof(T) * x->c);
      dst += x->c;
    }
  }
  return y;
}

template <class T>
std::vector<Tensor4<T>> concat_backward(const Tensor4<T>& dy, std::span<const int> channels) {
  int total = 0;
  for (int c : channels) total += c;
  if (total != dy.c) throw ValidationError("concat gradient channel count mismatch");
  std::vector<Tensor4<T>> out;
  for (int c : channels) out.emplace_back(dy.n, dy.h, dy.w, c);
  const std::size_t pixels = static_cast<std::size_t>(dy.n) * dy.h * dy.w;
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* src = &dy.data[p * dy.c];
    for (auto& o : out) {
      std::memcpy(&o.data[p * o.c], src, sizeof(T) * o.c);
      src += o.c;
    }
  }
  return out;
}

namespace {

template <class T, class Fn>
void for_each_pool_cell(int in_h, int in_w, int out_h, int out_w, Fn&& fn) {
  for (int oy = 0; oy < out_h; ++oy) {
    const int y0 = oy * in_h / out_h;
    const int y1 = ((oy + 1) * in_h + out_h - 1) / out_h;
    for (int ox = 0; ox < out_w; ++ox) {
      const int x0 = ox * in_w / out_w;
      const int x1 = ((ox + 1) * in_w + out_w - 1) / out_w;
      fn(oy, ox, y0, y1, x0, x1, T(1) / static_cast<T>((y1 - y0) * (x1 - x0)));
    }
  }
}

}  // namespace

template <class T>
Tensor4<T> adaptive_avg_pool_forward(const Tensor4<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1 || out_h > x.h || out_w > x.w) {
    throw ValidationError("adaptive pool cannot map " + shape_string(x.shape()) + " to " + std::to_string(out_h) +
                          "x" + std::to_string(out_w));
  }
  Tensor4<T> y(x.n, out_h, out_w, x.c);
  for (int i = 0; i < x.n; ++i) {
    for_each_pool_cell<T>(x.h, x.w, out_h, out_w, [&](int oy, int ox, int y0, int y1, int x0, int x1, T scale) {
      T* dst = &y.data[y.offset(i, oy, ox, 0)];
      for (int yy = y0; yy < y1; ++yy) {
        for (int xx = x0; xx < x1; ++xx) {
          const T* src = &x.data[x.offset(i, yy, xx, 0)];
          for (int ch = 0; ch < x.c; ++ch) dst[ch] += src[ch];
        }
      }
      for (int ch = 0; ch < x.c; ++ch) dst[ch] *= scale;
    });
  }
  return y;
}

template <class T>
Tensor4<T> adaptive_avg_pool_backward(const Tensor4<T>& dy, int in_h, int in_w) {
  Tensor4<T> dx(dy.n, in_h, in_w, dy.c);
  for (int i = 0; i < dy.n; ++i) {
    for_each_pool_cell<T>(in_h, in_w, dy.h, dy.w, [&](int oy, int ox, int y0, int y1, int x0, int x1, T scale) {
      const T* src = &dy.data[dy.offset(i, oy, ox, 0)];
      for (int yy = y0; yy < y1; ++yy) {
        for (int xx = x0; xx < x1; ++xx) {
          T* dst = &dx.data[dx.offset(i, yy, xx, 0)];
          for (int ch = 0; ch < dy.c; ++ch) dst[ch] += scale * src[ch];
        }
      }
    });
  }
  return dx;
}

template <class T>
Tensor4<T> global_avg_pool_forward(const Tensor4<T>& x) {
  Tensor4<T> y(x.n, 1, 1, x.c);
  const int pixels = x.h * x.w;
  if (pixels == 0) throw ValidationError("global pool over an empty map");
  for (int i = 0; i < x.n; ++i) {
    const ConstMat<T> m(x.sample(i), pixels, x.c);
    MutRow<T>(y.sample(i), x.c) = m.colwise().sum() / static_cast<T>(pixels);
  }
  return y;
}

template <class T>
Tensor4<T> global_avg_pool_backward(const Tensor4<T>& dy, int in_h, int in_w) {
  Tensor4<T> dx(dy.n, in_h, in_w, dy.c);
  const int pixels = in_h * in_w;
  for (int i = 0; i < dy.n; ++i) {
    MutMat<T>(dx.sample(i), pixels, dy.c).rowwise() = ConstRow<T>(dy.sample(i), dy.c) / static_cast<T>(pixels);
  }
  return dx;
}

template <class T>
Tensor4<T> dense_forward(const Tensor4<T>& x, std::span<const T> w, std::span<const T> b, int in, int out) {
  if (static_cast<std::size_t>(x.h) * x.w * x.c != static_cast<std::size_t>(in)) {
    throw ValidationError("dense: input " + shape_string(x.shape()) + " does not flatten to " + std::to_string(in));
  }
  check_span(w.size(), static_cast<std::size_t>(in) * out, "dense weights");
  check_span(b.size(), static_cast<std::size_t>(out), "dense bias");
  Tensor4<T> y(x.n, 1, 1, out);
  MutMat<T> ym(y.data.data(), x.n, out);
  ym.noalias() = ConstMat<T>(x.data.data(), x.n, in) * ConstMat<T>(w.data(), in, out);
  ym.rowwise() += ConstRow<T>(b.data(), out);
  return y;
}

template <class T>
void dense_backward(const Tensor4<T>& x, std::span<const T> w, int in, int out, const Tensor4<T>& dy, Tensor4<T>* dx,
                    std::span<T> dw, std::span<T> db) {
  expect_shape(dy.shape(), {x.n, 1, 1, out}, "dense gradient");
  check_span(dw.size(), static_cast<std::size_t>(in) * out, "dense weight gradient");
  check_span(db.size(), static_cast<std::size_t>(out), "dense bias gradient");
  const ConstMat<T> dym(dy.data.data(), x.n, out);
  MutMat<T>(dw.data(), in, out).noalias() += ConstMat<T>(x.data.data(), x.n, in).transpose() * dym;
  MutRow<T>(db.data(), out) += dym.colwise().sum();
  if (dx) {
    *dx = Tensor4<T>(x.n, x.h, x.w, x.c);
    MutMat<T>(dx->data.data(), x.n, in).noalias() = dym * ConstMat<T>(w.data(), in, out).transpose();
  }
}

std::size_t BottleneckShape::param_count() const {
  std::size_t n = reduce().param_count() + spatial().param_count() + expand().param_count();
  if (projection()) n += shortcut().param_count();
  return n;
}

void BottleneckShape::validate() const {
  if (in_ch < 1) throw ValidationError("bottleneck input channels must be >= 1");
  if (out_ch < 4 || out_ch % 4 != 0) {
    throw ValidationError("bottleneck width must be a positive multiple of 4, got " + std::to_string(out_ch));
  }
  if (stride != 1 && stride != 2) throw ValidationError("bottleneck stride must be 1 or 2");
}

template <class T>
Tensor4<T> bottleneck_forward(const Tensor4<T>& x, std::span<const T> params, const BottleneckShape& s,
                              BottleneckCache<T>* cache) {
  s.validate();
  const auto o = offsets(s);
  check_span(params.size(), o.end, "bottleneck parameters");
  const auto seg = [&](std::size_t begin, std::size_t n) { return params.subspan(begin, n); };
  Tensor4<T> a1 = relu_forward(conv2d_forward(x, seg(o.w1, o.b1 - o.w1), seg(o.b1, o.w2 - o.b1), s.reduce()));
  Tensor4<T> a2 = relu_forward(conv2d_forward(a1, seg(o.w2, o.b2 - o.w2), seg(o.b2, o.w3 - o.b2), s.spatial()));
  Tensor4<T> z = conv2d_forward(a2, seg(o.w3, o.b3 - o.w3), seg(o.b3, o.ws - o.b3), s.expand());
  if (s.projection()) {
    const Tensor4<T> sc = conv2d_forward(x, seg(o.ws, o.bs - o.ws), seg(o.bs, o.end - o.bs), s.shortcut());
    for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += sc.data[i];
  } else {
    for (std::size_t i = 0; i < z.data.size(); ++i) z.data[i] += x.data[i];
  }
  for (auto& v : z.data) v = v > T(0) ? v : T(0);
  if (cache) {
    cache->a1 = std::move(a1);
    cache->a2 = std::move(a2);
    cache->out = z;
  }
  return z;
}

template <class T>
void bottleneck_backward(const Tensor4<T>& x, std::span<const T> params, const BottleneckShape& s,
                         const BottleneckCache<T>& cache, const Tensor4<T>& dy, Tensor4<T>* dx, std::span<T> dparams) {
  s.validate();
  const auto o = offsets(s);
  check_span(params.size(), o.end, "bottleneck parameters");
  check_span(dparams.size(), o.end, "bottleneck parameter gradient");
  const auto seg = [&](std::size_t begin, std::size_t n) { return params.subspan(begin, n); };
  const auto dseg = [&](std::size_t begin, std::size_t n) { return dparams.subspan(begin, n); };

  const Tensor4<T> dz = relu_backward(cache.out, dy);
  Tensor4<T> da2;
  conv2d_backward(cache.a2, seg(o.w3, o.b3 - o.w3), s.expand(), dz, &da2, dseg(o.w3, o.b3 - o.w3),
                  dseg(o.b3, o.ws - o.b3));
  Tensor4<T> da1;
  conv2d_backward(cache.a1, seg(o.w2, o.b2 - o.w2), s.spatial(), relu_backward(cache.a2, da2), &da1,
                  dseg(o.w2, o.b2 - o.w2), dseg(o.b2, o.w3 - o.b2));
  Tensor4<T> dx_branch;
  conv2d_backward(x, seg(o.w1, o.b1 - o.w1), s.reduce(), relu_backward(cache.a1, da1), dx ? &dx_branch : nullptr,
                  dseg(o.w1, o.b1 - o.w1), dseg(o.b1, o.w2 - o.b1));
  if (s.projection()) {
    Tensor4<T> dx_short;
    conv2d_backward(x, seg(o.ws, o.bs - o.ws), s.shortcut(), dz, dx ? &dx_short : nullptr, dseg(o.ws, o.bs - o.ws),
                    dseg(o.bs, o.end - o.bs));
    if (dx) {
      for (std::size_t i = 0; i < dx_branch.data.size(); ++i) dx_branch.data[i] += dx_short.data[i];
    }
  } else if (dx) {
    for (std::size_t i = 0; i < dx_branch.data.size(); ++i) dx_branch.data[i] += dz.data[i];
  }
  if (dx) *dx = std::move(dx_branch);
}

template <class T>
std::pair<T, Tensor4<T>> mse_loss(const Tensor4<T>& pred, const Tensor4<T>& target) {
  expect_shape(target.shape(), pred.shape(), "mse target");
  if (pred.data.empty()) throw ValidationError("mse over an empty batch");
  Tensor4<T> grad(pred.n, pred.h, pred.w, pred.c);
  const T count = static_cast<T>(pred.data.size());
  T sum = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const T d = pred.data[i] - target.data[i];
    sum += d * d;
    grad.data[i] = T(2) * d / count;
  }
  return {sum / count, std::move(grad)};
}

#define HEADPOSE_NN_INSTANTIATE(T)                                                                                  \
  template Tensor4<T> conv2d_forward(const Tensor4<T>&, std::span<const T>, std::span<const T>, const ConvShape&);  \
  template void conv2d_backward(const Tensor4<T>&, std::span<const T>, const ConvShape&, const Tensor4<T>&,         \
                                Tensor4<T>*, std::span<T>, std::span<T>);                                           \
  template Tensor4<T> relu_forward(const Tensor4<T>&);                                                              \
  template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);                                          \
  template Tensor4<T> concat_forward(std::span<const Tensor4<T>* const>);                                           \
  template std::vector<Tensor4<T>> concat_backward(const Tensor4<T>&, std::span<const int>);                        \
  template Tensor4<T> adaptive_avg_pool_forward(const Tensor4<T>&, int, int);                                       \
  template Tensor4<T> adaptive_avg_pool_backward(const Tensor4<T>&, int, int);                                      \
  template Tensor4<T> global_avg_pool_forward(const Tensor4<T>&);                                                   \
  template Tensor4<T> global_avg_pool_backward(const Tensor4<T>&, int, int);                                        \
  template Tensor4<T> dense_forward(const Tensor4<T>&, std::span<const T>, std::span<const T>, int, int);           \
  template void dense_backward(const Tensor4<T>&, std::span<const T>, int, int, const Tensor4<T>&, Tensor4<T>*,     \
                               std::span<T>, std::span<T>);                                                         \
  template Tensor4<T> bottleneck_forward(const Tensor4<T>&, std::span<const T>, const BottleneckShape&,             \
                                         BottleneckCache<T>*);                                                      \
  template void bottleneck_backward(const Tensor4<T>&, std::span<const T>, const BottleneckShape&,                  \
                                    const BottleneckCache<T>&, const Tensor4<T>&, Tensor4<T>*, std::span<T>);       \
  template std::pair<T, Tensor4<T>> mse_loss(const Tensor4<T>&, const Tensor4<T>&);

HEADPOSE_NN_INSTANTIATE(float)
HEADPOSE_NN_INSTANTIATE(double)

#undef HEADPOSE_NN_INSTANTIATE

}  // namespace headpose::nn
