#include "headpose/nn/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "headpose/errors.hpp"

namespace headpose::nn {

template <class T>
Tensor4<T>::Tensor4(int n_, int h_, int w_, int c_, T fill) : n(n_), h(h_), w(w_), c(c_) {
  if (n_ < 0 || h_ < 0 || w_ < 0 || c_ < 0) throw ValidationError("negative tensor dimension");
  data.assign(static_cast<std::size_t>(n_) * h_ * w_ * c_, fill);
}

template <class T>
void Tensor4<T>::fill(T v) {
  std::fill(data.begin(), data.end(), v);
}

template <class T>
Tensor4<T> Tensor4<T>::reshaped(int n_, int h_, int w_, int c_) const {
  if (static_cast<std::size_t>(n_) * h_ * w_ * c_ != data.size()) {
    throw ValidationError("cannot reshape " + shape_string(shape()) + " to " + shape_string({n_, h_, w_, c_}));
  }
  Tensor4 out = *this;
  out.n = n_;
  out.h = h_;
  out.w = w_;
  out.c = c_;
  return out;
}

std::string shape_string(const std::array<int, 4>& s) {
  std::ostringstream os;
  os << s[0] << 'x' << s[1] << 'x' << s[2] << 'x' << s[3];
  return os.str();
}

void expect_shape(const std::array<int, 4>& got, const std::array<int, 4>& expected, const std::string& what) {
  if (got != expected) {
    throw ValidationError(what + ": expected " + shape_string(expected) + ", got " + shape_string(got));
  }
}

template struct Tensor4<float>;
template struct Tensor4<double>;

}  // namespace headpose::nn
