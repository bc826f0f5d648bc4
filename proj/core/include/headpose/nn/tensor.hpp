#pragma once

#include <array>
#include <cstddef>
#include <new>
#include <string>
#include <vector>

namespace headpose::nn {

/// Cache-line aligned storage. Eigen's vectorized kernels peel differently
/// depending on the start address, so a fixed alignment keeps results
/// bit-identical from run to run.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }

  template <class U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense N x H x W x C tensor (channels fastest).
template <class T>
struct Tensor4 {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;
  AlignedVector<T> data;

  Tensor4() = default;
  Tensor4(int n_, int h_, int w_, int c_, T fill = T(0));

  std::size_t size() const { return data.size(); }
  std::array<int, 4> shape() const { return {n, h, w, c}; }
  bool same_shape(const Tensor4& o) const { return n == o.n && h == o.h && w == o.w && c == o.c; }
  std::size_t offset(int i, int y, int x, int ch) const {
    return ((static_cast<std::size_t>(i) * h + y) * w + x) * c + ch;
  }
  T& at(int i, int y, int x, int ch) { return data[offset(i, y, x, ch)]; }
  T at(int i, int y, int x, int ch) const { return data[offset(i, y, x, ch)]; }
  T* sample(int i) { return data.data() + static_cast<std::size_t>(i) * h * w * c; }
  const T* sample(int i) const { return data.data() + static_cast<std::size_t>(i) * h * w * c; }

  void fill(T v);
  /// Throws ValidationError if the element count differs.
  Tensor4 reshaped(int n_, int h_, int w_, int c_) const;
  template <class U>
  Tensor4<U> cast() const;
};

std::string shape_string(const std::array<int, 4>& s);

/// Throws ValidationError("<what>: expected A, got B") on mismatch.
void expect_shape(const std::array<int, 4>& got, const std::array<int, 4>& expected, const std::string& what);

template <class T>
template <class U>
Tensor4<U> Tensor4<T>::cast() const {
  Tensor4<U> out;
  out.n = n;
  out.h = h;
  out.w = w;
  out.c = c;
  out.data.assign(data.begin(), data.end());
  return out;
}

extern template struct Tensor4<float>;
extern template struct Tensor4<double>;

}  // namespace headpose::nn
