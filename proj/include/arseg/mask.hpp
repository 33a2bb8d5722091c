#pragma once

#include <cstdint>
#include <vector>

#include "arseg/error.hpp"
#include "arseg/tensor.hpp"

namespace arseg {

/// Binary raster (one class channel), row-major.
struct BinaryMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h_, int w_) : h(h_), w(w_), data(static_cast<std::size_t>(h_ * w_), 0) {}
  BinaryMask(int h_, int w_, std::vector<std::uint8_t> d) : h(h_), w(w_), data(std::move(d)) {
    if (static_cast<int>(data.size()) != h * w) throw InvalidInput("mask size != h*w");
  }

  int size() const { return h * w; }
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y * w + x)]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y * w + x)]; }
  int count() const {
    int n = 0;
    for (auto v : data) n += v;
    return n;
  }
  bool operator==(const BinaryMask& o) const { return h == o.h && w == o.w && data == o.data; }

  template <class T>
  Mat<T> to_column() const {
    Mat<T> m(size(), 1);
    for (int i = 0; i < size(); ++i) m(i, 0) = static_cast<T>(data[static_cast<std::size_t>(i)]);
    return m;
  }
};

/// Soft single-channel mask with values in [0, 1].
template <class T>
struct SoftMask {
  int h = 0;
  int w = 0;
  Mat<T> values;  // (h*w) x 1
};

/// Threshold at 0.5; a value of exactly 0.5 maps to foreground.
template <class T>
BinaryMask binarize(const SoftMask<T>& soft, T threshold = T(0.5)) {
  BinaryMask out(soft.h, soft.w);
  for (int i = 0; i < out.size(); ++i) out.data[static_cast<std::size_t>(i)] = soft.values(i, 0) >= threshold ? 1 : 0;
  return out;
}

template <class T>
SoftMask<T> to_soft(const BinaryMask& m) {
  return SoftMask<T>{m.h, m.w, m.to_column<T>()};
}

inline void check_binary(const Mat<float>& m) {
  for (Index i = 0; i < m.size(); ++i)
    if (m.data()[i] != 0.0f && m.data()[i] != 1.0f) throw InvalidInput("mask is not binary");
}

}  // namespace arseg
