#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

#include "arseg/autograd.hpp"
#include "arseg/tensor.hpp"

namespace arseg {

namespace detail {

/// 1-D corner-aligned bilinear weights, out x in. Sample i sits at
/// i*(in-1)/(out-1); a single output sample sits at the centre.
inline Mat<double> linear_weights(int in, int out) {
  Mat<double> wts = Mat<double>::Zero(out, in);
  for (int i = 0; i < out; ++i) {
    double pos;
    if (out == 1)
      pos = 0.5 * (in - 1);
    else
      pos = static_cast<double>(i) * (in - 1) / (out - 1);
    int lo = static_cast<int>(std::floor(pos));
    if (lo >= in - 1) {
      wts(i, in - 1) = 1.0;
      continue;
    }
    const double frac = pos - lo;
    wts(i, lo) += 1.0 - frac;
    if (frac > 0) wts(i, lo + 1) += frac;
  }
  return wts;
}

}  // namespace detail

/// Dense bilinear operator P with P * raster(h x w) = raster(oh x ow).
template <class T>
Mat<T> interpolation_matrix(int h, int w, int oh, int ow) {
  if (h < 1 || w < 1 || oh < 1 || ow < 1) throw InvalidInput("interpolate: sizes must be >= 1");
  const Mat<double> wy = detail::linear_weights(h, oh);
  const Mat<double> wx = detail::linear_weights(w, ow);
  Mat<T> p = Mat<T>::Zero(Index(oh) * ow, Index(h) * w);
  for (int oy = 0; oy < oh; ++oy)
    for (int iy = 0; iy < h; ++iy) {
      if (wy(oy, iy) == 0) continue;
      for (int ox = 0; ox < ow; ++ox)
        for (int ix = 0; ix < w; ++ix) {
          if (wx(ox, ix) == 0) continue;
          p(Index(oy) * ow + ox, Index(iy) * w + ix) = static_cast<T>(wy(oy, iy) * wx(ox, ix));
        }
    }
  return p;
}

/// Process-wide cache of interpolation operators keyed by geometry.
template <class T>
std::shared_ptr<const Mat<T>> interpolation_operator(int h, int w, int oh, int ow) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int, int>, std::shared_ptr<const Mat<T>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(h, w, oh, ow);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto p = std::make_shared<const Mat<T>>(interpolation_matrix<T>(h, w, oh, ow));
  cache.emplace(key, p);
  return p;
}

/// Channel-wise bilinear (corner-aligned) resize; exact identity when the
/// target equals the source shape.
template <class T>
Raster<T> interpolate(const Raster<T>& src, int oh, int ow) {
  if (oh < 1 || ow < 1) throw InvalidInput("interpolate: target must be >= 1x1");
  if (oh == src.h && ow == src.w) return src;
  auto p = interpolation_operator<T>(src.h, src.w, oh, ow);
  Mat<T> out(Index(oh) * ow, src.values.cols());
  out.noalias() = (*p) * src.values;
  return Raster<T>(oh, ow, std::move(out));
}

namespace ag {

/// Differentiable variant of interpolate() on a tape.
template <class T>
Var<T> interpolate(Var<T> x, int h, int w, int oh, int ow) {
  if (oh == h && ow == w) return x;
  return left_apply(interpolation_operator<T>(h, w, oh, ow), x);
}

}  // namespace ag

}  // namespace arseg
