#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "arseg/error.hpp"

namespace arseg {

/// Dense row-major matrix. Spatial rasters [h x w x d] are stored as
/// (h*w) x d with rows in raster (row-major) order.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// A real raster together with its spatial extent.
template <class T>
struct Raster {
  int h = 0;
  int w = 0;
  Mat<T> values;  // (h*w) x channels

  Raster() = default;
  Raster(int h_, int w_, int channels) : h(h_), w(w_), values(Mat<T>::Zero(Index(h_) * w_, channels)) {}
  Raster(int h_, int w_, Mat<T> v) : h(h_), w(w_), values(std::move(v)) {
    if (values.rows() != Index(h) * w) throw InvalidInput("raster rows do not match h*w");
  }

  int channels() const { return static_cast<int>(values.cols()); }
  bool same_shape(const Raster& o) const { return h == o.h && w == o.w && channels() == o.channels(); }
};

template <class T>
bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

template <class T>
std::string shape_str(const Mat<T>& m) {
  return "(" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + ")";
}

template <class To, class From>
Mat<To> cast(const Mat<From>& m) {
  return m.template cast<To>();
}

}  // namespace arseg
