#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "arseg/autograd.hpp"
#include "arseg/error.hpp"
#include "arseg/rng.hpp"
#include "arseg/tensor.hpp"

namespace arseg {

/// V code vectors of dimension d, stored as a V x d matrix.
template <class T>
class Codebook {
 public:
  Codebook() = default;
  explicit Codebook(Mat<T> vectors) : vectors_(std::move(vectors)) { validate(); }

  /// Entries uniform in [-1/V, 1/V].
  static Codebook random(int size, int dim, Rng& rng) {
    if (size < 2 || dim < 1) throw ConfigError("codebook needs V >= 2 and d >= 1");
    const double bound = 1.0 / size;
    Mat<T> v(size, dim);
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
    return Codebook(std::move(v));
  }

  int size() const { return static_cast<int>(vectors_.rows()); }
  int dim() const { return static_cast<int>(vectors_.cols()); }
  const Mat<T>& vectors() const { return vectors_; }

 private:
  void validate() const {
    if (vectors_.rows() < 2 || vectors_.cols() < 1) throw ConfigError("codebook needs V >= 2 and d >= 1");
    if (!vectors_.allFinite()) throw InvalidInput("codebook has non-finite entries");
  }

  Mat<T> vectors_;
};

/// Integer raster of code indices for one scale of a token pyramid.
struct TokenMap {
  int h = 0;
  int w = 0;
  int scale_index = 1;  // 1-based
  std::vector<int> indices;  // row-major, size h*w

  TokenMap() = default;
  TokenMap(int h_, int w_, int scale, std::vector<int> idx = {})
      : h(h_), w(w_), scale_index(scale), indices(std::move(idx)) {
    if (indices.empty()) indices.assign(static_cast<std::size_t>(h * w), 0);
    if (static_cast<int>(indices.size()) != h * w) throw InvalidInput("token map size != h*w");
  }

  int size() const { return h * w; }
  int at(int y, int x) const { return indices[static_cast<std::size_t>(y * w + x)]; }
  bool operator==(const TokenMap& o) const { return h == o.h && w == o.w && indices == o.indices; }
};

/// Nearest code index per cell (squared Euclidean distance, lowest index
/// wins ties).
template <class T>
TokenMap quantize(const Raster<T>& feature, const Codebook<T>& codebook, int scale_index = 1) {
  if (feature.channels() != codebook.dim())
    throw InvalidInput("quantize: feature depth " + std::to_string(feature.channels()) + " != code dim " +
                       std::to_string(codebook.dim()));
  if (!feature.values.allFinite()) throw InvalidInput("quantize: non-finite feature entries");
  const Mat<T>& z = codebook.vectors();
  const int n = feature.h * feature.w;
  const int d = codebook.dim();
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* f = feature.values.row(i).data();
    T best = std::numeric_limits<T>::infinity();
    int best_v = 0;
    for (int v = 0; v < codebook.size(); ++v) {
      const T* zr = z.row(v).data();
      T dist = 0;
      for (int c = 0; c < d; ++c) {
        const T diff = f[c] - zr[c];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_v = v;
      }
    }
    idx[static_cast<std::size_t>(i)] = best_v;
  }
  return TokenMap(feature.h, feature.w, scale_index, std::move(idx));
}

inline void check_token_range(const TokenMap& tokens, int codebook_size) {
  for (int v : tokens.indices)
    if (v < 0 || v >= codebook_size)
      throw IndexError("token index " + std::to_string(v) + " outside codebook of size " + std::to_string(codebook_size));
}

/// Raster whose cell (i,j) is codebook row tokens(i,j).
template <class T>
Raster<T> lookup(const TokenMap& tokens, const Codebook<T>& codebook) {
  check_token_range(tokens, codebook.size());
  Raster<T> out(tokens.h, tokens.w, codebook.dim());
  for (int i = 0; i < tokens.size(); ++i)
    out.values.row(i) = codebook.vectors().row(tokens.indices[static_cast<std::size_t>(i)]);
  return out;
}

namespace ag {

/// Differentiable lookup: gradient flows into the codebook rows used.
template <class T>
Var<T> lookup(Var<T> codebook, const TokenMap& tokens) {
  check_token_range(tokens, static_cast<int>(codebook.rows()));
  return gather_rows(codebook, tokens.indices);
}

/// ||m - sg(mhat)|| + beta ||sg(m) - mhat||. The first term trains the
/// encoder, the second (commitment-weighted) term the codebook path. The
/// forward value is (1 + beta) ||m - mhat||.
template <class T>
Var<T> quantization_loss(Var<T> m, Var<T> mhat, T beta) {
  if (m.rows() != mhat.rows() || m.cols() != mhat.cols()) throw InvalidInput("quantization_loss: shape mismatch");
  if (beta < 0) throw InvalidInput("quantization_loss: beta must be >= 0");
  auto enc = l2_norm(sub(m, stop_gradient(mhat)));
  auto cb = l2_norm(sub(stop_gradient(m), mhat));
  return add(enc, scale(cb, beta));
}

/// Straight-through estimator: forward value is mhat (up to rounding of
/// m + (mhat - m)), gradient is the identity into m.
template <class T>
Var<T> straight_through(Var<T> m, Var<T> mhat) {
  return add(m, stop_gradient(sub(mhat, m)));
}

}  // namespace ag

/// Forward value of the quantization constraint.
template <class T>
T quantization_loss(const Mat<T>& m, const Mat<T>& mhat, T beta) {
  if (m.rows() != mhat.rows() || m.cols() != mhat.cols()) throw InvalidInput("quantization_loss: shape mismatch");
  if (beta < 0) throw InvalidInput("quantization_loss: beta must be >= 0");
  const T n = (m - mhat).norm();
  return n + beta * n;
}

}  // namespace arseg
