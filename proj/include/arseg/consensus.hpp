#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "arseg/mask.hpp"
#include "arseg/models.hpp"

namespace arseg {

template <class T>
struct SampleSet {
  std::vector<SoftMask<T>> masks;
  std::vector<TokenPyramid> pyramids;
  std::vector<std::uint64_t> seeds;

  int size() const { return static_cast<int>(masks.size()); }
};

/// One autoregressive rollout from an already-computed image embedding,
/// decoded to a soft mask.
template <class T>
SoftMask<T> segment_embedded(const SegmentationModels<T>& m, const Mat<T>& embedding, int class_id, double temperature,
                             std::uint64_t seed, TokenPyramid* pyramid_out = nullptr) {
  Rng rng = derive_rng(seed, "sample");
  TokenPyramid pyr = m.seg.generate(m.ae, embedding, class_id, temperature, rng);
  SoftMask<T> soft = m.ae.decode(m.ae.dequantize_pyramid(pyr));
  if (pyramid_out) *pyramid_out = std::move(pyr);
  return soft;
}

/// Single segmentation call: image (H*W x C_img rows) -> soft mask.
template <class T>
SoftMask<T> segment(const SegmentationModels<T>& m, const Mat<T>& image_rows, int class_id, double temperature,
                    std::uint64_t seed) {
  return segment_embedded(m, m.embed(image_rows), class_id, temperature, seed);
}

/// N independent rollouts with seeds base_seed .. base_seed + N - 1.
template <class T>
SampleSet<T> sample_masks(const SegmentationModels<T>& m, const Mat<T>& image_rows, int class_id, int n,
                          double temperature, std::uint64_t base_seed) {
  if (n < 1) throw InvalidInput("sample_masks: N must be >= 1");
  if (m.seg.config().schedule.total_tokens() != m.ae.schedule().total_tokens() ||
      m.seg.config().vocab != m.ae.config().codebook_size)
    throw ConfigError("segmentor and autoencoder are not wired to the same codebook/schedule");
  const Mat<T> f = m.embed(image_rows);
  SampleSet<T> out;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(i);
    TokenPyramid pyr;
    out.masks.push_back(segment_embedded(m, f, class_id, temperature, seed, &pyr));
    out.pyramids.push_back(std::move(pyr));
    out.seeds.push_back(seed);
  }
  return out;
}

template <class T>
struct Consensus {
  SoftMask<T> soft;
  BinaryMask binary;
};

/// Per-pixel mean of the sample masks, binarized at 0.5 (ties to
/// foreground).
template <class T>
Consensus<T> aggregate(const std::vector<SoftMask<T>>& masks) {
  if (masks.empty()) throw InvalidInput("aggregate: empty sample set");
  SoftMask<T> mean{masks.front().h, masks.front().w, Mat<T>::Zero(masks.front().values.rows(), 1)};
  for (const auto& m : masks)
    if (m.h != mean.h || m.w != mean.w || m.values.rows() != mean.values.rows())
      throw InvalidInput("aggregate: sample shapes differ");
  // Sorted per-pixel values make the result independent of sample order;
  // summing offsets from the minimum keeps identical samples exact.
  std::vector<double> px(masks.size());
  for (Index i = 0; i < mean.values.rows(); ++i) {
    for (std::size_t n = 0; n < masks.size(); ++n) px[n] = static_cast<double>(masks[n].values(i, 0));
    std::sort(px.begin(), px.end());
    double s = 0;
    for (double v : px) s += v - px.front();
    mean.values(i, 0) = static_cast<T>(std::clamp(px.front() + s / static_cast<double>(masks.size()), 0.0, 1.0));
  }
  BinaryMask bin = binarize(mean);
  return Consensus<T>{std::move(mean), std::move(bin)};
}

template <class T>
Consensus<T> aggregate(const SampleSet<T>& samples) {
  return aggregate(samples.masks);
}

}  // namespace arseg
