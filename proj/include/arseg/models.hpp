#pragma once

#include "arseg/autoencoder.hpp"
#include "arseg/image_adapter.hpp"
#include "arseg/segmentor.hpp"

namespace arseg {

struct ModelConfig {
  AutoencoderConfig ae;
  ImageEncoderConfig image;
  SegmentorConfig seg;
};

/// Fills the segmentor's derived fields from the autoencoder and image
/// encoder it is wired to.
inline SegmentorConfig wire_segmentor(SegmentorConfig seg, const AutoencoderConfig& ae, const ImageEncoderConfig& img) {
  seg.vocab = ae.codebook_size;
  seg.latent_dim = ae.latent_dim;
  seg.schedule = ae.schedule;
  seg.prefix_tokens = img.tokens();
  return seg;
}

/// The stage-2 model set: image branch + segmentor on top of a (frozen)
/// autoencoder.
template <class T>
struct SegmentationModels {
  AutoencoderModel<T> ae;
  ImageEncoderModel<T> image;
  SegmentorModel<T> seg;

  Mat<T> embed(const Mat<T>& image_rows) const { return image.embed(image_rows); }
};

}  // namespace arseg
