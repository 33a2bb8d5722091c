#pragma once

#include <cstdint>

#include "arseg/models.hpp"

namespace arseg {

struct AblationFlagSet {
  bool single_scale = false;
  bool next_token = false;
  bool svd_adapter = true;

  void validate() const {
    if (next_token && !single_scale)
      throw ConfigError("ablation.next_token requires ablation.single_scale (raster decoding of one token map)");
  }
};

/// Applies the ablation flags to a base model configuration and wires the
/// segmentor to the resulting autoencoder/image encoder. Everything not
/// named by a flag is left unchanged.
inline ModelConfig build_variant(const AblationFlagSet& flags, ModelConfig base) {
  flags.validate();
  base.image.image_size = base.ae.image_size;
  base.image.out_dim = base.seg.width;
  if (flags.single_scale) base.ae.schedule = ScaleSchedule::single(base.ae.latent_size());
  base.seg.next_token = flags.next_token;
  base.image.use_svd = flags.svd_adapter;
  base.ae.validate();
  base.image.validate();
  base.seg = wire_segmentor(base.seg, base.ae, base.image);
  base.seg.validate();
  return base;
}

/// Token budget of a variant: single-scale uses h_K*w_K tokens, multi-scale
/// the sum over all scales.
inline int token_budget(const ModelConfig& m) { return m.ae.schedule.total_tokens(); }

/// Fresh model set; each component draws its initialisation from its own
/// derived stream.
template <class T>
SegmentationModels<T> make_models(const ModelConfig& cfg, std::uint64_t seed) {
  Rng ra = derive_rng(seed, "init.ae");
  Rng ri = derive_rng(seed, "init.image");
  Rng rs = derive_rng(seed, "init.seg");
  return SegmentationModels<T>{AutoencoderModel<T>(cfg.ae, ra), ImageEncoderModel<T>(cfg.image, ri),
                               SegmentorModel<T>(cfg.seg, rs)};
}

}  // namespace arseg
