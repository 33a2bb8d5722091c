#pragma once

// Multi-scale mask autoencoder: convolutional mask encoder/decoder, a
// shared codebook, per-scale refiners phi_k, and the residual quantized /
// dequantized processes over a coarse-to-fine scale schedule.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "arseg/autograd.hpp"
#include "arseg/codebook.hpp"
#include "arseg/interpolate.hpp"
#include "arseg/layers.hpp"
#include "arseg/mask.hpp"
#include "arseg/params.hpp"

namespace arseg {

struct ScaleSchedule {
  std::vector<std::pair<int, int>> resolutions;  // (h_k, w_k), coarse to fine

  int scales() const { return static_cast<int>(resolutions.size()); }
  int h(int k) const { return resolutions[static_cast<std::size_t>(k)].first; }  // 0-based k
  int w(int k) const { return resolutions[static_cast<std::size_t>(k)].second; }
  int tokens(int k) const { return h(k) * w(k); }
  int total_tokens() const {
    int n = 0;
    for (int k = 0; k < scales(); ++k) n += tokens(k);
    return n;
  }
  /// Offset of scale k's first token in the flattened pyramid.
  int offset(int k) const {
    int n = 0;
    for (int j = 0; j < k; ++j) n += tokens(j);
    return n;
  }
  std::pair<int, int> last() const { return resolutions.back(); }

  void validate(int base_h, int base_w) const {
    if (resolutions.empty()) throw ConfigError("scale schedule must have K >= 1 entries");
    for (std::size_t k = 0; k < resolutions.size(); ++k) {
      if (resolutions[k].first < 1 || resolutions[k].second < 1) throw ConfigError("scale resolution must be >= 1");
      if (k > 0 && (resolutions[k].first < resolutions[k - 1].first || resolutions[k].second < resolutions[k - 1].second))
        throw ConfigError("scale schedule must be non-decreasing");
    }
    if (last().first != base_h || last().second != base_w)
      throw ConfigError("last scale must equal the latent resolution " + std::to_string(base_h) + "x" +
                        std::to_string(base_w));
  }

  bool operator==(const ScaleSchedule& o) const { return resolutions == o.resolutions; }

  static ScaleSchedule single(int base) { return ScaleSchedule{{{base, base}}}; }

  /// K = 8 ramp used by default for a 16x16 latent; other bases are scaled
  /// proportionally and rounded.
  static ScaleSchedule default_for(int base) {
    static const int ramp16[] = {1, 2, 3, 4, 6, 8, 12, 16};
    ScaleSchedule s;
    for (int r : ramp16) {
      int v = base == 16 ? r : std::max(1, static_cast<int>(std::lround(r * base / 16.0)));
      s.resolutions.emplace_back(v, v);
    }
    s.resolutions.back() = {base, base};
    return s;
  }
};

/// Ordered token maps r_1..r_K.
struct TokenPyramid {
  std::vector<TokenMap> maps;

  int scales() const { return static_cast<int>(maps.size()); }
  int total_tokens() const {
    int n = 0;
    for (const auto& m : maps) n += m.size();
    return n;
  }
  /// All indices concatenated scale by scale.
  std::vector<int> flat() const {
    std::vector<int> out;
    for (const auto& m : maps) out.insert(out.end(), m.indices.begin(), m.indices.end());
    return out;
  }
  bool operator==(const TokenPyramid& o) const { return maps == o.maps; }
};

struct AutoencoderConfig {
  int image_size = 64;
  int channels = 16;        // width of the first conv stage
  int latent_dim = 32;      // d
  int codebook_size = 512;  // V
  int gn_groups = 4;
  ScaleSchedule schedule = ScaleSchedule::default_for(16);

  int latent_size() const { return image_size / 4; }

  void validate() const {
    if (image_size < 8 || image_size % 4 != 0) throw ConfigError("image_size must be a multiple of 4 and >= 8");
    if (channels < 1 || latent_dim < 1) throw ConfigError("autoencoder widths must be positive");
    if (codebook_size < 2) throw ConfigError("codebook_size must be >= 2");
    schedule.validate(latent_size(), latent_size());
  }
};

template <class T>
class AutoencoderModel {
 public:
  AutoencoderModel() = default;

  AutoencoderModel(AutoencoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    using namespace layers;
    const int c = cfg_.channels, d = cfg_.latent_dim;
    add_conv(ps_, "ae.enc.conv0", 1, c, rng);
    add_group_norm(ps_, "ae.enc.norm0", c);
    add_conv(ps_, "ae.enc.conv1", c, 2 * c, rng);
    add_group_norm(ps_, "ae.enc.norm1", 2 * c);
    add_conv(ps_, "ae.enc.conv2", 2 * c, 2 * c, rng);
    add_group_norm(ps_, "ae.enc.norm2", 2 * c);
    add_conv(ps_, "ae.enc.out", 2 * c, d, rng);

    add_conv(ps_, "ae.dec.in", d, 2 * c, rng);
    add_group_norm(ps_, "ae.dec.norm0", 2 * c);
    add_conv(ps_, "ae.dec.conv1", 2 * c, c, rng);
    add_group_norm(ps_, "ae.dec.norm1", c);
    add_conv(ps_, "ae.dec.conv2", c, c, rng);
    add_group_norm(ps_, "ae.dec.norm2", c);
    add_conv(ps_, "ae.dec.out", c, 1, rng);

    ps_.add("ae.codebook", Codebook<T>::random(cfg_.codebook_size, d, rng).vectors(), false);

    // phi_k: 3x3 conv d -> d, initialised near the identity, zero bias.
    for (int k = 0; k < cfg_.schedule.scales(); ++k) {
      Mat<T> wts = uniform_init<T>(rng, 9 * d, d, 0.1 / std::sqrt(9.0 * d));
      for (int ch = 0; ch < d; ++ch) wts(4 * d + ch, ch) += T(1);
      ps_.add(phi_name(k) + ".w", std::move(wts));
      ps_.add(phi_name(k) + ".b", Mat<T>::Zero(1, d), false);
    }
  }

  const AutoencoderConfig& config() const { return cfg_; }
  const ScaleSchedule& schedule() const { return cfg_.schedule; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }
  int latent_size() const { return cfg_.latent_size(); }
  Codebook<T> codebook() const { return Codebook<T>(ps_.at("ae.codebook").value); }

  static std::string phi_name(int k) { return "ae.phi" + std::to_string(k); }

  // ------------------------------------------------------------------ graph builders

  template <class PS>
  static ag::Var<T> encoder_graph(ag::Tape<T>& tape, PS& ps, const AutoencoderConfig& cfg, ag::Var<T> x) {
    using namespace layers;
    const int c = cfg.channels;
    int h = cfg.image_size, w = cfg.image_size, oh, ow;
    auto y = conv(tape, ps, "ae.enc.conv0", x, h, w, 1, oh, ow);
    y = gn_silu(tape, ps, "ae.enc.norm0", y, pick_groups(c, cfg.gn_groups));
    y = conv(tape, ps, "ae.enc.conv1", y, oh, ow, 2, h, w);
    y = gn_silu(tape, ps, "ae.enc.norm1", y, pick_groups(2 * c, cfg.gn_groups));
    y = conv(tape, ps, "ae.enc.conv2", y, h, w, 2, oh, ow);
    y = gn_silu(tape, ps, "ae.enc.norm2", y, pick_groups(2 * c, cfg.gn_groups));
    return conv(tape, ps, "ae.enc.out", y, oh, ow, 1, h, w);
  }

  template <class PS>
  static ag::Var<T> decoder_graph(ag::Tape<T>& tape, PS& ps, const AutoencoderConfig& cfg, ag::Var<T> m) {
    using namespace layers;
    const int c = cfg.channels;
    int h = cfg.latent_size(), w = h, oh, ow;
    auto y = conv(tape, ps, "ae.dec.in", m, h, w, 1, oh, ow);
    y = gn_silu(tape, ps, "ae.dec.norm0", y, pick_groups(2 * c, cfg.gn_groups));
    y = ag::upsample2x(y, oh, ow);
    h = 2 * oh;
    w = 2 * ow;
    y = conv(tape, ps, "ae.dec.conv1", y, h, w, 1, oh, ow);
    y = gn_silu(tape, ps, "ae.dec.norm1", y, pick_groups(c, cfg.gn_groups));
    y = ag::upsample2x(y, oh, ow);
    h = 2 * oh;
    w = 2 * ow;
    y = conv(tape, ps, "ae.dec.conv2", y, h, w, 1, oh, ow);
    y = gn_silu(tape, ps, "ae.dec.norm2", y, pick_groups(c, cfg.gn_groups));
    y = conv(tape, ps, "ae.dec.out", y, oh, ow, 1, h, w);
    return ag::sigmoid(y);
  }

  /// phi_k applied to an (h_K x w_K x d) raster.
  template <class PS>
  static ag::Var<T> phi_graph(ag::Tape<T>& tape, PS& ps, const AutoencoderConfig& cfg, int k, ag::Var<T> z) {
    int oh, ow;
    const int n = cfg.latent_size();
    return layers::conv(tape, ps, phi_name(k), z, n, n, 1, oh, ow);
  }

  /// phi_k(up(lookup(r_k))) on a tape; gradient reaches codebook and phi_k.
  template <class PS>
  static ag::Var<T> scale_contribution_graph(ag::Tape<T>& tape, PS& ps, const AutoencoderConfig& cfg, int k,
                                             const TokenMap& r) {
    const int n = cfg.latent_size();
    auto z = ag::lookup(layers::bind_param(tape, ps, "ae.codebook"), r);
    z = ag::interpolate(z, r.h, r.w, n, n);
    return phi_graph(tape, ps, cfg, k, z);
  }

  /// Pyramid dequantization on a tape over the first `upto` scales.
  template <class PS>
  static ag::Var<T> dequantize_graph(ag::Tape<T>& tape, PS& ps, const AutoencoderConfig& cfg, const TokenPyramid& pyr,
                                     int upto) {
    const int n = cfg.latent_size();
    auto acc = tape.constant(Mat<T>::Zero(Index(n) * n, cfg.latent_dim));
    for (int k = 0; k < upto; ++k) acc = ag::add(acc, scale_contribution_graph(tape, ps, cfg, k, pyr.maps[k]));
    return acc;
  }

  // ------------------------------------------------------------------ inference API

  /// E_mask: binary mask (H*W x 1) -> latent feature map (h_K x w_K x d).
  Raster<T> encode(const Mat<T>& mask) const {
    check_mask_shape(mask);
    ag::Tape<T> tape(false);
    auto m = encoder_graph(tape, ps_, cfg_, tape.constant(mask));
    return Raster<T>(latent_size(), latent_size(), m.value());
  }
  Raster<T> encode(const BinaryMask& mask) const { return encode(mask.to_column<T>()); }

  /// Residual quantization. The residual is kept as m minus the running reconstruction so
  /// that it shares its summation order with dequantize_pyramid().
  TokenPyramid quantize_pyramid(const Raster<T>& feature, Raster<T>* residual_out = nullptr) const {
    check_feature(feature);
    const Codebook<T> cb = codebook();
    const int n = latent_size();
    TokenPyramid pyr;
    Raster<T> recon(n, n, cfg_.latent_dim);
    for (int k = 0; k < cfg_.schedule.scales(); ++k) {
      Raster<T> residual(n, n, feature.values - recon.values);
      Raster<T> down = interpolate(residual, cfg_.schedule.h(k), cfg_.schedule.w(k));
      TokenMap r = quantize(down, cb, k + 1);
      recon.values = recon.values + scale_contribution(k, r);
      pyr.maps.push_back(std::move(r));
    }
    if (residual_out) *residual_out = Raster<T>(n, n, feature.values - recon.values);
    return pyr;
  }

  /// Dequantization (latent part): sum_k phi_k(up(lookup(r_k))) over the first
  /// `upto` scales (all scales when upto < 0).
  Raster<T> dequantize_pyramid(const TokenPyramid& pyr, int upto = -1) const {
    check_pyramid(pyr);
    if (upto < 0) upto = pyr.scales();
    if (upto > pyr.scales()) throw InvalidInput("dequantize: upto exceeds pyramid length");
    const int n = latent_size();
    Raster<T> recon(n, n, cfg_.latent_dim);
    for (int k = 0; k < upto; ++k) recon.values = recon.values + scale_contribution(k, pyr.maps[k]);
    return recon;
  }

  /// phi_k(up(lookup(r_k))) as a plain value.
  Mat<T> scale_contribution(int k, const TokenMap& r) const {
    ag::Tape<T> tape(false);
    return scale_contribution_graph(tape, ps_, cfg_, k, r).value();
  }

  /// D_mask: latent -> per-pixel foreground probability (H*W x 1).
  SoftMask<T> decode(const Raster<T>& feature) const {
    check_feature(feature);
    ag::Tape<T> tape(false);
    auto y = decoder_graph(tape, ps_, cfg_, tape.constant(feature.values));
    return SoftMask<T>{cfg_.image_size, cfg_.image_size, y.value()};
  }

  /// decode(dequantize(quantize(encode(mask)))).
  SoftMask<T> reconstruct(const BinaryMask& mask, int upto = -1) const {
    return decode(dequantize_pyramid(quantize_pyramid(encode(mask)), upto));
  }

  void check_pyramid(const TokenPyramid& pyr) const {
    if (pyr.scales() != cfg_.schedule.scales()) throw InvalidInput("pyramid length does not match the scale schedule");
    for (int k = 0; k < pyr.scales(); ++k) {
      if (pyr.maps[k].h != cfg_.schedule.h(k) || pyr.maps[k].w != cfg_.schedule.w(k))
        throw InvalidInput("token map " + std::to_string(k + 1) + " does not match the scale schedule");
      check_token_range(pyr.maps[k], cfg_.codebook_size);
    }
  }

 private:
  void check_mask_shape(const Mat<T>& mask) const {
    if (mask.rows() != Index(cfg_.image_size) * cfg_.image_size || mask.cols() != 1)
      throw InvalidInput("mask shape " + shape_str(mask) + " does not match image size " + std::to_string(cfg_.image_size));
  }
  void check_feature(const Raster<T>& f) const {
    if (f.h != latent_size() || f.w != latent_size() || f.channels() != cfg_.latent_dim)
      throw InvalidInput("feature map shape does not match the autoencoder");
    if (!f.values.allFinite()) throw InvalidInput("feature map has non-finite entries");
  }

  AutoencoderConfig cfg_;
  ParamStore<T> ps_;
};

}  // namespace arseg
