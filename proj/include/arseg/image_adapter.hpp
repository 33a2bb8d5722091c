#pragma once

// Image branch: a small convolutional backbone standing in for a pretrained
// image encoder, followed by the adapter f = proj(MLP(E) + SVD_r(E)).

#include <Eigen/SVD>

#include <algorithm>
#include <string>

#include "arseg/autograd.hpp"
#include "arseg/layers.hpp"
#include "arseg/params.hpp"

namespace arseg {

struct ImageEncoderConfig {
  int image_size = 64;
  int in_channels = 1;  // C_img (4 for stacked MRI-style modalities)
  int channels = 16;
  int embed_dim = 32;   // d_e
  int mlp_hidden = 64;
  int svd_rank = 4;     // r
  bool use_svd = true;  // false => MLP-only adapter
  int out_dim = 128;    // d_f
  int gn_groups = 4;
  bool trainable_backbone = true;

  int grid() const { return image_size / 4; }
  int tokens() const { return grid() * grid(); }

  void validate() const {
    if (image_size < 8 || image_size % 4 != 0) throw ConfigError("image_size must be a multiple of 4 and >= 8");
    if (in_channels < 1 || channels < 1 || embed_dim < 1 || mlp_hidden < 1 || out_dim < 1)
      throw ConfigError("image encoder widths must be positive");
    if (use_svd && (svd_rank < 1 || svd_rank > std::min(tokens(), embed_dim)))
      throw ConfigError("svd_rank must be in [1, min(tokens, embed_dim)]");
  }
};

template <class T>
struct SvdFactors {
  Mat<T> u;                // n x k
  Eigen::VectorX<T> s;     // k, non-increasing
  Mat<T> v;                // m x k
};

/// Thin SVD with a deterministic sign convention: the largest-magnitude
/// entry of every left singular vector is positive.
template <class T>
SvdFactors<T> svd_factors(const Mat<T>& x) {
  if (!x.allFinite()) throw InvalidInput("svd: non-finite input");
  using MD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
  MD xd = x.template cast<double>();
  Eigen::JacobiSVD<MD> svd(xd, Eigen::ComputeThinU | Eigen::ComputeThinV);
  MD u = svd.matrixU();
  MD v = svd.matrixV();
  for (Index j = 0; j < u.cols(); ++j) {
    Index arg;
    u.col(j).cwiseAbs().maxCoeff(&arg);
    if (u(arg, j) < 0) {
      u.col(j) = -u.col(j);
      v.col(j) = -v.col(j);
    }
  }
  return SvdFactors<T>{u.cast<T>(), svd.singularValues().cast<T>(), v.cast<T>()};
}

/// Best rank-r approximation U_r S_r V_r^T of a (tokens x channels) matrix.
template <class T>
Mat<T> svd_branch(const Mat<T>& features, int rank) {
  const int maxr = static_cast<int>(std::min(features.rows(), features.cols()));
  if (rank < 1 || rank > maxr) throw InvalidInput("svd_branch: rank must be in [1, " + std::to_string(maxr) + "]");
  if (!features.allFinite()) throw InvalidInput("svd_branch: non-finite input");
  if (features.isZero(0)) return Mat<T>::Zero(features.rows(), features.cols());
  auto f = svd_factors(features);
  Mat<double> u = f.u.leftCols(rank).template cast<double>();
  Eigen::VectorXd s = f.s.head(rank).template cast<double>();
  Mat<double> v = f.v.leftCols(rank).template cast<double>();
  Mat<double> out = u * s.asDiagonal() * v.transpose();
  return out.cast<T>();
}

template <class T>
class ImageEncoderModel {
 public:
  ImageEncoderModel() = default;

  ImageEncoderModel(ImageEncoderConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    using namespace layers;
    const int c = cfg_.channels;
    add_conv(ps_, "img.conv0", cfg_.in_channels, c, rng);
    add_group_norm(ps_, "img.norm0", c);
    add_conv(ps_, "img.conv1", c, 2 * c, rng);
    add_group_norm(ps_, "img.norm1", 2 * c);
    add_conv(ps_, "img.conv2", 2 * c, cfg_.embed_dim, rng);
    add_group_norm(ps_, "img.norm2", cfg_.embed_dim);
    add_linear(ps_, "img.mlp1", cfg_.embed_dim, cfg_.mlp_hidden, rng);
    add_linear(ps_, "img.mlp2", cfg_.mlp_hidden, cfg_.embed_dim, rng);
    add_linear(ps_, "img.proj", cfg_.embed_dim, cfg_.out_dim, rng);
    if (!cfg_.trainable_backbone)
      for (const char* n : {"img.conv0", "img.conv1", "img.conv2"}) {
        ps_.at(std::string(n) + ".w").trainable = false;
        ps_.at(std::string(n) + ".b").trainable = false;
      }
  }

  const ImageEncoderConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  /// Backbone on a tape: (H*W x C_img) -> (h_K*w_K x d_e).
  template <class PS>
  static ag::Var<T> backbone_graph(ag::Tape<T>& tape, PS& ps, const ImageEncoderConfig& cfg, ag::Var<T> image) {
    using namespace layers;
    const int c = cfg.channels;
    int h = cfg.image_size, w = h, oh, ow;
    auto y = conv(tape, ps, "img.conv0", image, h, w, 1, oh, ow);
    y = gn_silu(tape, ps, "img.norm0", y, pick_groups(c, cfg.gn_groups));
    y = conv(tape, ps, "img.conv1", y, oh, ow, 2, h, w);
    y = gn_silu(tape, ps, "img.norm1", y, pick_groups(2 * c, cfg.gn_groups));
    y = conv(tape, ps, "img.conv2", y, h, w, 2, oh, ow);
    return gn_silu(tape, ps, "img.norm2", y, pick_groups(cfg.embed_dim, cfg.gn_groups));
  }

  /// Adapter on a tape. The SVD branch contributes to the forward value only.
  template <class PS>
  static ag::Var<T> adapter_graph(ag::Tape<T>& tape, PS& ps, const ImageEncoderConfig& cfg, ag::Var<T> feats) {
    using namespace layers;
    auto mlp = linear(tape, ps, "img.mlp2", ag::silu(linear(tape, ps, "img.mlp1", feats)));
    if (cfg.use_svd) mlp = ag::add(mlp, tape.constant(svd_branch(feats.value(), cfg.svd_rank)));
    return linear(tape, ps, "img.proj", mlp);
  }

  template <class PS>
  static ag::Var<T> embed_graph(ag::Tape<T>& tape, PS& ps, const ImageEncoderConfig& cfg, ag::Var<T> image) {
    return adapter_graph(tape, ps, cfg, backbone_graph(tape, ps, cfg, image));
  }

  /// Image laid out channel-major (C_img x H*W) -> (H*W x C_img) rows.
  static Mat<T> to_rows(const Mat<T>& channel_major) { return channel_major.transpose(); }

  void check_image(const Mat<T>& image_rows) const {
    if (image_rows.rows() != Index(cfg_.image_size) * cfg_.image_size || image_rows.cols() != cfg_.in_channels)
      throw InvalidInput("image shape " + shape_str(image_rows) + " does not match encoder config");
    if (!image_rows.allFinite()) throw InvalidInput("image has non-finite entries");
  }

  /// E_image(x): (H*W x C_img) -> (h_K*w_K x d_e).
  Mat<T> encode_image(const Mat<T>& image_rows) const {
    check_image(image_rows);
    ag::Tape<T> tape(false);
    return backbone_graph(tape, ps_, cfg_, tape.constant(image_rows)).value();
  }

  /// f = proj(MLP(E) + SVD(E)): (tokens x d_e) -> (tokens x d_f).
  Mat<T> adapt(const Mat<T>& features) const {
    if (features.rows() != cfg_.tokens() || features.cols() != cfg_.embed_dim)
      throw InvalidInput("adapt: feature shape does not match encoder config");
    ag::Tape<T> tape(false);
    return adapter_graph(tape, ps_, cfg_, tape.constant(features)).value();
  }

  Mat<T> embed(const Mat<T>& image_rows) const { return adapt(encode_image(image_rows)); }

 private:
  ImageEncoderConfig cfg_;
  ParamStore<T> ps_;
};

}  // namespace arseg
