#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "arseg/arseg.hpp"

namespace arseg::testing {

inline AutoencoderConfig tiny_ae(int image = 16) {
  AutoencoderConfig c;
  c.image_size = image;
  c.channels = 4;
  c.latent_dim = 4;
  c.codebook_size = 8;
  c.gn_groups = 2;
  const int n = image / 4;
  c.schedule.resolutions.clear();
  for (int r : {1, 2, n}) c.schedule.resolutions.emplace_back(r, r);
  return c;
}

inline ModelConfig tiny_models(bool next_token = false, int classes = 2, int in_channels = 1) {
  ModelConfig m;
  m.ae = tiny_ae();
  m.image.image_size = 16;
  m.image.in_channels = in_channels;
  m.image.channels = 4;
  m.image.embed_dim = 8;
  m.image.mlp_hidden = 8;
  m.image.svd_rank = 2;
  m.image.gn_groups = 2;
  m.seg.width = 16;
  m.seg.depth = 2;
  m.seg.heads = 2;
  m.seg.cond_dim = 8;
  m.seg.mlp_ratio = 2;
  m.seg.num_classes = classes;
  AblationFlagSet f;
  f.single_scale = next_token;
  f.next_token = next_token;
  return build_variant(f, m);
}

inline BinaryMask random_mask(int h, int w, Rng& rng, double p = 0.5) {
  BinaryMask m(h, w);
  for (auto& v : m.data) v = uniform01(rng) < p ? 1 : 0;
  return m;
}

inline BinaryMask disk_mask(int n, double cx, double cy, double r) {
  BinaryMask m(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) m.at(y, x) = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy) <= r * r;
  return m;
}

template <class T>
Mat<T> random_mat(Index r, Index c, Rng& rng, double scale = 1.0) {
  Mat<T> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(scale * standard_normal(rng));
  return m;
}

inline TokenPyramid random_pyramid(const ScaleSchedule& s, int vocab, Rng& rng) {
  TokenPyramid p;
  for (int k = 0; k < s.scales(); ++k) {
    TokenMap t(s.h(k), s.w(k), k + 1);
    for (auto& v : t.indices) v = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
    p.maps.push_back(t);
  }
  return p;
}

struct GradCheck {
  double max_rel = 0;
  int checked = 0;
};

/// Central finite differences on `count` randomly chosen trainable scalar
/// parameters. `loss` must evaluate the objective at the current parameter
/// values; `grad_of(param, index)` returns the analytic gradient.
inline GradCheck finite_difference_check(std::vector<ParamStore<double>*> stores, const std::function<double()>& loss,
                                         int count, Rng& rng, double h = 1e-5) {
  std::vector<Param<double>*> params;
  for (auto* ps : stores)
    for (std::size_t i = 0; i < ps->size(); ++i)
      if ((*ps)[i].trainable) params.push_back(&(*ps)[i]);
  GradCheck out;
  for (int n = 0; n < count; ++n) {
    Param<double>* p = params[rng() % params.size()];
    const Index idx = static_cast<Index>(rng() % static_cast<std::uint64_t>(p->value.size()));
    const double analytic = p->grad.data()[idx];
    const double x0 = p->value.data()[idx];
    p->value.data()[idx] = x0 + h;
    const double lp = loss();
    p->value.data()[idx] = x0 - h;
    const double lm = loss();
    p->value.data()[idx] = x0;
    const double fd = (lp - lm) / (2 * h);
    const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
    out.max_rel = std::max(out.max_rel, rel);
    ++out.checked;
  }
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("arseg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace arseg::testing
