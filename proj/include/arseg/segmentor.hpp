#pragma once

// Next-scale autoregressive segmentor. The sequence is
//   [ image prefix (T_f rows) | scale 1 | scale 2 | ... | scale K ]
// where the rows of scale k carry the (interpolated, projected) cumulative
// reconstruction of scales < k and predict the tokens of scale k. Class
// conditioning enters through AdaLN; the image embedding through the
// prefix. With next_token set, every single token is its own block and the
// inputs are embeddings of the previous token (raster order).

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "arseg/autoencoder.hpp"
#include "arseg/autograd.hpp"
#include "arseg/interpolate.hpp"
#include "arseg/layers.hpp"
#include "arseg/params.hpp"

namespace arseg {

struct SegmentorConfig {
  int width = 128;  // d_f
  int depth = 6;    // L
  int heads = 4;
  int cond_dim = 64;
  int mlp_ratio = 4;
  int num_classes = 1;
  bool next_token = false;

  // Derived from the autoencoder / image encoder when the model is built.
  int vocab = 0;       // V
  int latent_dim = 0;  // d
  int prefix_tokens = 0;
  ScaleSchedule schedule;

  void validate() const {
    if (width < 1 || depth < 0 || heads < 1 || cond_dim < 1 || mlp_ratio < 1)
      throw ConfigError("segmentor dimensions must be positive (depth >= 0)");
    if (width % heads != 0) throw ConfigError("heads must divide the segmentor width");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (vocab < 2 || latent_dim < 1 || prefix_tokens < 1 || schedule.scales() < 1)
      throw ConfigError("segmentor is not wired to an autoencoder/image encoder");
    if (next_token && schedule.scales() != 1) throw ConfigError("next-token decoding requires a single-scale autoencoder");
    const int last = schedule.scales() - 1;
    if (prefix_tokens != schedule.h(last) * schedule.w(last))
      throw ConfigError("image embedding grid must match the finest token map");
  }

  /// Rows per autoregressive block.
  std::vector<int> block_sizes() const {
    std::vector<int> out;
    if (next_token)
      out.assign(static_cast<std::size_t>(schedule.total_tokens()), 1);
    else
      for (int k = 0; k < schedule.scales(); ++k) out.push_back(schedule.tokens(k));
    return out;
  }
  int num_blocks() const { return next_token ? schedule.total_tokens() : schedule.scales(); }
  int total_tokens() const { return schedule.total_tokens(); }
};

/// Attention visibility over [prefix | tokens]. allowed(i, j) is true when
/// row i may attend to row j.
struct BlockCausalMask {
  int prefix = 0;
  std::vector<int> limits;  // per row: number of visible leading rows

  int size() const { return static_cast<int>(limits.size()); }
  bool allowed(int i, int j) const { return j < limits[static_cast<std::size_t>(i)]; }

  static BlockCausalMask build(int prefix_tokens, const std::vector<int>& blocks) {
    BlockCausalMask m;
    m.prefix = prefix_tokens;
    for (int i = 0; i < prefix_tokens; ++i) m.limits.push_back(prefix_tokens);
    int end = prefix_tokens;
    for (int b : blocks) {
      end += b;
      for (int i = 0; i < b; ++i) m.limits.push_back(end);
    }
    return m;
  }
};

/// Continuous inputs used under teacher forcing.
template <class T>
struct TeacherInputs {
  Mat<T> features;          // next-scale: rows of scales 2..K, latent_dim wide
  std::vector<int> tokens;  // next-token: previous tokens for rows 2..T
};

/// Builds the teacher-forcing inputs for a pyramid: for scale k > 1 the
/// cumulative reconstruction sum_{j<k} phi_j(up(lookup(r_j))) resized to
/// (h_k, w_k).
template <class T>
TeacherInputs<T> teacher_inputs(const AutoencoderModel<T>& ae, const TokenPyramid& pyr, bool next_token) {
  ae.check_pyramid(pyr);
  TeacherInputs<T> in;
  if (next_token) {
    auto flat = pyr.flat();
    in.tokens.assign(flat.begin(), flat.end() - 1);
    return in;
  }
  const ScaleSchedule& s = ae.schedule();
  const int n = ae.latent_size();
  in.features = Mat<T>(s.total_tokens() - s.tokens(0), ae.config().latent_dim);
  Raster<T> cum(n, n, ae.config().latent_dim);
  Index row = 0;
  for (int k = 1; k < s.scales(); ++k) {
    cum.values = cum.values + ae.scale_contribution(k - 1, pyr.maps[k - 1]);
    Raster<T> r = interpolate(cum, s.h(k), s.w(k));
    in.features.middleRows(row, r.values.rows()) = r.values;
    row += r.values.rows();
  }
  return in;
}

/// Independent draws from softmax(logits / temperature), one per row.
/// temperature < 1e-6 selects the argmax (lowest index on ties).
template <class T>
std::vector<int> sample_rows(const Mat<T>& logits, double temperature, Rng& rng) {
  if (!(temperature > 0)) throw InvalidInput("temperature must be > 0");
  if (!logits.allFinite()) throw InvalidInput("sample: non-finite logits");
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  const Index vsz = logits.cols();
  std::vector<double> p(static_cast<std::size_t>(vsz));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg;
    const double mx = static_cast<double>(logits.row(i).maxCoeff(&arg));
    if (temperature < 1e-6) {
      out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
      continue;
    }
    double z = 0;
    for (Index v = 0; v < vsz; ++v) {
      p[static_cast<std::size_t>(v)] = std::exp((static_cast<double>(logits(i, v)) - mx) / temperature);
      z += p[static_cast<std::size_t>(v)];
    }
    double u = uniform01(rng) * z;
    int pick = static_cast<int>(arg);
    double acc = 0;
    for (Index v = 0; v < vsz; ++v) {
      acc += p[static_cast<std::size_t>(v)];
      if (u < acc) {
        pick = static_cast<int>(v);
        break;
      }
    }
    out[static_cast<std::size_t>(i)] = pick;
  }
  return out;
}

template <class T>
TokenMap sample_next_scale(const Mat<T>& logits, int h, int w, int scale_index, double temperature, Rng& rng) {
  if (logits.rows() != Index(h) * w) throw InvalidInput("sample_next_scale: logits rows != h*w");
  return TokenMap(h, w, scale_index, sample_rows(logits, temperature, rng));
}

template <class T>
TokenMap sample_next_scale(const Mat<T>& logits, int h, int w, int scale_index, double temperature,
                           std::uint64_t seed) {
  Rng rng = derive_rng(seed, "sample");
  return sample_next_scale(logits, h, w, scale_index, temperature, rng);
}

template <class T>
class SegmentorModel;

/// Incremental decoding state: per-layer keys/values of every row fed so
/// far. Single consumer; not to be shared between concurrent samplers.
template <class T>
struct DecodeCache {
  const AutoencoderModel<T>* ae = nullptr;
  int class_id = 0;
  int next_block = 0;  // blocks whose logits have been emitted
  Mat<T> image;        // T_f x d_f
  std::vector<Mat<T>> keys, values;
  Mat<T> cumulative;  // next-scale: running latent reconstruction
  Mat<T> aligned;     // image embedding resampled onto every token grid
  std::vector<TokenMap> fed;
};

template <class T>
class SegmentorModel {
 public:
  SegmentorModel() = default;

  SegmentorModel(SegmentorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    using namespace layers;
    const int df = cfg_.width, dc = cfg_.cond_dim;
    ps_.add("seg.start", normal_init<T>(rng, 1, df, 0.02), false);
    ps_.add("seg.class_embed", normal_init<T>(rng, cfg_.num_classes, dc, 1.0), false);
    add_linear(ps_, "seg.cond_to_start", dc, df, rng);
    ps_.add("seg.prefix_pos", normal_init<T>(rng, cfg_.prefix_tokens, df, 0.02), false);
    ps_.add("seg.pos", normal_init<T>(rng, cfg_.total_tokens(), df, 0.02), false);
    ps_.add("seg.scale_embed", normal_init<T>(rng, cfg_.schedule.scales(), df, 0.02), false);
    add_linear(ps_, "seg.align_proj", df, df, rng);
    if (cfg_.next_token)
      ps_.add("seg.tok_embed", normal_init<T>(rng, cfg_.vocab, df, 0.02), false);
    else
      add_linear(ps_, "seg.feat_proj", cfg_.latent_dim, df, rng);
    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string b = blk(l);
      add_linear(ps_, b + ".ada", dc, 6 * df, rng, 0.1);
      add_linear(ps_, b + ".qkv", df, 3 * df, rng);
      add_linear(ps_, b + ".out", df, df, rng);
      add_linear(ps_, b + ".fc1", df, cfg_.mlp_ratio * df, rng);
      add_linear(ps_, b + ".fc2", cfg_.mlp_ratio * df, df, rng);
    }
    add_linear(ps_, "seg.final_ada", dc, 2 * df, rng, 0.1);
    add_linear(ps_, "seg.head", df, cfg_.vocab, rng);
  }

  const SegmentorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  static std::string blk(int l) { return "seg.blk" + std::to_string(l); }

  // ------------------------------------------------------------------ graph pieces

  template <class PS>
  static ag::Var<T> cond_graph(ag::Tape<T>& tape, PS& ps, const SegmentorConfig& cfg, int class_id) {
    if (class_id < 0 || class_id >= cfg.num_classes)
      throw InvalidInput("class id " + std::to_string(class_id) + " outside [0, " + std::to_string(cfg.num_classes) + ")");
    return ag::slice_rows(layers::bind_param(tape, ps, "seg.class_embed"), class_id, 1);
  }

  template <class PS>
  static ag::Var<T> start_graph(ag::Tape<T>& tape, PS& ps, ag::Var<T> cond, ag::Var<T> image) {
    auto s = ag::add(layers::bind_param(tape, ps, "seg.start"), layers::linear(tape, ps, "seg.cond_to_start", cond));
    return ag::add(s, ag::mean_rows(image));
  }

  /// Positional + scale embeddings for token rows [row0, row0 + n).
  template <class PS>
  static ag::Var<T> position_graph(ag::Tape<T>& tape, PS& ps, const SegmentorConfig& cfg, int row0, int n) {
    auto pos = ag::slice_rows(layers::bind_param(tape, ps, "seg.pos"), row0, n);
    std::vector<int> scale_of(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const int r = row0 + i;
      int k = 0;
      if (!cfg.next_token)
        while (k + 1 < cfg.schedule.scales() && r >= cfg.schedule.offset(k + 1)) ++k;
      scale_of[static_cast<std::size_t>(i)] = k;
    }
    return ag::add(pos, ag::gather_rows(layers::bind_param(tape, ps, "seg.scale_embed"), scale_of));
  }

  /// The h_K x w_K image embedding bilinearly resized to each scale's grid
  /// and stacked in token order (T x d_f). Gives every token the image
  /// evidence at its own location.
  static ag::Var<T> aligned_image_graph(const SegmentorConfig& cfg, ag::Var<T> image) {
    const auto& s = cfg.schedule;
    const int hk = s.h(s.scales() - 1), wk = s.w(s.scales() - 1);
    if (cfg.next_token) return image;
    std::vector<ag::Var<T>> parts;
    for (int k = 0; k < s.scales(); ++k) parts.push_back(ag::interpolate(image, hk, wk, s.h(k), s.w(k)));
    return ag::concat_rows(parts);
  }

  /// Runs the transformer blocks over `x` (new rows). When caches are
  /// given, keys/values of earlier rows are prepended and the new ones
  /// appended to the caches.
  template <class PS>
  static ag::Var<T> blocks_graph(ag::Tape<T>& tape, PS& ps, const SegmentorConfig& cfg, ag::Var<T> x,
                                 ag::Var<T> cond, const ag::AttentionLayout& layout,
                                 std::vector<Mat<T>>* kcache = nullptr, std::vector<Mat<T>>* vcache = nullptr) {
    using namespace layers;
    const Index df = cfg.width;
    auto c = ag::silu(cond);
    for (int l = 0; l < cfg.depth; ++l) {
      const std::string b = blk(l);
      auto ada = linear(tape, ps, b + ".ada", c);
      auto shift1 = ag::slice_cols(ada, 0, df), scale1 = ag::slice_cols(ada, df, df), gate1 = ag::slice_cols(ada, 2 * df, df);
      auto shift2 = ag::slice_cols(ada, 3 * df, df), scale2 = ag::slice_cols(ada, 4 * df, df),
           gate2 = ag::slice_cols(ada, 5 * df, df);

      auto h = ag::add_row(ag::mul_row(ag::layer_norm(x), ag::one_plus(scale1)), shift1);
      auto qkv = linear(tape, ps, b + ".qkv", h);
      auto q = ag::slice_cols(qkv, 0, df);
      auto k = ag::slice_cols(qkv, df, df);
      auto v = ag::slice_cols(qkv, 2 * df, df);
      if (kcache) {
        auto& kc = (*kcache)[static_cast<std::size_t>(l)];
        auto& vc = (*vcache)[static_cast<std::size_t>(l)];
        if (kc.rows() > 0) {
          k = ag::concat_rows(std::vector<ag::Var<T>>{tape.constant(kc), k});
          v = ag::concat_rows(std::vector<ag::Var<T>>{tape.constant(vc), v});
        }
        kc = k.value();
        vc = v.value();
      }
      auto att = linear(tape, ps, b + ".out", ag::attention(q, k, v, cfg.heads, layout));
      x = ag::add(x, ag::mul_row(att, gate1));

      auto h2 = ag::add_row(ag::mul_row(ag::layer_norm(x), ag::one_plus(scale2)), shift2);
      auto ff = linear(tape, ps, b + ".fc2", ag::silu(linear(tape, ps, b + ".fc1", h2)));
      x = ag::add(x, ag::mul_row(ff, gate2));
    }
    return x;
  }

  template <class PS>
  static ag::Var<T> head_graph(ag::Tape<T>& tape, PS& ps, const SegmentorConfig& cfg, ag::Var<T> x, ag::Var<T> cond) {
    using namespace layers;
    const Index df = cfg.width;
    auto ada = linear(tape, ps, "seg.final_ada", ag::silu(cond));
    auto h = ag::add_row(ag::mul_row(ag::layer_norm(x), ag::one_plus(ag::slice_cols(ada, df, df))),
                         ag::slice_cols(ada, 0, df));
    return linear(tape, ps, "seg.head", h);
  }

  /// Input rows (before position embeddings) for the token part of the
  /// sequence under teacher forcing.
  template <class PS>
  static ag::Var<T> token_inputs_graph(ag::Tape<T>& tape, PS& ps, const SegmentorConfig& cfg, ag::Var<T> start,
                                       const TeacherInputs<T>& in) {
    const std::vector<int> blocks = cfg.block_sizes();
    std::vector<ag::Var<T>> parts{ag::broadcast_rows(start, blocks[0])};
    if (cfg.total_tokens() > blocks[0]) {
      if (cfg.next_token) {
        if (static_cast<int>(in.tokens.size()) != cfg.total_tokens() - 1) throw InvalidInput("teacher tokens size mismatch");
        parts.push_back(ag::gather_rows(layers::bind_param(tape, ps, "seg.tok_embed"), in.tokens));
      } else {
        if (in.features.rows() != cfg.total_tokens() - blocks[0] || in.features.cols() != cfg.latent_dim)
          throw InvalidInput("teacher features shape mismatch");
        parts.push_back(layers::linear(tape, ps, "seg.feat_proj", tape.constant(in.features)));
      }
    }
    return ag::concat_rows(parts);
  }

  static ag::AttentionLayout full_layout(const SegmentorConfig& cfg) {
    ag::AttentionLayout lay;
    lay.group_start.push_back(0);
    lay.group_limit.push_back(cfg.prefix_tokens);
    Index row = cfg.prefix_tokens;
    for (int b : cfg.block_sizes()) {
      lay.group_start.push_back(row);
      row += b;
      lay.group_limit.push_back(row);
    }
    return lay;
  }

  /// Teacher-forced logits (T x V) on a tape. `image` is the T_f x d_f
  /// adapter output.
  template <class PS>
  static ag::Var<T> logits_graph(ag::Tape<T>& tape, PS& ps, const SegmentorConfig& cfg, ag::Var<T> image, int class_id,
                                 const TeacherInputs<T>& in) {
    if (image.rows() != cfg.prefix_tokens || image.cols() != cfg.width)
      throw InvalidInput("image embedding shape does not match the segmentor");
    auto cond = cond_graph(tape, ps, cfg, class_id);
    auto start = start_graph(tape, ps, cond, image);
    auto toks = ag::add(token_inputs_graph(tape, ps, cfg, start, in), position_graph(tape, ps, cfg, 0, cfg.total_tokens()));
    toks = ag::add(toks, layers::linear(tape, ps, "seg.align_proj", aligned_image_graph(cfg, image)));
    auto prefix = ag::add(image, layers::bind_param(tape, ps, "seg.prefix_pos"));
    auto x = ag::concat_rows(std::vector<ag::Var<T>>{prefix, toks});
    x = blocks_graph(tape, ps, cfg, x, cond, full_layout(cfg));
    x = ag::slice_rows(x, cfg.prefix_tokens, cfg.total_tokens());
    return head_graph(tape, ps, cfg, x, cond);
  }

  // ------------------------------------------------------------------ inference API

  Mat<T> forward_teacher_forced(const AutoencoderModel<T>& ae, const TokenPyramid& pyr, int class_id,
                                const Mat<T>& image) const {
    ag::Tape<T> tape(false);
    return logits_graph(tape, ps_, cfg_, tape.constant(image), class_id, teacher_inputs(ae, pyr, cfg_.next_token)).value();
  }

  /// Mean cross-entropy of the true tokens, i.e. -(1/T) log p(r_1..r_K | c, f).
  T sequence_nll(const AutoencoderModel<T>& ae, const TokenPyramid& pyr, int class_id, const Mat<T>& image) const {
    ag::Tape<T> tape(false);
    auto logits = logits_graph(tape, ps_, cfg_, tape.constant(image), class_id, teacher_inputs(ae, pyr, cfg_.next_token));
    return ag::cross_entropy(logits, pyr.flat()).value()(0, 0);
  }

  DecodeCache<T> start_decoding(const AutoencoderModel<T>& ae, const Mat<T>& image, int class_id) const {
    if (class_id < 0 || class_id >= cfg_.num_classes) throw InvalidInput("class id out of range");
    if (image.rows() != cfg_.prefix_tokens || image.cols() != cfg_.width)
      throw InvalidInput("image embedding shape does not match the segmentor");
    DecodeCache<T> c;
    c.ae = &ae;
    c.class_id = class_id;
    c.image = image;
    {
      ag::Tape<T> tape(false);
      c.aligned = aligned_image_graph(cfg_, tape.constant(image)).value();
    }
    c.keys.assign(static_cast<std::size_t>(cfg_.depth), Mat<T>());
    c.values.assign(static_cast<std::size_t>(cfg_.depth), Mat<T>());
    c.cumulative = Mat<T>::Zero(Index(ae.latent_size()) * ae.latent_size(), ae.config().latent_dim);
    return c;
  }

  /// Feeds the tokens of the block just sampled (nullopt for the first
  /// step) and returns logits for the next block.
  Mat<T> incremental_decode_step(DecodeCache<T>& cache, const std::optional<TokenMap>& new_tokens) const {
    const std::vector<int> blocks = cfg_.block_sizes();
    const int b = cache.next_block;
    ag::Tape<T> tape(false);
    auto cond = cond_graph(tape, ps_, cfg_, cache.class_id);
    ag::AttentionLayout lay;
    ag::Var<T> x;
    int row0 = 0;
    for (int j = 0; j < b; ++j) row0 += blocks[static_cast<std::size_t>(j)];

    if (b == 0) {
      if (new_tokens) throw StateError("first decoding step takes no tokens");
      auto image = tape.constant(cache.image);
      auto start = start_graph(tape, ps_, cond, image);
      auto toks = ag::add(ag::broadcast_rows(start, blocks[0]), position_graph(tape, ps_, cfg_, 0, blocks[0]));
      toks = ag::add(toks, aligned_rows(tape, cache, 0, blocks[0]));
      auto prefix = ag::add(image, layers::bind_param(tape, ps_, "seg.prefix_pos"));
      x = ag::concat_rows(std::vector<ag::Var<T>>{prefix, toks});
      lay.group_start = {0, cfg_.prefix_tokens};
      lay.group_limit = {cfg_.prefix_tokens, cfg_.prefix_tokens + blocks[0]};
    } else {
      if (b >= static_cast<int>(blocks.size())) throw StateError("decoding already produced every block");
      if (!new_tokens) throw StateError("decoding step " + std::to_string(b) + " requires the previous block's tokens");
      const int prev = blocks[static_cast<std::size_t>(b - 1)];
      if (new_tokens->size() != prev) throw StateError("token block size does not match the decoding state");
      check_token_range(*new_tokens, cfg_.vocab);
      ag::Var<T> in;
      if (cfg_.next_token) {
        in = ag::gather_rows(layers::bind_param(tape, ps_, "seg.tok_embed"), new_tokens->indices);
      } else {
        const auto& s = cfg_.schedule;
        if (new_tokens->h != s.h(b - 1) || new_tokens->w != s.w(b - 1)) throw StateError("token map resolution mismatch");
        cache.cumulative = cache.cumulative + cache.ae->scale_contribution(b - 1, *new_tokens);
        const int n = cache.ae->latent_size();
        Raster<T> r = interpolate(Raster<T>(n, n, cache.cumulative), s.h(b), s.w(b));
        in = layers::linear(tape, ps_, "seg.feat_proj", tape.constant(r.values));
      }
      x = ag::add(in, position_graph(tape, ps_, cfg_, row0, blocks[static_cast<std::size_t>(b)]));
      x = ag::add(x, aligned_rows(tape, cache, row0, blocks[static_cast<std::size_t>(b)]));
      lay.group_start = {0};
      lay.group_limit = {cfg_.prefix_tokens + row0 + blocks[static_cast<std::size_t>(b)]};
      cache.fed.push_back(*new_tokens);
    }
    x = blocks_graph(tape, ps_, cfg_, x, cond, lay, &cache.keys, &cache.values);
    if (b == 0) x = ag::slice_rows(x, cfg_.prefix_tokens, blocks[0]);
    cache.next_block = b + 1;
    return head_graph(tape, ps_, cfg_, x, cond).value();
  }

  /// Full autoregressive rollout: samples every block in turn.
  TokenPyramid generate(const AutoencoderModel<T>& ae, const Mat<T>& image, int class_id, double temperature,
                        Rng& rng) const {
    DecodeCache<T> cache = start_decoding(ae, image, class_id);
    const std::vector<int> blocks = cfg_.block_sizes();
    const auto& s = cfg_.schedule;
    std::vector<TokenMap> sampled;
    std::optional<TokenMap> prev;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      Mat<T> logits = incremental_decode_step(cache, prev);
      TokenMap r = cfg_.next_token ? TokenMap(1, 1, 1, sample_rows(logits, temperature, rng))
                                   : sample_next_scale(logits, s.h(static_cast<int>(b)), s.w(static_cast<int>(b)),
                                                       static_cast<int>(b) + 1, temperature, rng);
      sampled.push_back(r);
      prev = std::move(r);
    }
    TokenPyramid pyr;
    if (cfg_.next_token) {
      std::vector<int> flat;
      for (const auto& t : sampled) flat.push_back(t.indices[0]);
      pyr.maps.emplace_back(s.h(0), s.w(0), 1, std::move(flat));
    } else {
      pyr.maps = std::move(sampled);
    }
    return pyr;
  }

 private:
  ag::Var<T> aligned_rows(ag::Tape<T>& tape, const DecodeCache<T>& cache, int row0, int n) const {
    return layers::linear(tape, ps_, "seg.align_proj", tape.constant(Mat<T>(cache.aligned.middleRows(row0, n))));
  }

  SegmentorConfig cfg_;
  ParamStore<T> ps_;
};

}  // namespace arseg
