#pragma once

// Two-stage training: stage 1 fits the multi-scale mask autoencoder,
// stage 2 fits the image encoder and segmentor against token pyramids of
// the frozen autoencoder.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "arseg/checkpoint.hpp"
#include "arseg/config.hpp"
#include "arseg/data_synth.hpp"
#include "arseg/metrics.hpp"
#include "arseg/models.hpp"
#include "arseg/optim.hpp"

namespace arseg {

struct CurvePoint {
  long step;
  std::string split;
  std::string metric;
  double value;
};

class LossCurve {
 public:
  void add(long step, const std::string& split, const std::string& metric, double value) {
    points_.push_back({step, split, metric, value});
  }
  const std::vector<CurvePoint>& points() const { return points_; }

  std::vector<double> series(const std::string& split, const std::string& metric) const {
    std::vector<double> out;
    for (const auto& p : points_)
      if (p.split == split && p.metric == metric) out.push_back(p.value);
    return out;
  }

  std::string csv() const {
    std::string out = "step,split,metric,value\n";
    char buf[64];
    for (const auto& p : points_) {
      std::snprintf(buf, sizeof buf, "%.9g", p.value);
      out += std::to_string(p.step) + "," + p.split + "," + p.metric + "," + buf + "\n";
    }
    return out;
  }

  void write(const std::filesystem::path& p) const { io::write_file(p, csv()); }

 private:
  std::vector<CurvePoint> points_;
};

using ProgressFn = std::function<void(const std::string&)>;

inline double scheduled_lr(const TrainConfig& tc, long step, long total) {
  return tc.schedule == "cosine" ? cosine_lr(tc.lr, step, total) : tc.lr;
}

// ---------------------------------------------------------------- stage 1

/// Fixed linearization point for the stage-1 loss: with an anchor the
/// tokens and every stop-gradient value are taken from it instead of the
/// current parameters, so the loss is a smooth function of the parameters
/// whose gradient at the anchor equals the straight-through gradient.
template <class T>
struct Stage1Anchor {
  TokenPyramid pyramid;
  Mat<T> m;
  Mat<T> mhat;
};

struct Stage1Terms {
  double quant = 0;
  double dice = 0;
  double bce = 0;
  double total = 0;
};

template <class T>
Stage1Anchor<T> stage1_anchor(const AutoencoderModel<T>& ae, const BinaryMask& mask) {
  Stage1Anchor<T> a;
  const Raster<T> m = ae.encode(mask);
  a.pyramid = ae.quantize_pyramid(m);
  a.m = m.values;
  a.mhat = ae.dequantize_pyramid(a.pyramid).values;
  return a;
}

/// L = ||m - sg(mhat)|| + beta ||sg(m) - mhat|| + l_dice Dice + l_bce BCE,
/// with the decoder fed m + sg(mhat - m).
template <class T>
ag::Var<T> stage1_loss_graph(ag::Tape<T>& tape, AutoencoderModel<T>& ae, const BinaryMask& mask, const TrainConfig& tc,
                             const Stage1Anchor<T>* anchor = nullptr, Stage1Terms* terms = nullptr) {
  using AE = AutoencoderModel<T>;
  const auto& cfg = ae.config();
  const Mat<T> target = mask.to_column<T>();
  auto m = AE::encoder_graph(tape, ae.params(), cfg, tape.constant(target));
  if (!m.value().allFinite()) throw DivergenceError("stage-1 encoder output is non-finite");
  TokenPyramid pyr =
      anchor ? anchor->pyramid
             : std::as_const(ae).quantize_pyramid(Raster<T>(ae.latent_size(), ae.latent_size(), m.value()));
  auto mhat = AE::dequantize_graph(tape, ae.params(), cfg, pyr, pyr.scales());

  ag::Var<T> quant, dec_in;
  const T beta = static_cast<T>(tc.beta);
  if (anchor) {
    auto enc = ag::l2_norm(ag::sub(m, tape.constant(anchor->mhat)));
    auto cb = ag::l2_norm(ag::sub(tape.constant(anchor->m), mhat));
    quant = ag::add(enc, ag::scale(cb, beta));
    dec_in = ag::add(m, tape.constant(Mat<T>(anchor->mhat - anchor->m)));
  } else {
    quant = ag::quantization_loss(m, mhat, beta);
    dec_in = ag::straight_through(m, mhat);
  }
  auto y = AE::decoder_graph(tape, ae.params(), cfg, dec_in);
  auto dl = ag::dice_loss(y, target);
  auto bl = ag::bce_loss(y, target);
  auto total = ag::add(quant, ag::add(ag::scale(dl, static_cast<T>(tc.lambda_dice)), ag::scale(bl, static_cast<T>(tc.lambda_bce))));
  if (terms) {
    terms->quant = static_cast<double>(quant.value()(0, 0));
    terms->dice = static_cast<double>(dl.value()(0, 0));
    terms->bce = static_cast<double>(bl.value()(0, 0));
    terms->total = static_cast<double>(total.value()(0, 0));
  }
  return total;
}

/// Forward value of the stage-1 loss for one mask.
template <class T>
Stage1Terms stage1_loss(AutoencoderModel<T>& ae, const BinaryMask& mask, const TrainConfig& tc) {
  ag::Tape<T> tape(false);
  Stage1Terms t;
  stage1_loss_graph<T>(tape, ae, mask, tc, nullptr, &t);
  return t;
}

/// Accumulates mean-over-batch gradients into the autoencoder's params and
/// returns the mean loss.
template <class T>
double stage1_batch_gradient(AutoencoderModel<T>& ae, const std::vector<const BinaryMask*>& batch, const TrainConfig& tc) {
  ae.params().zero_grad();
  double total = 0;
  const T inv = T(1) / static_cast<T>(batch.size());
  for (const BinaryMask* mk : batch) {
    ag::Tape<T> tape(true);
    Stage1Terms terms;
    auto loss = stage1_loss_graph<T>(tape, ae, *mk, tc, nullptr, &terms);
    if (!std::isfinite(terms.total))
      throw DivergenceError("stage-1 loss is non-finite (quant " + std::to_string(terms.quant) + ", dice " +
                            std::to_string(terms.dice) + ", bce " + std::to_string(terms.bce) + ")");
    tape.backward(ag::scale(loss, inv));
    total += terms.total;
  }
  return total / static_cast<double>(batch.size());
}

/// Mean Dice between masks and their binarized reconstructions.
template <class T>
double reconstruction_dice(const AutoencoderModel<T>& ae, const std::vector<const BinaryMask*>& masks) {
  if (masks.empty()) return 0.0;
  double s = 0;
  for (const BinaryMask* m : masks) s += metrics::dice(binarize(ae.reconstruct(*m)), *m);
  return s / static_cast<double>(masks.size());
}

/// Every annotator's mask of every class for the given split.
inline std::vector<const BinaryMask*> split_masks(const data::Dataset& ds, const std::string& split, int max_cases = 0) {
  std::vector<const BinaryMask*> out;
  int cases = 0;
  for (const auto* r : ds.split(split)) {
    if (max_cases > 0 && cases++ >= max_cases) break;
    for (const auto& per : r->masks)
      for (const auto& m : per) out.push_back(&m);
  }
  return out;
}

struct TrainItem {
  const data::Record* record;
  int cls;
};

inline std::vector<TrainItem> train_items(const data::Dataset& ds, const std::string& split) {
  std::vector<TrainItem> out;
  for (const auto* r : ds.split(split))
    for (int k = 0; k < static_cast<int>(r->masks.front().size()); ++k) out.push_back({r, k});
  return out;
}

/// Seeded annotator choice for item i in a given epoch.
inline int pick_annotator(std::uint64_t seed, int epoch, std::size_t item, int annotators) {
  Rng rng = derive_rng(seed, "annotator", static_cast<std::uint64_t>(epoch) * 1000003ull + item);
  return static_cast<int>(rng() % static_cast<std::uint64_t>(annotators));
}

struct TrainResult {
  Checkpoint checkpoint;  // best-on-validation state
  LossCurve curve;
  double best_metric = 0;
  int best_epoch = -1;
  long steps = 0;
};

namespace detail {

inline long total_steps(const TrainConfig& tc, std::size_t items) {
  const long per_epoch = static_cast<long>((items + static_cast<std::size_t>(tc.batch_size) - 1) / static_cast<std::size_t>(tc.batch_size));
  const long all = per_epoch * tc.epochs;
  return tc.max_steps > 0 ? std::min<long>(all, tc.max_steps) : all;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace detail

/// Stage 1. On return the autoencoder holds the best-on-validation
/// parameters (reconstruction Dice).
template <class T>
TrainResult train_stage1(const TrainConfig& tc, const data::Dataset& ds, AutoencoderModel<T>& ae,
                         const nlohmann::json& config_echo = nlohmann::json::object(), const ProgressFn& progress = {}) {
  tc.validate("train.stage1");
  if (ds.spec.image_size != ae.config().image_size)
    throw ConfigError("dataset image size " + std::to_string(ds.spec.image_size) + " does not match the autoencoder");
  const auto items = train_items(ds, "train");
  if (items.empty()) throw ConfigError("training split is empty");
  const auto val = split_masks(ds, "val");

  AdamW<T> opt(AdamWConfig{0.9, 0.95, 1e-8, tc.weight_decay, tc.clip_norm});
  opt.attach(ae.params());
  const long total = detail::total_steps(tc, items.size());

  TrainResult res;
  res.best_metric = -1;
  long step = 0;
  for (int epoch = 0; epoch < tc.epochs && step < total; ++epoch) {
    const auto order = data::shuffled_indices(static_cast<int>(items.size()), tc.seed, epoch);
    double epoch_loss = 0;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < order.size() && step < total; b0 += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<const BinaryMask*> batch;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + static_cast<std::size_t>(tc.batch_size)); ++i) {
        const auto& it = items[static_cast<std::size_t>(order[i])];
        const int a = pick_annotator(tc.seed, epoch, static_cast<std::size_t>(order[i]), static_cast<int>(it.record->masks.size()));
        batch.push_back(&it.record->masks[static_cast<std::size_t>(a)][static_cast<std::size_t>(it.cls)]);
      }
      const double loss = stage1_batch_gradient(ae, batch, tc);
      opt.step(scheduled_lr(tc, step, total));
      ++step;
      res.curve.add(step, "train", "loss", loss);
      epoch_loss += loss;
      ++batches;
    }
    res.curve.add(step, "train", "epoch_loss", epoch_loss / std::max(1, batches));
    const bool last = epoch + 1 == tc.epochs || step >= total;
    if ((epoch + 1) % tc.checkpoint_every == 0 || last) {
      double vloss = 0;
      for (const BinaryMask* m : val) vloss += stage1_loss(ae, *m, tc).total;
      if (!val.empty()) res.curve.add(step, "val", "loss", vloss / static_cast<double>(val.size()));
      const double vd = val.empty() ? reconstruction_dice(ae, split_masks(ds, "train", 50)) : reconstruction_dice(ae, val);
      res.curve.add(step, "val", "dice", vd);
      if (progress)
        progress("stage1 epoch " + std::to_string(epoch + 1) + " loss " + detail::fmt(epoch_loss / std::max(1, batches)) +
                 " val_dice " + detail::fmt(vd));
      if (vd > res.best_metric) {
        res.best_metric = vd;
        res.best_epoch = epoch;
        res.checkpoint = Checkpoint{};
        res.checkpoint.stage = "stage1";
        res.checkpoint.config = config_echo;
        res.checkpoint.info = {{"epoch", epoch + 1}, {"step", step}, {"val_dice", vd}};
        res.checkpoint.rng_state = rng_state(derive_rng(tc.seed, "resume", static_cast<std::uint64_t>(epoch)));
        capture_params(res.checkpoint, ae.params());
        capture_optimizer(res.checkpoint, opt);
      }
    }
  }
  res.steps = step;
  restore_params(res.checkpoint, ae.params());
  return res;
}

// ---------------------------------------------------------------- stage 2

/// Cross-entropy of the target pyramid under teacher forcing, with
/// gradients flowing into the image encoder and segmentor only.
template <class T>
ag::Var<T> stage2_loss_graph(ag::Tape<T>& tape, SegmentationModels<T>& m, const Mat<T>& image_rows, int class_id,
                             const TokenPyramid& target, const TeacherInputs<T>& teacher) {
  auto f = ImageEncoderModel<T>::embed_graph(tape, m.image.params(), m.image.config(), tape.constant(image_rows));
  auto logits = SegmentorModel<T>::logits_graph(tape, m.seg.params(), m.seg.config(), f, class_id, teacher);
  return ag::cross_entropy(logits, target.flat());
}

/// Target pyramids (residual quantization on the frozen autoencoder) for every
/// annotation of every item.
template <class T>
std::vector<std::vector<TokenPyramid>> target_pyramids(const AutoencoderModel<T>& ae, const std::vector<TrainItem>& items) {
  std::vector<std::vector<TokenPyramid>> out;
  for (const auto& it : items) {
    std::vector<TokenPyramid> per;
    for (const auto& a : it.record->masks) per.push_back(ae.quantize_pyramid(ae.encode(a[static_cast<std::size_t>(it.cls)])));
    out.push_back(std::move(per));
  }
  return out;
}

template <class T>
Mat<T> record_image(const data::Record& r) {
  return r.image.template cast<T>();
}

/// Mean stage-2 NLL over validation items, one annotator per item
/// (item index modulo A).
template <class T>
double stage2_validation_nll(const SegmentationModels<T>& m, const std::vector<TrainItem>& items,
                             const std::vector<std::vector<TokenPyramid>>& targets) {
  if (items.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& per = targets[i];
    const auto& pyr = per[i % per.size()];
    s += static_cast<double>(m.seg.sequence_nll(m.ae, pyr, items[i].cls, m.embed(record_image<T>(*items[i].record))));
  }
  return s / static_cast<double>(items.size());
}

template <class T>
Checkpoint stage2_checkpoint(const SegmentationModels<T>& m, const nlohmann::json& config_echo) {
  Checkpoint c;
  c.stage = "stage2";
  c.config = config_echo;
  capture_params(c, m.ae.params());
  capture_params(c, m.image.params());
  capture_params(c, m.seg.params());
  return c;
}

/// Stage 2. The autoencoder is frozen; on return the image encoder and
/// segmentor hold the best-on-validation (lowest NLL) parameters.
template <class T>
TrainResult train_stage2(const TrainConfig& tc, const data::Dataset& ds, SegmentationModels<T>& m,
                         const nlohmann::json& config_echo = nlohmann::json::object(), const ProgressFn& progress = {}) {
  tc.validate("train.stage2");
  if (ds.spec.image_size != m.image.config().image_size || ds.spec.image_channels != m.image.config().in_channels)
    throw ConfigError("dataset images do not match the image encoder configuration");
  if (ds.spec.classes > m.seg.config().num_classes) throw ConfigError("dataset has more classes than the segmentor");
  m.ae.params().set_trainable(false);
  const auto items = train_items(ds, "train");
  if (items.empty()) throw ConfigError("training split is empty");
  const auto vitems = train_items(ds, "val");
  const auto targets = target_pyramids(m.ae, items);
  const auto vtargets = target_pyramids(m.ae, vitems);
  const bool nt = m.seg.config().next_token;
  std::vector<std::vector<TeacherInputs<T>>> teachers;
  for (const auto& per : targets) {
    std::vector<TeacherInputs<T>> t;
    for (const auto& p : per) t.push_back(teacher_inputs(m.ae, p, nt));
    teachers.push_back(std::move(t));
  }

  AdamW<T> opt(AdamWConfig{0.9, 0.95, 1e-8, tc.weight_decay, tc.clip_norm});
  opt.attach(m.image.params());
  opt.attach(m.seg.params());
  const long total = detail::total_steps(tc, items.size());

  TrainResult res;
  res.best_metric = std::numeric_limits<double>::infinity();
  long step = 0;
  for (int epoch = 0; epoch < tc.epochs && step < total; ++epoch) {
    const auto order = data::shuffled_indices(static_cast<int>(items.size()), tc.seed, epoch);
    double epoch_loss = 0;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < order.size() && step < total; b0 += static_cast<std::size_t>(tc.batch_size)) {
      m.image.params().zero_grad();
      m.seg.params().zero_grad();
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(tc.batch_size));
      const T inv = T(1) / static_cast<T>(b1 - b0);
      double loss = 0;
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t idx = static_cast<std::size_t>(order[i]);
        const auto& it = items[idx];
        const int a = pick_annotator(tc.seed, epoch, idx, static_cast<int>(it.record->masks.size()));
        ag::Tape<T> tape(true);
        auto l = stage2_loss_graph(tape, m, record_image<T>(*it.record), it.cls, targets[idx][static_cast<std::size_t>(a)],
                                   teachers[idx][static_cast<std::size_t>(a)]);
        const double lv = static_cast<double>(l.value()(0, 0));
        if (!std::isfinite(lv))
          throw DivergenceError("stage-2 loss is non-finite at step " + std::to_string(step) + " (case " + it.record->id + ")");
        tape.backward(ag::scale(l, inv));
        loss += lv;
      }
      loss /= static_cast<double>(b1 - b0);
      opt.step(scheduled_lr(tc, step, total));
      ++step;
      res.curve.add(step, "train", "loss", loss);
      epoch_loss += loss;
      ++batches;
    }
    res.curve.add(step, "train", "epoch_loss", epoch_loss / std::max(1, batches));
    const bool last = epoch + 1 == tc.epochs || step >= total;
    if ((epoch + 1) % tc.checkpoint_every == 0 || last) {
      const double vnll = vitems.empty() ? epoch_loss / std::max(1, batches) : stage2_validation_nll(m, vitems, vtargets);
      res.curve.add(step, "val", "nll", vnll);
      if (progress)
        progress("stage2 epoch " + std::to_string(epoch + 1) + " loss " + detail::fmt(epoch_loss / std::max(1, batches)) +
                 " val_nll " + detail::fmt(vnll));
      if (vnll < res.best_metric) {
        res.best_metric = vnll;
        res.best_epoch = epoch;
        res.checkpoint = stage2_checkpoint(m, config_echo);
        res.checkpoint.info = {{"epoch", epoch + 1}, {"step", step}, {"val_nll", vnll}};
        res.checkpoint.rng_state = rng_state(derive_rng(tc.seed, "resume", static_cast<std::uint64_t>(epoch)));
        capture_optimizer(res.checkpoint, opt);
      }
    }
  }
  res.steps = step;
  restore_params(res.checkpoint, m.image.params());
  restore_params(res.checkpoint, m.seg.params());
  return res;
}

// ---------------------------------------------------------------- restore

/// Autoencoder from a stage-1 (or stage-2) checkpoint.
template <class T>
AutoencoderModel<T> autoencoder_from(const Checkpoint& c, const AutoencoderConfig& cfg) {
  if (!c.has_prefix("ae.")) throw StateError("checkpoint holds no autoencoder state");
  Rng rng(0);
  AutoencoderModel<T> ae(cfg, rng);
  restore_params(c, ae.params());
  return ae;
}

/// Full model set from a stage-2 checkpoint.
template <class T>
SegmentationModels<T> models_from(const Checkpoint& c, const ModelConfig& cfg) {
  require_stage(c, "stage2");
  SegmentationModels<T> m = make_models<T>(cfg, 0);
  restore_params(c, m.ae.params());
  restore_params(c, m.image.params());
  restore_params(c, m.seg.params());
  return m;
}

}  // namespace arseg
