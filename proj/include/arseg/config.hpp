#pragma once

// RunConfig: the single JSON file that drives every CLI command. Unknown
// keys are rejected with their dotted path.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arseg/ablation.hpp"
#include "arseg/arsg_io.hpp"
#include "arseg/data_synth.hpp"
#include "arseg/json_util.hpp"

namespace arseg {

struct TrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double beta = 0.25;
  double lambda_dice = 1.0;
  double lambda_bce = 1.0;
  std::string schedule = "cosine";  // "cosine" or "constant"
  std::uint64_t seed = 0;
  int checkpoint_every = 1;  // epochs between validation/best-checkpoint checks
  double clip_norm = 1.0;
  int max_steps = 0;  // 0 => epochs * batches

  void validate(const std::string& stage) const {
    if (epochs < 1) throw ConfigError(stage + ".epochs must be >= 1");
    if (batch_size < 1) throw ConfigError(stage + ".batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError(stage + ".lr must be > 0");
    if (weight_decay < 0 || beta < 0) throw ConfigError(stage + ": weight_decay and beta must be >= 0");
    if (lambda_dice < 0 || lambda_bce < 0) throw ConfigError(stage + ": lambda weights must be >= 0");
    if (schedule != "cosine" && schedule != "constant") throw ConfigError(stage + ".schedule must be cosine or constant");
    if (checkpoint_every < 1) throw ConfigError(stage + ".checkpoint_every must be >= 1");
    if (max_steps < 0) throw ConfigError(stage + ".max_steps must be >= 0");
  }
};

struct SamplingConfig {
  int n = 16;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct MetricProtocol {
  std::vector<int> sample_counts{1, 4, 8, 16};
  int max_cases = 0;  // 0 => whole split
};

struct RunConfig {
  data::DatasetSpec dataset;
  AutoencoderConfig ae;
  ImageEncoderConfig image;
  SegmentorConfig seg;
  TrainConfig stage1;
  TrainConfig stage2;
  SamplingConfig sampling;
  MetricProtocol metrics;
  AblationFlagSet ablation;

  RunConfig() {
    stage2.epochs = 80;
    stage2.batch_size = 16;
    stage2.weight_decay = 0.05;
  }

  /// Model dimensions after ablation flags and dataset-derived fields.
  ModelConfig models() const {
    ModelConfig m{ae, image, seg};
    m.ae.image_size = dataset.image_size;
    m.image.image_size = dataset.image_size;
    m.image.in_channels = dataset.image_channels;
    m.seg.num_classes = dataset.classes;
    return build_variant(ablation, m);
  }

  void validate() const {
    dataset.validate();
    stage1.validate("train.stage1");
    stage2.validate("train.stage2");
    if (sampling.n < 1) throw ConfigError("sampling.n must be >= 1");
    if (!(sampling.temperature > 0)) throw ConfigError("sampling.temperature must be > 0");
    if (metrics.sample_counts.empty()) throw ConfigError("metrics.sample_counts must not be empty");
    for (int s : metrics.sample_counts)
      if (s < 1) throw ConfigError("metrics.sample_counts entries must be >= 1");
    if (metrics.max_cases < 0) throw ConfigError("metrics.max_cases must be >= 0");
    (void)models();
  }
};

namespace detail {

inline void read_train(StrictObject o, TrainConfig& t) {
  o.get("epochs", t.epochs).get("batch_size", t.batch_size).get("lr", t.lr).get("weight_decay", t.weight_decay);
  o.get("beta", t.beta).get("lambda_dice", t.lambda_dice).get("lambda_bce", t.lambda_bce);
  o.get("schedule", t.schedule).get("seed", t.seed).get("checkpoint_every", t.checkpoint_every);
  o.get("clip_norm", t.clip_norm).get("max_steps", t.max_steps);
  o.finish();
}

inline nlohmann::json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"weight_decay", t.weight_decay},
          {"beta", t.beta},
          {"lambda_dice", t.lambda_dice},
          {"lambda_bce", t.lambda_bce},
          {"schedule", t.schedule},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"clip_norm", t.clip_norm},
          {"max_steps", t.max_steps}};
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  StrictObject root(j, "");
  if (root.has("dataset")) c.dataset = data::spec_from_json(root.raw("dataset"), "dataset");
  {
    StrictObject model = root.child("model");
    {
      StrictObject a = model.child("autoencoder");
      a.get("channels", c.ae.channels).get("latent_dim", c.ae.latent_dim).get("codebook_size", c.ae.codebook_size);
      a.get("gn_groups", c.ae.gn_groups);
      std::vector<std::vector<int>> scales;
      a.get("scales", scales);
      if (!scales.empty()) {
        c.ae.schedule.resolutions.clear();
        for (const auto& s : scales) {
          if (s.size() != 2) throw ConfigError("key 'model.autoencoder.scales' entries must be [h, w] pairs");
          c.ae.schedule.resolutions.emplace_back(s[0], s[1]);
        }
      } else {
        c.ae.schedule = ScaleSchedule::default_for(c.dataset.image_size / 4);
      }
      a.finish();
    }
    {
      StrictObject i = model.child("image_encoder");
      i.get("channels", c.image.channels).get("embed_dim", c.image.embed_dim).get("mlp_hidden", c.image.mlp_hidden);
      i.get("svd_rank", c.image.svd_rank).get("gn_groups", c.image.gn_groups);
      i.get("trainable_backbone", c.image.trainable_backbone);
      i.finish();
    }
    {
      StrictObject s = model.child("segmentor");
      s.get("width", c.seg.width).get("depth", c.seg.depth).get("heads", c.seg.heads);
      s.get("cond_dim", c.seg.cond_dim).get("mlp_ratio", c.seg.mlp_ratio);
      s.finish();
    }
    model.finish();
  }
  {
    StrictObject t = root.child("train");
    detail::read_train(t.child("stage1"), c.stage1);
    detail::read_train(t.child("stage2"), c.stage2);
    t.finish();
  }
  {
    StrictObject s = root.child("sampling");
    s.get("n", c.sampling.n).get("temperature", c.sampling.temperature).get("seed", c.sampling.seed);
    s.finish();
  }
  {
    StrictObject m = root.child("metrics");
    m.get("sample_counts", c.metrics.sample_counts).get("max_cases", c.metrics.max_cases);
    m.finish();
  }
  {
    StrictObject a = root.child("ablation");
    a.get("single_scale", c.ablation.single_scale).get("next_token", c.ablation.next_token);
    a.get("svd_adapter", c.ablation.svd_adapter);
    a.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json scales = nlohmann::json::array();
  for (const auto& r : c.ae.schedule.resolutions) scales.push_back({r.first, r.second});
  nlohmann::json j;
  j["dataset"] = c.dataset;
  j["model"]["autoencoder"] = {{"channels", c.ae.channels},
                               {"latent_dim", c.ae.latent_dim},
                               {"codebook_size", c.ae.codebook_size},
                               {"gn_groups", c.ae.gn_groups},
                               {"scales", scales}};
  j["model"]["image_encoder"] = {{"channels", c.image.channels},         {"embed_dim", c.image.embed_dim},
                                 {"mlp_hidden", c.image.mlp_hidden},     {"svd_rank", c.image.svd_rank},
                                 {"gn_groups", c.image.gn_groups},       {"trainable_backbone", c.image.trainable_backbone}};
  j["model"]["segmentor"] = {{"width", c.seg.width},       {"depth", c.seg.depth},         {"heads", c.seg.heads},
                             {"cond_dim", c.seg.cond_dim}, {"mlp_ratio", c.seg.mlp_ratio}};
  j["train"]["stage1"] = detail::train_json(c.stage1);
  j["train"]["stage2"] = detail::train_json(c.stage2);
  j["sampling"] = {{"n", c.sampling.n}, {"temperature", c.sampling.temperature}, {"seed", c.sampling.seed}};
  j["metrics"] = {{"sample_counts", c.metrics.sample_counts}, {"max_cases", c.metrics.max_cases}};
  j["ablation"] = {{"single_scale", c.ablation.single_scale},
                   {"next_token", c.ablation.next_token},
                   {"svd_adapter", c.ablation.svd_adapter}};
  return j;
}

inline RunConfig load_config(const std::filesystem::path& p) {
  nlohmann::json j;
  std::string text;
  try {
    text = io::read_file(p);
  } catch (const FormatError&) {
    throw IoError(p.string() + ": cannot read config");
  }
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(p.string() + ": invalid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace arseg
