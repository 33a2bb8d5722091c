#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "arseg/consensus.hpp"
#include "arseg/data_synth.hpp"
#include "arseg/metrics.hpp"

namespace arseg {

struct EvalOptions {
  std::vector<int> sample_counts{1, 4, 8, 16};
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_cases = 0;  // 0 => whole split
  std::string split = "test";
};

/// Predicted samples for one (case, class) plus the consensus mask.
struct Prediction {
  std::vector<BinaryMask> samples;
  BinaryMask consensus;
};

using Predictor = std::function<Prediction(const data::Record&, int cls, int n, std::uint64_t seed)>;

/// Seed of the sample set drawn for (case, class) during evaluation.
inline std::uint64_t eval_seed(std::uint64_t seed, const std::string& case_id, int cls) {
  return splitmix64(seed ^ hash_tag(case_id)) + static_cast<std::uint64_t>(cls) * 0x10000ull;
}

template <class T>
Predictor model_predictor(const SegmentationModels<T>& m, double temperature) {
  return [&m, temperature](const data::Record& r, int cls, int n, std::uint64_t seed) {
    SampleSet<T> s = sample_masks(m, r.image.template cast<T>().eval(), cls, n, temperature, seed);
    Prediction p;
    for (const auto& soft : s.masks) p.samples.push_back(binarize(soft));
    p.consensus = aggregate(s).binary;
    return p;
  };
}

/// Copies the annotations (cyclically) as samples and their majority vote as
/// the consensus; used to check the metric wiring.
inline Predictor oracle_predictor() {
  return [](const data::Record& r, int cls, int n, std::uint64_t) {
    const auto ann = r.annotations(cls);
    Prediction p;
    for (int i = 0; i < n; ++i) p.samples.push_back(ann[static_cast<std::size_t>(i) % ann.size()]);
    p.consensus = metrics::majority(ann);
    return p;
  };
}

/// Case-averaged GED per sample count, HM-IoU and Soft-Dice at the largest
/// count, and consensus Dice against the annotators' majority vote.
inline metrics::MetricReport evaluate(const data::Dataset& ds, const Predictor& predict, const EvalOptions& opt) {
  if (opt.sample_counts.empty()) throw ConfigError("evaluate: no sample counts");
  const int n = *std::max_element(opt.sample_counts.begin(), opt.sample_counts.end());
  auto records = ds.split(opt.split);
  if (records.empty()) throw ConfigError("evaluate: split '" + opt.split + "' is empty");
  if (opt.max_cases > 0 && static_cast<int>(records.size()) > opt.max_cases) records.resize(static_cast<std::size_t>(opt.max_cases));

  metrics::MetricReport rep;
  const int classes = static_cast<int>(records.front()->masks.front().size());
  rep.dice_per_class.assign(static_cast<std::size_t>(classes), 0.0);
  for (int c : opt.sample_counts) rep.ged[c] = 0.0;
  double items = 0, hm_items = 0;
  for (const auto* r : records)
    for (int cls = 0; cls < classes; ++cls) {
      const auto ann = r->annotations(cls);
      const Prediction p = predict(*r, cls, n, eval_seed(opt.seed, r->id, cls));
      for (int c : opt.sample_counts)
        rep.ged[c] += metrics::ged(std::vector<BinaryMask>(p.samples.begin(), p.samples.begin() + c), ann);
      if (p.samples.size() % ann.size() == 0) {
        rep.hm_iou += metrics::hm_iou(p.samples, ann);
        hm_items += 1;
      }
      rep.soft_dice += metrics::soft_dice(p.samples, ann);
      rep.dice_per_class[static_cast<std::size_t>(cls)] += metrics::dice(p.consensus, metrics::majority(ann));
      items += 1;
    }
  for (auto& [c, v] : rep.ged) v /= items;
  rep.hm_iou = hm_items > 0 ? rep.hm_iou / hm_items : 0.0;
  rep.soft_dice /= items;
  const double per_class = static_cast<double>(records.size());
  rep.dice = 0;
  for (auto& d : rep.dice_per_class) {
    d /= per_class;
    rep.dice += d;
  }
  rep.dice /= static_cast<double>(classes);
  return rep;
}

/// report.json: {metric -> value | {sample_count -> value}}.
inline nlohmann::json report_json(const metrics::MetricReport& r) {
  nlohmann::json j;
  for (const auto& [c, v] : r.ged) j["ged"][std::to_string(c)] = v;
  j["hm_iou"] = r.hm_iou;
  j["soft_dice"] = r.soft_dice;
  j["dice"] = r.dice;
  if (r.dice_per_class.size() > 1)
    for (std::size_t k = 0; k < r.dice_per_class.size(); ++k) j["dice_class_" + std::to_string(k)] = r.dice_per_class[k];
  return j;
}

}  // namespace arseg
