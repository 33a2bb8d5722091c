#pragma once

#include <array>
#include <map>
#include <vector>

#include "arseg/autograd.hpp"
#include "arseg/hungarian.hpp"
#include "arseg/mask.hpp"

namespace arseg::metrics {

namespace detail {
inline void check_same(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w) throw InvalidInput("metric: mask shapes differ");
}
inline std::pair<int, int> inter_union(const BinaryMask& a, const BinaryMask& b) {
  check_same(a, b);
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] & b.data[i];
    uni += a.data[i] | b.data[i];
  }
  return {inter, uni};
}
}  // namespace detail

/// |a ∩ b| / |a ∪ b|, 1 when both are empty.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  auto [inter, uni] = detail::inter_union(a, b);
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / uni;
}

/// 2|a ∩ b| / (|a| + |b|), 1 when both are empty.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  detail::check_same(a, b);
  int inter = 0, total = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += a.data[i] & b.data[i];
    total += a.data[i] + b.data[i];
  }
  if (total == 0) return 1.0;
  return 2.0 * inter / total;
}

namespace detail {

struct Grouped {
  std::vector<const BinaryMask*> unique;
  std::vector<double> count;
};

// Collapses identical masks into (mask, multiplicity) pairs.
inline Grouped group(const std::vector<BinaryMask>& xs) {
  Grouped g;
  for (const auto& x : xs) {
    bool found = false;
    for (std::size_t i = 0; i < g.unique.size(); ++i)
      if (*g.unique[i] == x) {
        g.count[i] += 1;
        found = true;
        break;
      }
    if (!found) {
      g.unique.push_back(&x);
      g.count.push_back(1);
    }
  }
  return g;
}

// Mean of 1 - IoU over all ordered pairs (identical-index pairs included).
inline double mean_distance(const Grouped& a, double na, const Grouped& b, double nb) {
  double total = 0;
  for (std::size_t i = 0; i < a.unique.size(); ++i) {
    double row = 0;
    for (std::size_t j = 0; j < b.unique.size(); ++j) row += b.count[j] * (1.0 - iou(*a.unique[i], *b.unique[j]));
    total += a.count[i] * row;
  }
  return total / (na * nb);
}

}  // namespace detail

/// Squared generalized energy distance with d = 1 - IoU:
/// 2 E[d(S,Y)] - E[d(S,S')] - E[d(Y,Y')].
inline double ged(const std::vector<BinaryMask>& samples, const std::vector<BinaryMask>& annotations) {
  if (samples.empty() || annotations.empty()) throw InvalidInput("ged: sample and annotation lists must be nonempty");
  const auto gs = detail::group(samples);
  const auto ga = detail::group(annotations);
  const double ns = static_cast<double>(samples.size()), na = static_cast<double>(annotations.size());
  const double cross = detail::mean_distance(gs, ns, ga, na);
  const double ss = detail::mean_distance(gs, ns, gs, ns);
  const double yy = detail::mean_distance(ga, na, ga, na);
  return 2.0 * cross - ss - yy;
}

/// Mean IoU under the optimal one-to-one matching between the N samples and
/// the annotations replicated N/A times each.
inline double hm_iou(const std::vector<BinaryMask>& samples, const std::vector<BinaryMask>& annotations) {
  const std::size_t n = samples.size(), a = annotations.size();
  if (n == 0 || a == 0) throw InvalidInput("hm_iou: lists must be nonempty");
  if (n % a != 0) throw InvalidInput("hm_iou: annotation count must divide sample count");
  Mat<double> w(static_cast<Index>(n), static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w(Index(i), Index(j)) = iou(samples[i], annotations[j % a]);
  const auto assign = hungarian_max(w);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += w(Index(i), assign[i]);
  return total / static_cast<double>(n);
}

inline constexpr std::array<double, 5> kSoftDiceThresholds{0.1, 0.3, 0.5, 0.7, 0.9};

/// Pixel-wise mean of binary masks.
inline Mat<double> mean_mask(const std::vector<BinaryMask>& xs) {
  Mat<double> m = Mat<double>::Zero(xs.front().size(), 1);
  for (const auto& x : xs) {
    if (x.size() != m.rows()) throw InvalidInput("mean_mask: masks differ in size");
    for (int i = 0; i < x.size(); ++i) m(i, 0) += x.data[static_cast<std::size_t>(i)];
  }
  return m / static_cast<double>(xs.size());
}

/// Dice between the soft prediction (mean of samples) and soft label (mean
/// of annotations), both binarized at each threshold in {0.1,...,0.9}
/// (value >= threshold is foreground), averaged over thresholds.
inline double soft_dice(const std::vector<BinaryMask>& samples, const std::vector<BinaryMask>& annotations) {
  if (samples.empty() || annotations.empty()) throw InvalidInput("soft_dice: lists must be nonempty");
  detail::check_same(samples.front(), annotations.front());
  const Mat<double> ps = mean_mask(samples), pa = mean_mask(annotations);
  const int h = samples.front().h, w = samples.front().w;
  double total = 0;
  for (double tau : kSoftDiceThresholds) {
    BinaryMask bs(h, w), ba(h, w);
    for (int i = 0; i < h * w; ++i) {
      bs.data[static_cast<std::size_t>(i)] = ps(i, 0) >= tau;
      ba.data[static_cast<std::size_t>(i)] = pa(i, 0) >= tau;
    }
    total += dice(bs, ba);
  }
  return total / static_cast<double>(kSoftDiceThresholds.size());
}

/// Majority vote (ties to foreground), i.e. mean >= 0.5.
inline BinaryMask majority(const std::vector<BinaryMask>& xs) {
  if (xs.empty()) throw InvalidInput("majority: empty list");
  const Mat<double> m = mean_mask(xs);
  BinaryMask out(xs.front().h, xs.front().w);
  for (int i = 0; i < out.size(); ++i) out.data[static_cast<std::size_t>(i)] = m(i, 0) >= 0.5;
  return out;
}

template <class T>
T dice_loss(const Mat<T>& pred, const Mat<T>& target) {
  ag::Tape<T> tape(false);
  return ag::dice_loss(tape.constant(pred), target).value()(0, 0);
}

template <class T>
T bce_loss(const Mat<T>& pred, const Mat<T>& target) {
  ag::Tape<T> tape(false);
  return ag::bce_loss(tape.constant(pred), target).value()(0, 0);
}

/// Evaluation summary. `ged` is keyed by sample count.
struct MetricReport {
  std::map<int, double> ged;
  double hm_iou = 0;
  double soft_dice = 0;
  std::vector<double> dice_per_class;
  double dice = 0;
};

}  // namespace arseg::metrics
