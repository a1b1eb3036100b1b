#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "cma/errors.hpp"
#include "cma/interval.hpp"

namespace cma {

/// Evaluation summary: recall at each IoU threshold (n=1) plus mean IoU,
/// both as percentages.
struct EvalReport {
  std::map<double, double> r1_at;
  double miou = 0.0;
  std::size_t count = 0;
};

/// Whether an IoU equal to the threshold counts as a hit. Standard practice
/// is >= (the default); strict > is kept available for comparison.
enum class TieRule { GreaterEqual, Strict };

/// Temporal IoU of two sanitized intervals. Zero-length against anything is
/// 0 unless both are the identical point, which counts as a perfect match.
inline double temporal_iou(TimeInterval a, TimeInterval b) {
  const double inter =
      std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a.length() + b.length() - inter;
  if (uni <= 0.0) return (a.start == b.start && a.end == b.end) ? 1.0 : 0.0;
  return inter / uni;
}

inline std::vector<double> per_sample_ious(
    const std::vector<TimeInterval>& preds,
    const std::vector<TimeInterval>& gts) {
  if (preds.empty()) throw DataError("evaluate: empty prediction list");
  if (preds.size() != gts.size())
    throw DataError("evaluate: prediction/ground-truth count mismatch");
  std::vector<double> ious;
  ious.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i)
    ious.push_back(temporal_iou(sanitize_for_metrics(preds[i]), gts[i]));
  return ious;
}

inline EvalReport evaluate_ious(const std::vector<double>& ious,
                                const std::set<double>& thresholds,
                                TieRule tie = TieRule::GreaterEqual) {
  if (ious.empty()) throw DataError("evaluate: empty IoU list");
  EvalReport rep;
  rep.count = ious.size();
  double sum = 0.0;
  for (double v : ious) sum += v;
  rep.miou = 100.0 * sum / static_cast<double>(ious.size());
  for (double m : thresholds) {
    std::size_t hits = 0;
    for (double v : ious)
      if (tie == TieRule::GreaterEqual ? v >= m : v > m) ++hits;
    rep.r1_at[m] = 100.0 * static_cast<double>(hits) /
                   static_cast<double>(ious.size());
  }
  return rep;
}

/// "R@1, IoU@m" and mIoU over paired prediction/ground-truth lists.
/// Predictions are sanitized (clamped and reordered); ground truth is
/// assumed normalized and well-formed.
inline EvalReport evaluate(const std::vector<TimeInterval>& preds,
                           const std::vector<TimeInterval>& gts,
                           const std::set<double>& thresholds = {0.3, 0.5,
                                                                 0.7},
                           TieRule tie = TieRule::GreaterEqual) {
  return evaluate_ious(per_sample_ious(preds, gts), thresholds, tie);
}

inline std::string format_report(const EvalReport& rep) {
  std::string out;
  char buf[64];
  for (const auto& [m, v] : rep.r1_at) {
    std::snprintf(buf, sizeof(buf), "r1@%.1f: %.2f\n", m, v);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "miou: %.2f\n", rep.miou);
  out += buf;
  std::snprintf(buf, sizeof(buf), "count: %zu\n", rep.count);
  out += buf;
  return out;
}

}  // namespace cma
