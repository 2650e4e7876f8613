#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmfuse {

// Fraction of exact matches; examples with an absent label are excluded.
inline double accuracy(const std::vector<std::size_t>& predictions,
                       const std::vector<std::optional<std::size_t>>& labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("accuracy: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  std::size_t evaluable = 0, correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!labels[i].has_value()) continue;
    evaluable += 1;
    if (predictions[i] == *labels[i]) correct += 1;
  }
  if (evaluable == 0) throw std::invalid_argument("accuracy: zero evaluable examples");
  return static_cast<double>(correct) / static_cast<double>(evaluable);
}

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

// One point per unique score value; predicting positive means score >= threshold.
inline std::vector<PRPoint> pr_curve(const std::vector<double>& scores,
                                     const std::vector<bool>& positives) {
  if (scores.size() != positives.size() || scores.empty()) {
    throw std::invalid_argument("pr_curve: scores and positives must be non-empty, same length");
  }
  std::size_t total_pos = 0;
  for (bool b : positives) total_pos += b ? 1 : 0;
  if (total_pos == 0) throw std::runtime_error("pr_curve: no positive examples");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<PRPoint> points;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    // consume the whole tie group: a threshold includes every equal score
    while (i < order.size() && scores[order[i]] == threshold) {
      if (positives[order[i]]) {
        tp += 1;
      } else {
        fp += 1;
      }
      i += 1;
    }
    PRPoint pt;
    pt.threshold = threshold;
    pt.tp = tp;
    pt.fp = fp;
    pt.fn = total_pos - tp;
    pt.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    points.push_back(pt);
  }
  return points;
}

// One-vs-rest recall at precision: sweep thresholds over the unique scores
// and return the best recall among operating points with precision >= p, or
// 0 when no threshold qualifies.
inline double recall_at_precision(const std::vector<double>& scores,
                                  const std::vector<bool>& positives, double p) {
  if (p <= 0.0 || p > 1.0) {
    throw std::invalid_argument("recall_at_precision: p must be in (0, 1]");
  }
  double best = 0.0;
  for (const PRPoint& pt : pr_curve(scores, positives)) {
    if (pt.precision >= p) best = std::max(best, pt.recall);
  }
  return best;
}

}  // namespace cmfuse
