#include "ccbert/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace ccbert {

namespace {

void check_sizes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    fail("ShapeMismatch", "metrics: " + std::to_string(scores.size()) + " scores vs " +
                              std::to_string(labels.size()) + " labels");
  }
}

}  // namespace

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  const size_t n = scores.size();
  int64_t pos = 0;
  for (int lb : labels) pos += (lb != 0);
  const int64_t neg = static_cast<int64_t>(n) - pos;
  if (pos == 0 || neg == 0) {
    fail("SingleClass", "auc_roc requires both classes, got " + std::to_string(pos) +
                            " positives of " + std::to_string(n));
  }

  // Rank-sum with average ranks over ties; equivalent to counting each tied
  // positive/negative pair as 0.5.
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) *
                                      static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auc_pr(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  const size_t n = scores.size();
  int64_t pos = 0;
  for (int lb : labels) pos += (lb != 0);
  if (pos == 0) fail("NoPositives", "auc_pr requires at least one positive");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  int64_t seen_pos = 0;
  for (size_t rank = 0; rank < n; ++rank) {
    if (labels[order[rank]] != 0) {
      ++seen_pos;
      ap += static_cast<double>(seen_pos) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(pos);
}

ThresholdMetrics threshold_metrics(std::span<const double> scores,
                                   std::span<const int> labels, double threshold) {
  check_sizes(scores, labels);
  ThresholdMetrics m;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth) ++m.tp;
    else if (pred && !truth) ++m.fp;
    else if (!pred && truth) ++m.fn;
    else ++m.tn;
  }
  const int64_t total = m.tp + m.fp + m.tn + m.fn;
  m.accuracy = total == 0 ? 0.0
                          : static_cast<double>(m.tp + m.tn) / static_cast<double>(total);
  const int64_t f1_denom = 2 * m.tp + m.fp + m.fn;
  m.f1 = f1_denom == 0 ? 0.0
                       : 2.0 * static_cast<double>(m.tp) / static_cast<double>(f1_denom);
  return m;
}

EvalResult evaluate_all(std::span<const double> scores, std::span<const int> labels,
                        double threshold) {
  EvalResult r;
  r.auc_roc = auc_roc(scores, labels);
  r.auc_pr = auc_pr(scores, labels);
  const ThresholdMetrics t = threshold_metrics(scores, labels, threshold);
  r.accuracy = t.accuracy;
  r.f1 = t.f1;
  r.tp = t.tp;
  r.fp = t.fp;
  r.tn = t.tn;
  r.fn = t.fn;
  return r;
}

}  // namespace ccbert
