#pragma once

#include <cstdint>
#include <span>

#include "ccbert/error.hpp"

namespace ccbert {

struct ThresholdMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct EvalResult {
  double auc_roc = 0.0;
  double auc_pr = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;  // at threshold 0.5
};

// Mann-Whitney statistic: (concordant pairs + 0.5 * tied pairs) / (P * N).
// Throws Error("SingleClass") unless both classes are present.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

// Average precision: mean over positives, in descending score order, of the
// precision at that rank. Ties are broken by stable input order. Throws
// Error("NoPositives") without at least one positive.
double auc_pr(std::span<const double> scores, std::span<const int> labels);

// prediction = score >= threshold; F1 defined as 0 when its denominator is 0.
ThresholdMetrics threshold_metrics(std::span<const double> scores,
                                   std::span<const int> labels,
                                   double threshold = 0.5);

EvalResult evaluate_all(std::span<const double> scores, std::span<const int> labels,
                        double threshold = 0.5);

}  // namespace ccbert
