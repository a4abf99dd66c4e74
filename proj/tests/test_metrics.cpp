#include "doctest.h"

#include <cmath>
#include <vector>

#include "ccbert/metrics.hpp"
#include "ccbert/rng.hpp"
#include "testutil.hpp"

using namespace ccbert;

TEST_CASE("auc_roc: perfect ranking, worked example, all ties") {
  const std::vector<double> perfect{0.1, 0.2, 0.8, 0.9};
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(auc_roc(perfect, labels) == doctest::Approx(1.0));

  const std::vector<double> scores{0.1, 0.4, 0.35, 0.8};
  CHECK(auc_roc(scores, labels) == doctest::Approx(0.75));

  const std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
  CHECK(auc_roc(tied, labels) == doctest::Approx(0.5));
}

TEST_CASE("auc_roc: single-class input is an error") {
  const std::vector<double> scores{0.1, 0.9};
  try {
    auc_roc(scores, std::vector<int>{1, 1});
    FAIL("expected SingleClass");
  } catch (const Error& e) {
    CHECK(e.kind() == "SingleClass");
  }
}

TEST_CASE("auc_pr: perfect ranking, worked example, all positives") {
  const std::vector<double> perfect{0.9, 0.8, 0.2, 0.1};
  CHECK(auc_pr(perfect, std::vector<int>{1, 1, 0, 0}) == doctest::Approx(1.0));

  const std::vector<double> scores{0.9, 0.8, 0.7};
  CHECK(auc_pr(scores, std::vector<int>{1, 0, 1}) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));

  CHECK(auc_pr(scores, std::vector<int>{1, 1, 1}) == doctest::Approx(1.0));
}

TEST_CASE("auc_pr: no positives is an error") {
  const std::vector<double> scores{0.1, 0.9};
  try {
    auc_pr(scores, std::vector<int>{0, 0});
    FAIL("expected NoPositives");
  } catch (const Error& e) {
    CHECK(e.kind() == "NoPositives");
  }
}

TEST_CASE("threshold_metrics: perfect scores, formula case, degenerate F1") {
  const std::vector<double> perfect{0.9, 0.8, 0.1, 0.2};
  const std::vector<int> labels{1, 1, 0, 0};
  const auto m = threshold_metrics(perfect, labels);
  CHECK(m.accuracy == doctest::Approx(1.0));
  CHECK(m.f1 == doctest::Approx(1.0));

  // TP=8, FP=2, FN=2, TN=8 -> accuracy 0.8, F1 0.8
  std::vector<double> scores;
  std::vector<int> truth;
  for (int i = 0; i < 8; ++i) { scores.push_back(0.9); truth.push_back(1); }  // TP
  for (int i = 0; i < 2; ++i) { scores.push_back(0.9); truth.push_back(0); }  // FP
  for (int i = 0; i < 2; ++i) { scores.push_back(0.1); truth.push_back(1); }  // FN
  for (int i = 0; i < 8; ++i) { scores.push_back(0.1); truth.push_back(0); }  // TN
  const auto t = threshold_metrics(scores, truth);
  CHECK(t.tp == 8);
  CHECK(t.fp == 2);
  CHECK(t.fn == 2);
  CHECK(t.tn == 8);
  CHECK(t.accuracy == doctest::Approx(0.8));
  CHECK(t.f1 == doctest::Approx(0.8));

  const std::vector<double> low{0.1, 0.2};
  const auto d = threshold_metrics(low, std::vector<int>{0, 0});
  CHECK(d.f1 == 0.0);  // no predicted or actual positives
}

TEST_CASE("both AUCs match their brute-force oracles on random score sets") {
  Rng rng(0xAAA);
  for (int iter = 0; iter < 120; ++iter) {
    const int64_t n = 2 + static_cast<int64_t>(rng.below(199));
    std::vector<double> scores;
    std::vector<int> labels;
    int64_t pos = 0;
    for (int64_t i = 0; i < n; ++i) {
      // quantized scores force plenty of ties
      scores.push_back(static_cast<double>(rng.below(20)) / 20.0);
      labels.push_back(rng.uniform01() < 0.4 ? 1 : 0);
      pos += labels.back();
    }
    if (pos == 0) labels[0] = 1;
    if (pos == n) labels[0] = 0;

    CHECK(auc_roc(scores, labels) ==
          doctest::Approx(testutil::brute_auc_roc(scores, labels)).epsilon(1e-9));
    CHECK(auc_pr(scores, labels) ==
          doctest::Approx(testutil::brute_auc_pr(scores, labels)).epsilon(1e-9));
  }
}

TEST_CASE("auc_roc is invariant under strictly monotone score transforms") {
  Rng rng(0xBBB);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    scores.push_back(rng.uniform01());
    labels.push_back(i % 3 == 0 ? 1 : 0);
  }
  const double base = auc_roc(scores, labels);
  std::vector<double> warped;
  for (double s : scores) warped.push_back(std::exp(3.0 * s) - 7.0);
  CHECK(auc_roc(warped, labels) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("auc_roc complement law for tie-free scores") {
  Rng rng(0xCCC);
  std::vector<double> scores;
  std::vector<int> labels, flipped;
  for (int i = 0; i < 50; ++i) {
    scores.push_back((i + 1) * 0.013);  // strictly increasing, no ties
    labels.push_back(rng.uniform01() < 0.5 ? 1 : 0);
  }
  labels[0] = 1;
  labels[1] = 0;
  for (int lb : labels) flipped.push_back(1 - lb);
  CHECK(auc_roc(scores, labels) + auc_roc(scores, flipped) == doctest::Approx(1.0));
}

TEST_CASE("evaluate_all populates every field consistently") {
  const std::vector<double> scores{0.9, 0.6, 0.4, 0.2};
  const std::vector<int> labels{1, 0, 1, 0};
  const EvalResult r = evaluate_all(scores, labels);
  CHECK(r.auc_roc == doctest::Approx(auc_roc(scores, labels)));
  CHECK(r.auc_pr == doctest::Approx(auc_pr(scores, labels)));
  CHECK(r.tp + r.fp + r.tn + r.fn == 4);
  // preds at 0.5: {1,1,0,0} vs truth {1,0,1,0} -> TP=FP=FN=TN=1
  CHECK(r.tp == 1);
  CHECK(r.accuracy == doctest::Approx(0.5));
  CHECK(r.f1 == doctest::Approx(0.5));
}
