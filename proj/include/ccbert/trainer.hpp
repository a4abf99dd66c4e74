#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ccbert/checkpoint.hpp"
#include "ccbert/corpus.hpp"
#include "ccbert/metrics.hpp"
#include "ccbert/model.hpp"
#include "ccbert/objectives.hpp"

namespace ccbert {

struct TrainConfig {
  int64_t batch_size = 16;
  double peak_lr = 3e-4;
  int64_t warmup_steps = 100;
  int64_t max_steps = 2000;  // schedule horizon and default stopping point
  int64_t stop_after = 0;    // > 0: pause at this step (schedule still spans max_steps)
  uint64_t seed = 17;
  std::string precision = "f32";  // "f32" | "f64"; checkpoints are always f32
  ObjectiveConfig objectives;
  bool round_robin = false;  // one objective per step instead of all four
  double weight_decay = 0.01;
  int64_t eval_every = 500;  // checkpoint cadence in steps
  std::string checkpoint_dir;  // empty: keep everything in memory

  void validate() const {
    if (batch_size < 1) fail("BadConfig", "pretrain: batch_size must be >= 1");
    if (warmup_steps > max_steps) {
      fail("BadConfig", "pretrain: warmup_steps must be <= max_steps");
    }
    if (warmup_steps < 0 || max_steps < 1) fail("BadConfig", "pretrain: bad step counts");
    if (stop_after < 0 || stop_after > max_steps) {
      fail("BadConfig", "pretrain: stop_after must be in [0, max_steps]");
    }
    if (eval_every < 1) fail("BadConfig", "pretrain: eval_every must be >= 1");
    if (precision != "f32" && precision != "f64") {
      fail("BadConfig", "pretrain: precision must be f32 or f64");
    }
  }
};

struct FinetuneConfig {
  int64_t epochs = 5;
  int64_t batch_size = 16;  // commits per batch
  double lr = 3e-5;
  int64_t hunk_cap = 8;  // H_max: hunks per commit that contribute
  double val_fraction = 0.1;  // used when no validation set is given
  std::string split = "chronological";  // "chronological" | "stratified"
  std::string selection_metric = "auc_roc";  // auc_roc | auc_pr | accuracy | f1
  uint64_t seed = 17;
  double weight_decay = 0.01;
  std::string checkpoint_dir;

  void validate() const {
    if (epochs < 1) fail("BadConfig", "finetune: epochs must be >= 1");
    if (hunk_cap < 1) fail("BadConfig", "finetune: hunk_cap must be >= 1");
    if (batch_size < 1) fail("BadConfig", "finetune: batch_size must be >= 1");
    if (val_fraction <= 0.0 || val_fraction >= 1.0) {
      fail("BadConfig", "finetune: val_fraction must be in (0, 1)");
    }
    if (split != "chronological" && split != "stratified") {
      fail("BadConfig", "finetune: split must be chronological or stratified");
    }
    if (selection_metric != "auc_roc" && selection_metric != "auc_pr" &&
        selection_metric != "accuracy" && selection_metric != "f1") {
      fail("BadConfig", "finetune: unknown selection metric " + selection_metric);
    }
  }
};

// Linear ramp 0 -> peak over warmup, then linear decay peak -> 0 at max_steps.
double lr_schedule(int64_t step, double peak_lr, int64_t warmup_steps, int64_t max_steps);

struct LossLogRow {
  int64_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double mup = 0.0, mnp = 0.0, mop = 0.0, mep = 0.0;
};

std::string loss_log_line(const LossLogRow& row);

struct PretrainResult {
  std::vector<LossLogRow> log;     // rows for the steps run in this call
  std::string final_checkpoint;    // empty when no checkpoint_dir configured
};

// Seeded shuffled batching over the instance corpus; every source of
// randomness is derived from (seed, step/epoch, index), so resuming from a
// checkpoint at step s reproduces the loss log of an uninterrupted run.
PretrainResult pretrain(const std::vector<Instance>& corpus, const ModelConfig& mcfg,
                        const TrainConfig& tcfg, const std::string& resume_path = "");

struct EpochEval {
  int64_t epoch = 0;
  EvalResult eval;
  double selection_value = 0.0;
};

struct FinetuneResult {
  std::vector<EpochEval> history;
  int64_t best_epoch = 0;
  double best_value = 0.0;
  std::string best_checkpoint;  // empty when no checkpoint_dir configured
  ModelParams<float> best_params;
};

// Fine-tunes all parameters plus the 2-way classifier head on labeled
// commits. A commit's representation is the mean of its first hunk_cap hunk
// vectors (each the masked mean of the last encoder layer). The best epoch by
// the selection metric on the validation set wins.
FinetuneResult finetune(const std::vector<Commit>& train_commits,
                        const std::vector<Commit>& val_commits,
                        ModelParams<float> initial, const FinetuneConfig& fcfg);

// Softmax probability of class 1 per commit, dropout off; deterministic.
std::vector<double> predict(const std::vector<Commit>& commits, ModelParams<float>& params,
                            int64_t hunk_cap);

// Commit representations (mean over the first hunk_cap pooled hunk vectors).
std::vector<std::vector<float>> commit_vectors(const std::vector<Commit>& commits,
                                               ModelParams<float>& params,
                                               int64_t hunk_cap);

}  // namespace ccbert
