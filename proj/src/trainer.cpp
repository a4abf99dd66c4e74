#include "ccbert/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace ccbert {

double lr_schedule(int64_t step, double peak_lr, int64_t warmup_steps, int64_t max_steps) {
  if (step < 0 || step > max_steps) {
    fail("BadConfig", "lr_schedule: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(max_steps) + "]");
  }
  if (step <= warmup_steps) {
    if (warmup_steps == 0) return peak_lr;
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return peak_lr * static_cast<double>(max_steps - step) /
         static_cast<double>(max_steps - warmup_steps);
}

std::string loss_log_line(const LossLogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%" PRId64 ",%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", row.step,
                row.lr, row.total, row.mup, row.mnp, row.mop, row.mep);
  return buf;
}

namespace {

// Training allocates and frees the same multi-megabyte activation buffers
// every step; keep them in the arena instead of bouncing pages through
// mmap/munmap.
void tune_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

void check_vocab(const std::vector<Commit>& commits, int64_t vocab_code) {
  for (const Commit& c : commits) {
    for (const AlignedChange& h : c.hunks) {
      for (int32_t id : h.old_ids) {
        if (id < 0 || id >= vocab_code) {
          fail("VocabMismatch", "commit " + c.commit_id + ": token id " +
                                    std::to_string(id) + " outside vocabulary of size " +
                                    std::to_string(vocab_code));
        }
      }
      for (int32_t id : h.new_ids) {
        if (id < 0 || id >= vocab_code) {
          fail("VocabMismatch", "commit " + c.commit_id + ": token id " +
                                    std::to_string(id) + " outside vocabulary of size " +
                                    std::to_string(vocab_code));
        }
      }
    }
  }
}

void check_vocab(const std::vector<Instance>& corpus, int64_t vocab_code) {
  for (const Instance& inst : corpus) {
    for (const std::vector<int32_t>* ids : {&inst.change.old_ids, &inst.change.new_ids}) {
      for (int32_t id : *ids) {
        if (id < 0 || id >= vocab_code) {
          fail("VocabMismatch", "instance " + inst.commit_id + ": token id " +
                                    std::to_string(id) + " outside vocabulary of size " +
                                    std::to_string(vocab_code));
        }
      }
    }
  }
}

ObjectiveConfig objectives_for_step(const TrainConfig& tcfg, int64_t step) {
  if (!tcfg.round_robin) return tcfg.objectives;
  std::vector<Objective> enabled;
  for (Objective o : {Objective::kMup, Objective::kMnp, Objective::kMop, Objective::kMep}) {
    if (tcfg.objectives.enabled(o)) enabled.push_back(o);
  }
  if (enabled.empty()) fail("ConfigNoObjectives", "pretrain: all objectives disabled");
  const Objective pick = enabled[static_cast<size_t>((step - 1) %
                                                     static_cast<int64_t>(enabled.size()))];
  ObjectiveConfig one;
  one.mup = pick == Objective::kMup;
  one.mnp = pick == Objective::kMnp;
  one.mop = pick == Objective::kMop;
  one.mep = pick == Objective::kMep;
  one.mask_rate = tcfg.objectives.mask_rate;
  return one;
}

// Mean over each commit's first hunk_cap pooled hunk vectors, as one batched
// forward pass over all hunks of the commit batch.
template <typename Real>
TensorPtr<Real> commit_repr(Tape<Real>& tape, const std::vector<const Commit*>& commits,
                            ModelParams<Real>& params, int64_t hunk_cap, bool train,
                            Rng* rng) {
  std::vector<const AlignedChange*> hunks;
  std::vector<std::pair<int64_t, int64_t>> spans;  // [first, count) per commit
  for (const Commit* c : commits) {
    if (c->hunks.empty()) {
      fail("BadRecord", "commit " + c->commit_id + " has no hunks");
    }
    const int64_t take = std::min<int64_t>(hunk_cap, static_cast<int64_t>(c->hunks.size()));
    spans.emplace_back(static_cast<int64_t>(hunks.size()), take);
    for (int64_t i = 0; i < take; ++i) hunks.push_back(&c->hunks[static_cast<size_t>(i)]);
  }

  const PaddedBatch pb = pad_batch(hunks);
  auto x = embed_input(tape, pb, params);
  auto h = encode(tape, x, pb, params, train, rng);
  auto pooled = pool_mean(tape, h, pb);  // [nH, d]

  const auto n_commits = static_cast<int64_t>(commits.size());
  const auto n_hunks = static_cast<int64_t>(hunks.size());
  auto averaging = make_tensor<Real>(Shape{n_commits, n_hunks});
  for (int64_t c = 0; c < n_commits; ++c) {
    const auto [first, count] = spans[static_cast<size_t>(c)];
    const Real w = Real(1) / static_cast<Real>(count);
    for (int64_t i = 0; i < count; ++i) {
      averaging->data[static_cast<size_t>(c * n_hunks + first + i)] = w;
    }
  }
  return tape.matmul(averaging, pooled);  // [C, d]
}

template <typename Real>
std::vector<double> predict_impl(const std::vector<Commit>& commits,
                                 ModelParams<Real>& params, int64_t hunk_cap) {
  std::vector<double> scores;
  scores.reserve(commits.size());
  constexpr int64_t kChunk = 64;
  for (size_t start = 0; start < commits.size(); start += kChunk) {
    const size_t stop = std::min(commits.size(), start + kChunk);
    std::vector<const Commit*> chunk;
    for (size_t i = start; i < stop; ++i) chunk.push_back(&commits[i]);
    Tape<Real> tape;
    auto repr = commit_repr(tape, chunk, params, hunk_cap, /*train=*/false, nullptr);
    auto logits = tape.linear(repr, params.cls_w.value, params.cls_b.value);
    auto probs = tape.softmax_lastdim(logits);
    for (size_t i = 0; i < chunk.size(); ++i) {
      scores.push_back(static_cast<double>(probs->data[i * 2 + 1]));
    }
  }
  return scores;
}

double metric_value(const EvalResult& e, const std::string& name) {
  if (name == "auc_roc") return e.auc_roc;
  if (name == "auc_pr") return e.auc_pr;
  if (name == "accuracy") return e.accuracy;
  return e.f1;
}

template <typename Real>
PretrainResult pretrain_impl(const std::vector<Instance>& corpus, const ModelConfig& mcfg,
                             const TrainConfig& tcfg, const std::string& resume_path) {
  tcfg.validate();
  mcfg.validate();
  tune_allocator();
  if (corpus.empty()) fail("EmptyCorpus", "pretrain: corpus is empty");
  if (tcfg.objectives.count_enabled() == 0) {
    fail("ConfigNoObjectives", "pretrain: all objectives disabled");
  }
  check_vocab(corpus, mcfg.vocab_code);

  ModelParams<Real> params;
  int64_t start_step = 0;
  if (!resume_path.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(resume_path);
    if (model_config_to_json(loaded.params.config) != model_config_to_json(mcfg)) {
      fail("BadConfig", "resume: checkpoint model config differs from requested config");
    }
    if (!loaded.meta.has_adam) {
      fail("BadCheckpoint", "resume: checkpoint lacks optimizer state");
    }
    params = cast_params<Real>(loaded.params);
    start_step = loaded.meta.step;
    const int64_t stop = tcfg.stop_after > 0 ? tcfg.stop_after : tcfg.max_steps;
    if (start_step >= stop) {
      fail("BadConfig", "resume: checkpoint step " + std::to_string(start_step) +
                            " is not before the stopping step " + std::to_string(stop));
    }
  } else {
    params = init_params<Real>(mcfg, mix_seed({tcfg.seed, 0x1217ULL}));
  }

  std::ofstream log_file;
  if (!tcfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(tcfg.checkpoint_dir);
    const std::string log_path = tcfg.checkpoint_dir + "/loss_log.csv";
    log_file.open(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log_file) fail("IoError", "cannot open " + log_path);
    if (start_step == 0) log_file << "step,lr,total,mup,mnp,mop,mep\n";
  }

  const auto corpus_size = static_cast<int64_t>(corpus.size());
  const int64_t batches_per_epoch = (corpus_size + tcfg.batch_size - 1) / tcfg.batch_size;

  PretrainResult result;
  std::vector<int64_t> order;
  int64_t order_epoch = -1;
  const int64_t last_step = tcfg.stop_after > 0 ? tcfg.stop_after : tcfg.max_steps;

  for (int64_t step = start_step + 1; step <= last_step; ++step) {
    const int64_t epoch = (step - 1) / batches_per_epoch;
    const int64_t slot = (step - 1) % batches_per_epoch;
    if (epoch != order_epoch) {
      order.resize(static_cast<size_t>(corpus_size));
      std::iota(order.begin(), order.end(), int64_t{0});
      Rng shuffle_rng(mix_seed({tcfg.seed, 0xDA7AULL, static_cast<uint64_t>(epoch)}));
      shuffle_rng.shuffle(order);
      order_epoch = epoch;
    }
    const int64_t lo = slot * tcfg.batch_size;
    const int64_t hi = std::min(corpus_size, lo + tcfg.batch_size);
    std::vector<const AlignedChange*> batch;
    batch.reserve(static_cast<size_t>(hi - lo));
    for (int64_t i = lo; i < hi; ++i) {
      batch.push_back(&corpus[static_cast<size_t>(order[static_cast<size_t>(i)])].change);
    }

    params.zero_grads();
    Tape<Real> tape;
    Rng dropout_rng(mix_seed({tcfg.seed, 0xD09ULL, static_cast<uint64_t>(step)}));
    const ObjectiveConfig ocfg = objectives_for_step(tcfg, step);
    CombinedLoss<Real> loss =
        combined_loss(tape, batch, params, ocfg, /*train=*/true,
                      mix_seed({tcfg.seed, 0x3A5CULL, static_cast<uint64_t>(step)}),
                      &dropout_rng);
    tape.backward(loss.total);

    AdamWConfig adam;
    adam.lr = lr_schedule(step, tcfg.peak_lr, tcfg.warmup_steps, tcfg.max_steps);
    adam.weight_decay = tcfg.weight_decay;
    auto trainable = params.pretrain_parameters();
    adamw_step(trainable, adam);

    LossLogRow row;
    row.step = step;
    row.lr = adam.lr;
    row.total = static_cast<double>(loss.total->data[0]);
    row.mup = loss.values[0];
    row.mnp = loss.values[1];
    row.mop = loss.values[2];
    row.mep = loss.values[3];
    result.log.push_back(row);
    if (log_file.is_open()) log_file << loss_log_line(row) << '\n' << std::flush;

    if (!tcfg.checkpoint_dir.empty() &&
        (step % tcfg.eval_every == 0 || step == last_step)) {
      const std::string path =
          tcfg.checkpoint_dir + "/step_" + std::to_string(step) + ".ckpt";
      CheckpointMeta meta;
      meta.kind = "pretrain";
      meta.step = step;
      meta.has_adam = true;
      if constexpr (std::is_same_v<Real, float>) {
        save_checkpoint(path, params, meta);
      } else {
        ModelParams<float> fp = cast_params<float>(params);
        save_checkpoint(path, fp, meta);
      }
      result.final_checkpoint = path;
    }
  }
  return result;
}

}  // namespace

PretrainResult pretrain(const std::vector<Instance>& corpus, const ModelConfig& mcfg,
                        const TrainConfig& tcfg, const std::string& resume_path) {
  if (tcfg.precision == "f64") {
    return pretrain_impl<double>(corpus, mcfg, tcfg, resume_path);
  }
  return pretrain_impl<float>(corpus, mcfg, tcfg, resume_path);
}

FinetuneResult finetune(const std::vector<Commit>& train_commits,
                        const std::vector<Commit>& val_commits, ModelParams<float> initial,
                        const FinetuneConfig& fcfg) {
  fcfg.validate();
  initial.config.validate();
  tune_allocator();

  auto require_labels = [](const std::vector<Commit>& commits, const char* which) {
    for (const Commit& c : commits) {
      if (!c.label) {
        fail("LabelMissing", std::string(which) + " commit " + c.commit_id +
                                 " has no label");
      }
      if (c.hunks.empty()) {
        fail("BadRecord", std::string(which) + " commit " + c.commit_id + " has no hunks");
      }
    }
  };
  require_labels(train_commits, "train");
  require_labels(val_commits, "validation");
  check_vocab(train_commits, initial.config.vocab_code);
  check_vocab(val_commits, initial.config.vocab_code);

  // Carve a validation set out of the training data when none is supplied.
  std::vector<Commit> train = train_commits;
  std::vector<Commit> val = val_commits;
  if (val.empty()) {
    const auto n = static_cast<int64_t>(train.size());
    if (n < 2) fail("BadConfig", "finetune: need at least 2 commits to split");
    if (fcfg.split == "chronological") {
      int64_t n_val = std::llround(fcfg.val_fraction * static_cast<double>(n));
      n_val = std::clamp<int64_t>(n_val, 1, n - 1);
      val.assign(train.end() - n_val, train.end());
      train.resize(static_cast<size_t>(n - n_val));
    } else {  // stratified
      std::vector<int64_t> by_class[2];
      for (int64_t i = 0; i < n; ++i) {
        by_class[*train[static_cast<size_t>(i)].label].push_back(i);
      }
      Rng split_rng(mix_seed({fcfg.seed, 0x5917ULL}));
      std::vector<int64_t> val_idx;
      for (auto& members : by_class) {
        split_rng.shuffle(members);
        const auto take = std::max<int64_t>(
            members.empty() ? 0 : 1,
            std::llround(fcfg.val_fraction * static_cast<double>(members.size())));
        for (int64_t i = 0; i < take && i < static_cast<int64_t>(members.size()); ++i) {
          val_idx.push_back(members[static_cast<size_t>(i)]);
        }
      }
      std::sort(val_idx.begin(), val_idx.end());
      std::vector<Commit> new_train, new_val;
      size_t vi = 0;
      for (int64_t i = 0; i < n; ++i) {
        if (vi < val_idx.size() && val_idx[vi] == i) {
          new_val.push_back(std::move(train[static_cast<size_t>(i)]));
          ++vi;
        } else {
          new_train.push_back(std::move(train[static_cast<size_t>(i)]));
        }
      }
      train = std::move(new_train);
      val = std::move(new_val);
    }
  }
  if (train.empty()) fail("BadConfig", "finetune: empty training split");

  std::vector<int> val_labels;
  val_labels.reserve(val.size());
  for (const Commit& c : val) val_labels.push_back(*c.label);

  ModelParams<float> params = std::move(initial);
  FinetuneResult result;
  result.best_value = -std::numeric_limits<double>::infinity();
  result.best_params = cast_params<float>(params);

  const auto n_train = static_cast<int64_t>(train.size());
  for (int64_t epoch = 1; epoch <= fcfg.epochs; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), int64_t{0});
    Rng shuffle_rng(mix_seed({fcfg.seed, 0xF17ULL, static_cast<uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    for (int64_t lo = 0; lo < n_train; lo += fcfg.batch_size) {
      const int64_t hi = std::min(n_train, lo + fcfg.batch_size);
      std::vector<const Commit*> batch;
      std::vector<int32_t> labels;
      for (int64_t i = lo; i < hi; ++i) {
        const Commit& c = train[static_cast<size_t>(order[static_cast<size_t>(i)])];
        batch.push_back(&c);
        labels.push_back(static_cast<int32_t>(*c.label));
      }

      params.zero_grads();
      Tape<float> tape;
      Rng dropout_rng(mix_seed({fcfg.seed, 0xD0F7ULL, static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(lo)}));
      auto repr = commit_repr(tape, batch, params, fcfg.hunk_cap, /*train=*/true,
                              &dropout_rng);
      auto logits = tape.linear(repr, params.cls_w.value, params.cls_b.value);
      auto loss = tape.scale(tape.cross_entropy_sum(logits, labels, -1),
                             1.0f / static_cast<float>(batch.size()));
      tape.backward(loss);

      AdamWConfig adam;
      adam.lr = fcfg.lr;
      adam.weight_decay = fcfg.weight_decay;
      auto trainable = params.all_parameters();
      adamw_step(trainable, adam);
    }

    EpochEval ee;
    ee.epoch = epoch;
    const std::vector<double> scores = predict_impl(val, params, fcfg.hunk_cap);
    ee.eval = evaluate_all(scores, val_labels);
    ee.selection_value = metric_value(ee.eval, fcfg.selection_metric);
    result.history.push_back(ee);
    if (ee.selection_value > result.best_value) {
      result.best_value = ee.selection_value;
      result.best_epoch = epoch;
      result.best_params = cast_params<float>(params);
    }
  }

  if (!fcfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(fcfg.checkpoint_dir);
    const std::string path = fcfg.checkpoint_dir + "/best.ckpt";
    CheckpointMeta meta;
    meta.kind = "finetune";
    meta.step = result.best_epoch;
    meta.has_adam = false;
    save_checkpoint(path, result.best_params, meta);
    result.best_checkpoint = path;
  }
  return result;
}

std::vector<double> predict(const std::vector<Commit>& commits, ModelParams<float>& params,
                            int64_t hunk_cap) {
  if (hunk_cap < 1) fail("BadConfig", "predict: hunk_cap must be >= 1");
  check_vocab(commits, params.config.vocab_code);
  return predict_impl(commits, params, hunk_cap);
}

std::vector<std::vector<float>> commit_vectors(const std::vector<Commit>& commits,
                                               ModelParams<float>& params,
                                               int64_t hunk_cap) {
  if (hunk_cap < 1) fail("BadConfig", "commit_vectors: hunk_cap must be >= 1");
  check_vocab(commits, params.config.vocab_code);
  std::vector<std::vector<float>> out;
  out.reserve(commits.size());
  constexpr int64_t kChunk = 64;
  for (size_t start = 0; start < commits.size(); start += kChunk) {
    const size_t stop = std::min(commits.size(), start + kChunk);
    std::vector<const Commit*> chunk;
    for (size_t i = start; i < stop; ++i) chunk.push_back(&commits[i]);
    Tape<float> tape;
    auto repr = commit_repr(tape, chunk, params, hunk_cap, /*train=*/false, nullptr);
    const int64_t d = params.config.d;
    for (size_t i = 0; i < chunk.size(); ++i) {
      out.emplace_back(repr->data.begin() + static_cast<int64_t>(i) * d,
                       repr->data.begin() + static_cast<int64_t>(i + 1) * d);
    }
  }
  return out;
}

}  // namespace ccbert
