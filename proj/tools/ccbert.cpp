// ccbert: end-to-end pipeline for code-change representation learning.
// Subcommands cover hunk extraction, BPE training, corpus encoding,
// pre-training, fine-tuning, prediction, evaluation, embedding export, and a
// gradient self-check.

#include <atomic>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "ccbert/changeset.hpp"
#include "ccbert/checkpoint.hpp"
#include "ccbert/corpus.hpp"
#include "ccbert/jsonl.hpp"
#include "ccbert/metrics.hpp"
#include "ccbert/objectives.hpp"
#include "ccbert/tokenizer.hpp"
#include "ccbert/trainer.hpp"

namespace ccbert {
namespace {

// ---------------------------------------------------------------------------
// Pipeline configuration: one JSON file covering every stage, overridable by
// command-line flags (flags win). Unknown keys are rejected.

struct PipelineConfig {
  ModelConfig model;
  TrainConfig pretrain;
  FinetuneConfig finetune;
  int64_t vocab_size = 4096;
  int context = 3;
  int gap_limit = 3;
  int64_t encode_max_len = 128;
};

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      fail("BadConfig", "unknown key '" + where + it.key() + "' in config");
    }
  }
}

template <typename T>
void maybe(const json& j, const char* key, T* out) {
  auto it = j.find(key);
  if (it != j.end()) *out = it->get<T>();
}

PipelineConfig load_pipeline_config(const std::string& path) {
  PipelineConfig pc;
  if (path.empty()) return pc;
  std::ifstream in(path);
  if (!in) fail("IoError", "cannot open config " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) fail("BadConfig", path + ": not valid JSON");
  reject_unknown(j, {"model", "pretrain", "finetune", "tokenizer", "extract", "encode"},
                 "");

  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, {"d", "layers", "heads", "ffn_mult", "max_len", "dropout",
                       "tie_heads"},
                   "model.");
    maybe(m, "d", &pc.model.d);
    maybe(m, "layers", &pc.model.layers);
    maybe(m, "heads", &pc.model.heads);
    maybe(m, "ffn_mult", &pc.model.ffn_mult);
    maybe(m, "max_len", &pc.model.max_len);
    maybe(m, "dropout", &pc.model.dropout);
    maybe(m, "tie_heads", &pc.model.tie_heads);
  }
  if (j.contains("pretrain")) {
    const json& p = j["pretrain"];
    reject_unknown(p,
                   {"batch_size", "peak_lr", "warmup_steps", "max_steps", "stop_after",
                    "seed", "precision", "round_robin", "weight_decay", "eval_every",
                    "objectives"},
                   "pretrain.");
    maybe(p, "batch_size", &pc.pretrain.batch_size);
    maybe(p, "peak_lr", &pc.pretrain.peak_lr);
    maybe(p, "warmup_steps", &pc.pretrain.warmup_steps);
    maybe(p, "max_steps", &pc.pretrain.max_steps);
    maybe(p, "stop_after", &pc.pretrain.stop_after);
    maybe(p, "seed", &pc.pretrain.seed);
    maybe(p, "precision", &pc.pretrain.precision);
    maybe(p, "round_robin", &pc.pretrain.round_robin);
    maybe(p, "weight_decay", &pc.pretrain.weight_decay);
    maybe(p, "eval_every", &pc.pretrain.eval_every);
    if (p.contains("objectives")) {
      const json& o = p["objectives"];
      reject_unknown(o, {"mup", "mnp", "mop", "mep", "mask_rate"},
                     "pretrain.objectives.");
      maybe(o, "mup", &pc.pretrain.objectives.mup);
      maybe(o, "mnp", &pc.pretrain.objectives.mnp);
      maybe(o, "mop", &pc.pretrain.objectives.mop);
      maybe(o, "mep", &pc.pretrain.objectives.mep);
      maybe(o, "mask_rate", &pc.pretrain.objectives.mask_rate);
    }
  }
  if (j.contains("finetune")) {
    const json& f = j["finetune"];
    reject_unknown(f,
                   {"epochs", "batch_size", "lr", "hunk_cap", "val_fraction", "split",
                    "selection_metric", "seed", "weight_decay"},
                   "finetune.");
    maybe(f, "epochs", &pc.finetune.epochs);
    maybe(f, "batch_size", &pc.finetune.batch_size);
    maybe(f, "lr", &pc.finetune.lr);
    maybe(f, "hunk_cap", &pc.finetune.hunk_cap);
    maybe(f, "val_fraction", &pc.finetune.val_fraction);
    maybe(f, "split", &pc.finetune.split);
    maybe(f, "selection_metric", &pc.finetune.selection_metric);
    maybe(f, "seed", &pc.finetune.seed);
    maybe(f, "weight_decay", &pc.finetune.weight_decay);
  }
  if (j.contains("tokenizer")) {
    reject_unknown(j["tokenizer"], {"vocab_size"}, "tokenizer.");
    maybe(j["tokenizer"], "vocab_size", &pc.vocab_size);
  }
  if (j.contains("extract")) {
    reject_unknown(j["extract"], {"context", "gap_limit"}, "extract.");
    maybe(j["extract"], "context", &pc.context);
    maybe(j["extract"], "gap_limit", &pc.gap_limit);
  }
  if (j.contains("encode")) {
    reject_unknown(j["encode"], {"max_len"}, "encode.");
    maybe(j["encode"], "max_len", &pc.encode_max_len);
  }
  return pc;
}

json pipeline_config_json(const PipelineConfig& pc) {
  return json{
      {"model", model_config_to_json(pc.model)},
      {"pretrain",
       {{"batch_size", pc.pretrain.batch_size},
        {"peak_lr", pc.pretrain.peak_lr},
        {"warmup_steps", pc.pretrain.warmup_steps},
        {"max_steps", pc.pretrain.max_steps},
        {"stop_after", pc.pretrain.stop_after},
        {"seed", pc.pretrain.seed},
        {"precision", pc.pretrain.precision},
        {"round_robin", pc.pretrain.round_robin},
        {"weight_decay", pc.pretrain.weight_decay},
        {"eval_every", pc.pretrain.eval_every},
        {"objectives",
         {{"mup", pc.pretrain.objectives.mup},
          {"mnp", pc.pretrain.objectives.mnp},
          {"mop", pc.pretrain.objectives.mop},
          {"mep", pc.pretrain.objectives.mep},
          {"mask_rate", pc.pretrain.objectives.mask_rate}}}}},
      {"finetune",
       {{"epochs", pc.finetune.epochs},
        {"batch_size", pc.finetune.batch_size},
        {"lr", pc.finetune.lr},
        {"hunk_cap", pc.finetune.hunk_cap},
        {"val_fraction", pc.finetune.val_fraction},
        {"split", pc.finetune.split},
        {"selection_metric", pc.finetune.selection_metric},
        {"seed", pc.finetune.seed},
        {"weight_decay", pc.finetune.weight_decay}}},
      {"tokenizer", {{"vocab_size", pc.vocab_size}}},
      {"extract", {{"context", pc.context}, {"gap_limit", pc.gap_limit}}},
      {"encode", {{"max_len", pc.encode_max_len}}}};
}

void echo_config(const PipelineConfig& pc, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  AtomicFile file(out_dir + "/config.json");
  file.stream() << pipeline_config_json(pc).dump(2) << '\n';
  file.commit();
}

// ---------------------------------------------------------------------------
// Worker pool: order-preserving parallel map. CCBERT_THREADS caps the count.

int worker_count(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("CCBERT_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

template <typename Out, typename In, typename Fn>
std::vector<Out> parallel_map(const std::vector<In>& inputs, int threads, Fn fn) {
  std::vector<Out> out(inputs.size());
  if (inputs.empty()) return out;
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (size_t i; (i = next.fetch_add(1)) < inputs.size();) {
      try {
        out[i] = fn(inputs[i], i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(inputs.size());
        return;
      }
    }
  };
  const int extra = std::min<int>(threads, static_cast<int>(inputs.size())) - 1;
  std::vector<std::thread> pool;
  for (int t = 0; t < extra; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

struct ParsedLine {
  int64_t line_no;
  json value;
};

std::vector<ParsedLine> read_jsonl_file(const std::string& path) {
  std::vector<ParsedLine> out;
  for_each_jsonl(path, [&](int64_t line_no, const json& j) {
    out.push_back({line_no, j});
  });
  return out;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_extract_hunks(const std::string& in, const std::string& out,
                      const PipelineConfig& pc, int threads) {
  const std::vector<ParsedLine> lines = read_jsonl_file(in);
  const auto hunks_per_commit = parallel_map<std::vector<HunkRecord>>(
      lines, threads, [&](const ParsedLine& line, size_t) {
        const CommitRecord rec = parse_commit_record(line.value, line.line_no);
        std::vector<HunkRecord> records;
        for (const FileChange& fc : rec.files) {
          for (const Hunk& h : extract_hunks(fc, pc.context, pc.gap_limit)) {
            HunkRecord r;
            r.commit_id = rec.commit_id;
            r.file = h.file_path;
            r.old_start = h.old_lines.empty() ? 0 : h.old_lines.front().line_no;
            r.new_start = h.new_lines.empty() ? 0 : h.new_lines.front().line_no;
            auto [old_snippet, new_snippet] = hunk_to_snippets(h);
            r.old_snippet = std::move(old_snippet);
            r.new_snippet = std::move(new_snippet);
            r.label = rec.label;
            records.push_back(std::move(r));
          }
        }
        return records;
      });

  AtomicFile file(out);
  int64_t total = 0;
  for (const auto& records : hunks_per_commit) {
    for (const HunkRecord& r : records) {
      file.write_json_line(hunk_record_to_json(r));
      ++total;
    }
  }
  file.commit();
  std::cout << "extract-hunks: " << lines.size() << " commits -> " << total
            << " hunks\n";
  return 0;
}

int cmd_train_bpe(const std::string& in, const std::string& out,
                  const PipelineConfig& pc) {
  const std::vector<HunkRecord> records = read_hunk_records(in);
  size_t index = 0;
  bool old_side = true;
  auto next_text = [&](std::string* text) {
    while (index < records.size()) {
      const HunkRecord& r = records[index];
      if (old_side) {
        old_side = false;
        *text = r.old_snippet;
      } else {
        old_side = true;
        ++index;
        *text = r.new_snippet;
      }
      return true;
    }
    return false;
  };
  const Vocab vocab = train_bpe(next_text, static_cast<int32_t>(pc.vocab_size));
  save_vocab(vocab, out);
  std::cout << "train-bpe: vocabulary of " << vocab.size() << " tokens ("
            << vocab.merges.size() << " merges) -> " << out << "\n";
  return 0;
}

int cmd_encode_corpus(const std::string& in, const std::string& vocab_path,
                      const std::string& out, const PipelineConfig& pc, int threads) {
  const Vocab vocab = load_vocab(vocab_path);
  const BpeEncoder encoder(vocab);
  const std::vector<HunkRecord> records = read_hunk_records(in);
  const auto encoded = parallel_map<Instance>(
      records, threads, [&](const HunkRecord& r, size_t) {
        Instance inst;
        inst.commit_id = r.commit_id;
        inst.label = r.label;
        inst.change = truncate(
            align_triples(encoder.encode(r.old_snippet), encoder.encode(r.new_snippet)),
            pc.encode_max_len);
        return inst;
      });

  AtomicFile file(out);
  int64_t written = 0;
  for (const Instance& inst : encoded) {
    if (inst.change.length() == 0) continue;  // both snippets empty
    file.write_json_line(instance_to_json(inst));
    ++written;
  }
  file.commit();
  std::cout << "encode-corpus: " << records.size() << " hunks -> " << written
            << " instances\n";
  return 0;
}

int cmd_pretrain(const std::string& in, const std::string& vocab_path,
                 const std::string& out_dir, const std::string& resume,
                 PipelineConfig pc) {
  const Vocab vocab = load_vocab(vocab_path);
  pc.model.vocab_code = vocab.size();
  pc.pretrain.checkpoint_dir = out_dir;
  echo_config(pc, out_dir);

  const std::vector<Instance> corpus = read_instances(in);
  const PretrainResult result = pretrain(corpus, pc.model, pc.pretrain, resume);
  if (!result.log.empty()) {
    const LossLogRow& last = result.log.back();
    std::cout << "pretrain: " << result.log.size() << " steps, final total loss "
              << last.total << "\n";
  }
  std::cout << "pretrain: checkpoint " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_finetune(const std::string& train_path, const std::string& val_path,
                 const std::string& init_ckpt, const std::string& vocab_path,
                 const std::string& out_dir, PipelineConfig pc) {
  ModelParams<float> initial;
  if (!init_ckpt.empty()) {
    LoadedCheckpoint loaded = load_checkpoint(init_ckpt);
    initial = std::move(loaded.params);
    pc.model = initial.config;
  } else if (!vocab_path.empty()) {
    const Vocab vocab = load_vocab(vocab_path);
    pc.model.vocab_code = vocab.size();
    initial = init_params<float>(pc.model, mix_seed({pc.finetune.seed, 0x1217ULL}));
  } else {
    fail("BadConfig", "finetune: need --init checkpoint or --vocab for random init");
  }
  pc.finetune.checkpoint_dir = out_dir;
  echo_config(pc, out_dir);

  const std::vector<Commit> train = group_by_commit(read_instances(train_path));
  std::vector<Commit> val;
  if (!val_path.empty()) val = group_by_commit(read_instances(val_path));

  const FinetuneResult result = finetune(train, val, std::move(initial), pc.finetune);
  for (const EpochEval& e : result.history) {
    std::cout << "epoch " << e.epoch << ": auc_roc " << e.eval.auc_roc << ", auc_pr "
              << e.eval.auc_pr << ", accuracy " << e.eval.accuracy << ", f1 "
              << e.eval.f1 << "\n";
  }
  std::cout << "finetune: best epoch " << result.best_epoch << " ("
            << pc.finetune.selection_metric << " " << result.best_value << ") -> "
            << result.best_checkpoint << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& labels_path,
                 const std::string& out, double threshold) {
  std::unordered_map<std::string, int> labels;
  for_each_jsonl(labels_path, [&](int64_t line_no, const json& j) {
    if (!j.contains("commit_id") || !j.contains("label")) {
      fail("BadRecord", labels_path + ":" + std::to_string(line_no) +
                            ": need commit_id and label");
    }
    labels[j["commit_id"].get<std::string>()] = j["label"].get<int>();
  });

  std::vector<double> scores;
  std::vector<int> truth;
  for_each_jsonl(pred_path, [&](int64_t line_no, const json& j) {
    if (!j.contains("commit_id") || !j.contains("score")) {
      fail("BadRecord", pred_path + ":" + std::to_string(line_no) +
                            ": need commit_id and score");
    }
    const std::string id = j["commit_id"].get<std::string>();
    auto it = labels.find(id);
    if (it == labels.end()) {
      fail("LabelMissing", "no label for commit " + id);
    }
    scores.push_back(j["score"].get<double>());
    truth.push_back(it->second);
  });

  const EvalResult r = evaluate_all(scores, truth, threshold);
  const json report{{"auc_roc", r.auc_roc}, {"auc_pr", r.auc_pr},
                    {"accuracy", r.accuracy}, {"f1", r.f1},
                    {"tp", r.tp},             {"fp", r.fp},
                    {"tn", r.tn},             {"fn", r.fn},
                    {"threshold", threshold}, {"n", scores.size()}};
  AtomicFile file(out);
  file.stream() << report.dump(2) << '\n';
  file.commit();
  std::cout << report.dump() << "\n";
  return 0;
}

int cmd_predict(const std::string& in, const std::string& ckpt, const std::string& out,
                int64_t hunk_cap) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const std::vector<Commit> commits = group_by_commit(read_instances(in));
  const std::vector<double> scores = predict(commits, loaded.params, hunk_cap);
  AtomicFile file(out);
  for (size_t i = 0; i < commits.size(); ++i) {
    file.write_json_line(json{{"commit_id", commits[i].commit_id}, {"score", scores[i]}});
  }
  file.commit();
  std::cout << "predict: " << commits.size() << " commits -> " << out << "\n";
  return 0;
}

int cmd_embed(const std::string& in, const std::string& ckpt, const std::string& out,
              int64_t hunk_cap) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const std::vector<Commit> commits = group_by_commit(read_instances(in));
  const auto vectors = commit_vectors(commits, loaded.params, hunk_cap);
  AtomicFile file(out);
  for (size_t i = 0; i < commits.size(); ++i) {
    file.write_json_line(
        json{{"commit_id", commits[i].commit_id}, {"vector", vectors[i]}});
  }
  file.commit();
  std::cout << "embed: " << commits.size() << " commits -> " << out << "\n";
  return 0;
}

// Synthetic instances over a small vocabulary for the gradient self-check.
std::vector<AlignedChange> gradcheck_instances(int64_t batch, int64_t vocab_code,
                                               uint64_t seed) {
  Rng rng(mix_seed({seed, 0x6C4DULL}));
  std::vector<AlignedChange> out;
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t len = 6 + static_cast<int64_t>(rng.below(5));
    std::vector<int32_t> old_ids, new_ids;
    for (int64_t i = 0; i < len; ++i) {
      const auto tok = static_cast<int32_t>(Vocab::kSpecialCount +
                                            rng.below(static_cast<uint64_t>(
                                                vocab_code - Vocab::kSpecialCount)));
      old_ids.push_back(tok);
      if (rng.uniform01() < 0.3) {
        new_ids.push_back(static_cast<int32_t>(
            Vocab::kSpecialCount +
            rng.below(static_cast<uint64_t>(vocab_code - Vocab::kSpecialCount))));
      } else {
        new_ids.push_back(tok);
      }
    }
    out.push_back(align_triples(old_ids, new_ids));
  }
  return out;
}

int cmd_grad_check(int64_t d, int64_t layers, int64_t batch, uint64_t seed) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.layers = layers;
  cfg.heads = 2;
  cfg.ffn_mult = 4;
  cfg.max_len = 32;
  cfg.vocab_code = 32;
  cfg.dropout = 0.0;  // finite differences need a deterministic function
  ModelParams<double> params = init_params<double>(cfg, mix_seed({seed, 0x1217ULL}));

  const std::vector<AlignedChange> instances = gradcheck_instances(batch, cfg.vocab_code,
                                                                   seed);
  std::vector<const AlignedChange*> ptrs;
  for (const AlignedChange& ac : instances) ptrs.push_back(&ac);

  const ObjectiveConfig ocfg;
  auto build = [&](Tape<double>& tape) {
    return combined_loss(tape, ptrs, params, ocfg, /*train=*/false,
                         mix_seed({seed, 0x3A5CULL}), nullptr)
        .total;
  };
  const double err = grad_check(build, params.pretrain_parameters(), 1e-5, 40,
                                mix_seed({seed, 0xFDULL}));
  std::cout << "grad-check: max relative error " << err << " (threshold 1e-4)\n";
  return err < 1e-4 ? 0 : 1;
}

}  // namespace
}  // namespace ccbert

int main(int argc, char** argv) {
  using namespace ccbert;
  CLI::App app{"CCBERT code-change representation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON pipeline config; flags override it")
      ->capture_default_str();

  // extract-hunks
  auto* extract = app.add_subcommand("extract-hunks",
                                     "Extract hunk records from a commits JSONL file");
  std::string ex_in, ex_out;
  int ex_context = 3, ex_gap = 3, ex_threads = 0;
  extract->add_option("--in", ex_in, "Commits JSONL")->required();
  extract->add_option("--out", ex_out, "Output hunks JSONL")->required();
  extract->add_option("--context", ex_context, "Context lines per side")
      ->capture_default_str();
  extract->add_option("--gap-limit", ex_gap, "Max unchanged lines merged into one hunk")
      ->capture_default_str();
  extract->add_option("--threads", ex_threads, "Worker threads (0: CCBERT_THREADS or all)")
      ->capture_default_str();

  // train-bpe
  auto* bpe = app.add_subcommand("train-bpe", "Train a byte-level BPE vocabulary");
  std::string bpe_in, bpe_out;
  int64_t bpe_vocab = 4096;
  bpe->add_option("--in", bpe_in, "Hunks JSONL (snippets form the corpus)")->required();
  bpe->add_option("--out", bpe_out, "Output vocabulary file")->required();
  bpe->add_option("--vocab-size", bpe_vocab, "Total vocabulary size")
      ->capture_default_str();

  // encode-corpus
  auto* enc = app.add_subcommand("encode-corpus",
                                 "Tokenize and align hunks into instances");
  std::string enc_in, enc_vocab, enc_out;
  int64_t enc_max_len = 128;
  int enc_threads = 0;
  enc->add_option("--in", enc_in, "Hunks JSONL")->required();
  enc->add_option("--vocab", enc_vocab, "Vocabulary file")->required();
  enc->add_option("--out", enc_out, "Output instances JSONL")->required();
  enc->add_option("--max-len", enc_max_len, "Truncate instances to this length")
      ->capture_default_str();
  enc->add_option("--threads", enc_threads, "Worker threads (0: CCBERT_THREADS or all)")
      ->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pre-train with the four masked objectives");
  std::string pre_in, pre_vocab, pre_dir, pre_resume;
  int64_t pre_steps = -1, pre_batch = -1, pre_warmup = -1, pre_eval_every = -1;
  double pre_lr = -1.0;
  int64_t pre_seed = -1;
  pre->add_option("--in", pre_in, "Instances JSONL")->required();
  pre->add_option("--vocab", pre_vocab, "Vocabulary file")->required();
  pre->add_option("--out-dir", pre_dir, "Checkpoint/log directory")->required();
  pre->add_option("--resume", pre_resume, "Checkpoint to resume from");
  pre->add_option("--max-steps", pre_steps, "Schedule horizon / default stop step");
  int64_t pre_stop = -1;
  pre->add_option("--stop-after", pre_stop,
                  "Pause at this step; the LR schedule still spans max-steps");
  pre->add_option("--batch-size", pre_batch, "Instances per step");
  pre->add_option("--warmup-steps", pre_warmup, "LR warmup steps");
  pre->add_option("--peak-lr", pre_lr, "Peak learning rate");
  pre->add_option("--eval-every", pre_eval_every, "Checkpoint cadence");
  pre->add_option("--seed", pre_seed, "Random seed");

  // finetune
  auto* fin = app.add_subcommand("finetune", "Fine-tune a binary commit classifier");
  std::string fin_train, fin_val, fin_init, fin_vocab, fin_dir;
  int64_t fin_epochs = -1, fin_cap = -1, fin_seed = -1;
  double fin_lr = -1.0;
  fin->add_option("--train", fin_train, "Labeled instances JSONL")->required();
  fin->add_option("--val", fin_val, "Validation instances JSONL (else split from train)");
  fin->add_option("--init", fin_init, "Pre-trained checkpoint");
  fin->add_option("--vocab", fin_vocab, "Vocabulary file (random init)");
  fin->add_option("--out-dir", fin_dir, "Output directory")->required();
  fin->add_option("--epochs", fin_epochs, "Training epochs");
  fin->add_option("--lr", fin_lr, "Learning rate");
  fin->add_option("--hunk-cap", fin_cap, "Max hunks per commit");
  fin->add_option("--seed", fin_seed, "Random seed");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Compute metrics from predictions + labels");
  std::string ev_pred, ev_labels, ev_out;
  double ev_threshold = 0.5;
  ev->add_option("--pred", ev_pred, "Predictions JSONL (commit_id, score)")->required();
  ev->add_option("--labels", ev_labels, "JSONL with commit_id and label")->required();
  ev->add_option("--out", ev_out, "Output metrics JSON")->required();
  ev->add_option("--threshold", ev_threshold, "Decision threshold")
      ->capture_default_str();

  // predict
  auto* pr = app.add_subcommand("predict", "Score commits with a fine-tuned checkpoint");
  std::string pr_in, pr_ckpt, pr_out;
  int64_t pr_cap = 8;
  pr->add_option("--in", pr_in, "Instances JSONL")->required();
  pr->add_option("--ckpt", pr_ckpt, "Fine-tuned checkpoint")->required();
  pr->add_option("--out", pr_out, "Output predictions JSONL")->required();
  pr->add_option("--hunk-cap", pr_cap, "Max hunks per commit")->capture_default_str();

  // embed
  auto* em = app.add_subcommand("embed", "Export commit representation vectors");
  std::string em_in, em_ckpt, em_out;
  int64_t em_cap = 8;
  em->add_option("--in", em_in, "Instances JSONL")->required();
  em->add_option("--ckpt", em_ckpt, "Checkpoint")->required();
  em->add_option("--out", em_out, "Output embeddings JSONL")->required();
  em->add_option("--hunk-cap", em_cap, "Max hunks per commit")->capture_default_str();

  // grad-check
  auto* gc = app.add_subcommand("grad-check",
                                "Check analytic gradients of the combined loss");
  int64_t gc_d = 8, gc_layers = 1, gc_batch = 2;
  uint64_t gc_seed = 7;
  gc->add_option("--d", gc_d, "Embedding width")->capture_default_str();
  gc->add_option("--layers", gc_layers, "Encoder layers")->capture_default_str();
  gc->add_option("--batch", gc_batch, "Batch size")->capture_default_str();
  gc->add_option("--seed", gc_seed, "Random seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig pc = load_pipeline_config(config_path);

    if (extract->parsed()) {
      if (extract->count("--context")) pc.context = ex_context;
      if (extract->count("--gap-limit")) pc.gap_limit = ex_gap;
      return cmd_extract_hunks(ex_in, ex_out, pc, worker_count(ex_threads));
    }
    if (bpe->parsed()) {
      if (bpe->count("--vocab-size")) pc.vocab_size = bpe_vocab;
      return cmd_train_bpe(bpe_in, bpe_out, pc);
    }
    if (enc->parsed()) {
      if (enc->count("--max-len")) pc.encode_max_len = enc_max_len;
      return cmd_encode_corpus(enc_in, enc_vocab, enc_out, pc, worker_count(enc_threads));
    }
    if (pre->parsed()) {
      if (pre->count("--max-steps")) pc.pretrain.max_steps = pre_steps;
      if (pre->count("--stop-after")) pc.pretrain.stop_after = pre_stop;
      if (pre->count("--batch-size")) pc.pretrain.batch_size = pre_batch;
      if (pre->count("--warmup-steps")) pc.pretrain.warmup_steps = pre_warmup;
      if (pre->count("--peak-lr")) pc.pretrain.peak_lr = pre_lr;
      if (pre->count("--eval-every")) pc.pretrain.eval_every = pre_eval_every;
      if (pre->count("--seed")) pc.pretrain.seed = static_cast<uint64_t>(pre_seed);
      return cmd_pretrain(pre_in, pre_vocab, pre_dir, pre_resume, pc);
    }
    if (fin->parsed()) {
      if (fin->count("--epochs")) pc.finetune.epochs = fin_epochs;
      if (fin->count("--lr")) pc.finetune.lr = fin_lr;
      if (fin->count("--hunk-cap")) pc.finetune.hunk_cap = fin_cap;
      if (fin->count("--seed")) pc.finetune.seed = static_cast<uint64_t>(fin_seed);
      return cmd_finetune(fin_train, fin_val, fin_init, fin_vocab, fin_dir, pc);
    }
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_labels, ev_out, ev_threshold);
    if (pr->parsed()) return cmd_predict(pr_in, pr_ckpt, pr_out, pr_cap);
    if (em->parsed()) return cmd_embed(em_in, em_ckpt, em_out, em_cap);
    if (gc->parsed()) return cmd_grad_check(gc_d, gc_layers, gc_batch, gc_seed);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
