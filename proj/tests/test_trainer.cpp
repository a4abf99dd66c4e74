#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "ccbert/trainer.hpp"
#include "testutil.hpp"

using namespace ccbert;

namespace {

struct TinySetup {
  Vocab vocab;
  std::vector<Instance> instances;
  ModelConfig mcfg;
};

TinySetup tiny_setup(int64_t n_commits = 40, uint64_t seed = 0x7e57) {
  TinySetup s;
  const auto commits = testutil::toy_commits(n_commits, seed, false);
  const auto hunks = testutil::commits_to_hunks(commits);
  s.vocab = testutil::vocab_from_hunks(hunks, 300);
  s.instances = testutil::encode_hunks(hunks, s.vocab, 48);
  s.mcfg.d = 16;
  s.mcfg.layers = 1;
  s.mcfg.heads = 2;
  s.mcfg.ffn_mult = 2;
  s.mcfg.max_len = 48;
  s.mcfg.vocab_code = s.vocab.size();
  s.mcfg.dropout = 0.1;
  return s;
}

TrainConfig tiny_train(const std::string& dir = "") {
  TrainConfig t;
  t.batch_size = 4;
  t.peak_lr = 3e-4;
  t.warmup_steps = 4;
  t.max_steps = 12;
  t.eval_every = 6;
  t.seed = 5;
  t.checkpoint_dir = dir;
  return t;
}

std::string fresh_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("ccbert_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("lr_schedule: endpoints, peak, and the hand-computed midpoint") {
  CHECK(lr_schedule(0, 3e-4, 100, 300) == 0.0);
  CHECK(lr_schedule(100, 3e-4, 100, 300) == doctest::Approx(3e-4));
  CHECK(lr_schedule(200, 3e-4, 100, 300) == doctest::Approx(1.5e-4));
  CHECK(lr_schedule(300, 3e-4, 100, 300) == doctest::Approx(0.0));
  CHECK_THROWS_AS(lr_schedule(301, 3e-4, 100, 300), Error);
}

TEST_CASE("lr_schedule is continuous, piecewise linear, and peaks at warmup") {
  const double peak = 2e-3;
  double prev = lr_schedule(0, peak, 7, 50);
  double max_seen = prev;
  for (int64_t s = 1; s <= 50; ++s) {
    const double lr = lr_schedule(s, peak, 7, 50);
    const double slope = lr - prev;
    const double expect_slope = s <= 7 ? peak / 7 : -peak / 43;
    CHECK(slope == doctest::Approx(expect_slope).epsilon(1e-9));
    max_seen = std::max(max_seen, lr);
    prev = lr;
  }
  CHECK(max_seen == doctest::Approx(peak));
}

TEST_CASE("pretrain: empty corpus is an error") {
  const TinySetup s = tiny_setup(4);
  CHECK_THROWS_AS(pretrain({}, s.mcfg, tiny_train()), Error);
  try {
    pretrain({}, s.mcfg, tiny_train());
    FAIL("expected EmptyCorpus");
  } catch (const Error& e) {
    CHECK(e.kind() == "EmptyCorpus");
  }
}

TEST_CASE("pretrain: fixed seed gives identical loss logs; losses are finite") {
  const TinySetup s = tiny_setup();
  const PretrainResult a = pretrain(s.instances, s.mcfg, tiny_train());
  const PretrainResult b = pretrain(s.instances, s.mcfg, tiny_train());
  REQUIRE(a.log.size() == 12);
  REQUIRE(b.log.size() == 12);
  for (size_t i = 0; i < a.log.size(); ++i) {
    CHECK(loss_log_line(a.log[i]) == loss_log_line(b.log[i]));
    CHECK(std::isfinite(a.log[i].total));
    CHECK(a.log[i].total > 0.0);
    CHECK(a.log[i].total ==
          doctest::Approx(a.log[i].mup + a.log[i].mnp + a.log[i].mop + a.log[i].mep)
              .epsilon(1e-5));
  }
}

TEST_CASE("pretrain: resuming from a checkpoint reproduces the uninterrupted log") {
  const TinySetup s = tiny_setup();
  const std::string full_dir = fresh_dir("full");
  const std::string half_dir = fresh_dir("half");

  TrainConfig full = tiny_train(full_dir);
  const PretrainResult uninterrupted = pretrain(s.instances, s.mcfg, full);

  // same 12-step schedule, paused after step 6
  TrainConfig half = tiny_train(half_dir);
  half.stop_after = 6;
  const PretrainResult first_half = pretrain(s.instances, s.mcfg, half);
  REQUIRE(!first_half.final_checkpoint.empty());

  TrainConfig second = tiny_train(half_dir);
  const PretrainResult second_half =
      pretrain(s.instances, s.mcfg, second, first_half.final_checkpoint);

  REQUIRE(second_half.log.size() == 6);
  for (size_t i = 0; i < 6; ++i) {
    CHECK(loss_log_line(second_half.log[i]) == loss_log_line(uninterrupted.log[6 + i]));
  }
  std::filesystem::remove_all(full_dir);
  std::filesystem::remove_all(half_dir);
}

TEST_CASE("pretrain: round-robin cycles one objective per step") {
  const TinySetup s = tiny_setup(10);
  TrainConfig t = tiny_train();
  t.max_steps = 4;
  t.warmup_steps = 2;
  t.round_robin = true;
  const PretrainResult r = pretrain(s.instances, s.mcfg, t);
  REQUIRE(r.log.size() == 4);
  CHECK(r.log[0].mup > 0.0);
  CHECK(r.log[0].mnp == 0.0);
  CHECK(r.log[1].mnp > 0.0);
  CHECK(r.log[1].mup == 0.0);
  CHECK(r.log[2].mop > 0.0);
  CHECK(r.log[3].mep > 0.0);
}

TEST_CASE("checkpoint save -> load -> predict is bit-identical") {
  const TinySetup s = tiny_setup();
  const std::string dir = fresh_dir("ckpt_predict");
  TrainConfig t = tiny_train(dir);
  t.max_steps = 6;
  t.eval_every = 6;
  const PretrainResult r = pretrain(s.instances, s.mcfg, t);
  REQUIRE(!r.final_checkpoint.empty());

  std::vector<Commit> commits = group_by_commit(s.instances);
  LoadedCheckpoint l1 = load_checkpoint(r.final_checkpoint);
  LoadedCheckpoint l2 = load_checkpoint(r.final_checkpoint);
  const auto s1 = predict(commits, l1.params, 8);
  const auto s2 = predict(commits, l2.params, 8);
  CHECK(s1 == s2);  // bitwise equality of doubles
  for (double v : s1) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("predict: duplicated commit gets an identical score") {
  const TinySetup s = tiny_setup(10);
  ModelParams<float> params = init_params<float>(s.mcfg, 3);
  std::vector<Commit> commits = group_by_commit(s.instances);
  REQUIRE(commits.size() >= 2);
  std::vector<Commit> doubled{commits[0], commits[1], commits[0]};
  const auto scores = predict(doubled, params, 8);
  CHECK(scores[0] == scores[2]);
}

TEST_CASE("predict rejects ids outside the vocabulary") {
  const TinySetup s = tiny_setup(6);
  ModelParams<float> params = init_params<float>(s.mcfg, 4);
  std::vector<Commit> commits = group_by_commit(s.instances);
  commits[0].hunks[0].old_ids[0] = static_cast<int32_t>(s.mcfg.vocab_code) + 5;
  try {
    predict(commits, params, 8);
    FAIL("expected VocabMismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == "VocabMismatch");
  }
}

TEST_CASE("commit vectors: single-hunk commit equals its pooled hunk vector") {
  const TinySetup s = tiny_setup(10);
  ModelParams<float> params = init_params<float>(s.mcfg, 5);
  std::vector<Commit> commits = group_by_commit(s.instances);
  auto it = std::find_if(commits.begin(), commits.end(),
                         [](const Commit& c) { return c.hunks.size() == 1; });
  REQUIRE(it != commits.end());

  const auto vectors = commit_vectors({*it}, params, 8);
  REQUIRE(vectors.size() == 1);

  // reference: pool the single hunk directly
  const PaddedBatch pb = pad_batch({&it->hunks[0]});
  Tape<float> tape;
  auto h = encode(tape, embed_input(tape, pb, params), pb, params);
  auto pooled = pool_mean(tape, h, pb);
  for (int64_t c = 0; c < s.mcfg.d; ++c) {
    CHECK(vectors[0][static_cast<size_t>(c)] ==
          doctest::Approx(pooled->data[static_cast<size_t>(c)]).epsilon(1e-6));
  }
}

TEST_CASE("commit vectors: the hunk cap keeps only the first H_max hunks") {
  const TinySetup s = tiny_setup(10);
  ModelParams<float> params = init_params<float>(s.mcfg, 6);
  std::vector<Commit> commits = group_by_commit(s.instances);

  Commit many;
  many.commit_id = "many";
  many.label = 1;
  Rng rng(8);
  while (many.hunks.size() < 10) {
    for (const Commit& c : commits) {
      for (const AlignedChange& h : c.hunks) {
        if (many.hunks.size() < 10) many.hunks.push_back(h);
      }
    }
  }
  Commit first8 = many;
  first8.hunks.resize(8);
  const auto va = commit_vectors({many}, params, 8);
  const auto vb = commit_vectors({first8}, params, 8);
  CHECK(va[0] == vb[0]);
}

TEST_CASE("finetune: label and hunk validation, best-epoch selection") {
  const TinySetup s = tiny_setup(24);
  std::vector<Commit> commits = group_by_commit(s.instances);
  Rng rng(17);
  for (Commit& c : commits) c.label = rng.uniform01() < 0.5 ? 1 : 0;
  // make sure both classes exist in the tail (chronological split)
  commits[commits.size() - 1].label = 1;
  commits[commits.size() - 2].label = 0;
  commits[commits.size() - 3].label = 1;
  commits[commits.size() - 4].label = 0;

  FinetuneConfig f;
  f.epochs = 2;
  f.batch_size = 4;
  f.val_fraction = 0.25;
  f.seed = 3;

  SUBCASE("missing label is an error") {
    std::vector<Commit> broken = commits;
    broken[2].label.reset();
    try {
      finetune(broken, {}, init_params<float>(s.mcfg, 7), f);
      FAIL("expected LabelMissing");
    } catch (const Error& e) {
      CHECK(e.kind() == "LabelMissing");
    }
  }

  SUBCASE("training runs and reports one eval per epoch") {
    const FinetuneResult r = finetune(commits, {}, init_params<float>(s.mcfg, 7), f);
    REQUIRE(r.history.size() == 2);
    CHECK(r.best_epoch >= 1);
    CHECK(r.best_value ==
          doctest::Approx(std::max(r.history[0].selection_value,
                                   r.history[1].selection_value)));
    for (const EpochEval& e : r.history) {
      CHECK(e.eval.auc_roc >= 0.0);
      CHECK(e.eval.auc_roc <= 1.0);
    }
  }
}

TEST_CASE("finetune: stratified split puts both classes in validation") {
  const TinySetup s = tiny_setup(24);
  std::vector<Commit> commits = group_by_commit(s.instances);
  // adversarial label order: all zeros first, ones last
  for (size_t i = 0; i < commits.size(); ++i) {
    commits[i].label = i < commits.size() / 2 ? 0 : 1;
  }
  FinetuneConfig f;
  f.epochs = 1;
  f.batch_size = 4;
  f.val_fraction = 0.2;
  f.split = "stratified";
  const FinetuneResult r = finetune(commits, {}, init_params<float>(s.mcfg, 9), f);
  CHECK(r.history.size() == 1);  // auc_roc computed => both classes were present
}
