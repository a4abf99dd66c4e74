#include "doctest.h"

#include <cmath>
#include <map>

#include "ccbert/objectives.hpp"
#include "ccbert/rng.hpp"
#include "testutil.hpp"

using namespace ccbert;

namespace {

ModelConfig tiny_config(int64_t vocab = 24) {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_len = 24;
  cfg.vocab_code = vocab;
  cfg.dropout = 0.0;
  return cfg;
}

AlignedChange make_change(int64_t len, Rng& rng, int64_t vocab = 24) {
  std::vector<int32_t> old_ids, new_ids;
  for (int64_t i = 0; i < len; ++i) {
    old_ids.push_back(4 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab - 4))));
  }
  new_ids = old_ids;
  if (!new_ids.empty()) {
    new_ids[rng.below(new_ids.size())] =
        4 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab - 4)));
  }
  return align_triples(old_ids, new_ids);
}

}  // namespace

TEST_CASE("sample_mask_positions: K follows round(rate*L) with a floor of one") {
  Rng rng(1);
  CHECK(sample_mask_positions(20, 0.15, rng).size() == 3);
  CHECK(sample_mask_positions(3, 0.15, rng).size() == 1);
  CHECK(sample_mask_positions(1, 0.15, rng).size() == 1);
  CHECK(sample_mask_positions(10, 0.15, rng).size() == 2);  // round(1.5)
}

TEST_CASE("sample_mask_positions: positions are distinct and in range") {
  Rng rng(2);
  for (int iter = 0; iter < 100; ++iter) {
    const auto q = sample_mask_positions(17, 0.3, rng);
    for (size_t i = 0; i < q.size(); ++i) {
      CHECK(q[i] >= 0);
      CHECK(q[i] < 17);
      if (i > 0) CHECK(q[i] > q[i - 1]);
    }
  }
}

TEST_CASE("sample_mask_positions: per-position frequency is near the rate") {
  Rng rng(3);
  const int64_t len = 20, draws = 10000;
  std::vector<int64_t> hits(len, 0);
  for (int64_t d = 0; d < draws; ++d) {
    for (int64_t p : sample_mask_positions(len, 0.15, rng)) ++hits[static_cast<size_t>(p)];
  }
  for (int64_t p = 0; p < len; ++p) {
    const double freq = static_cast<double>(hits[static_cast<size_t>(p)]) / draws;
    CHECK(freq == doctest::Approx(0.15).epsilon(0.15));  // 0.15 +- 0.02 absolute
    CHECK(std::abs(freq - 0.15) < 0.02);
  }
}

TEST_CASE("make_view MEP: every edit masked, code streams untouched") {
  Rng gen(4);
  const AlignedChange ac = make_change(5, gen);
  Rng rng(5);
  const MaskedView view = make_view(ac, Objective::kMep, rng);
  CHECK(view.input.old_ids == ac.old_ids);
  CHECK(view.input.new_ids == ac.new_ids);
  CHECK(view.targets.size() == 5);
  for (int32_t e : view.input.edit_ids) CHECK(e == kEditMaskId);
  for (const MaskTarget& t : view.targets) {
    CHECK(t.stream == Stream::kEdit);
    CHECK(t.true_id == ac.edit_ids[static_cast<size_t>(t.position)]);
  }
}

TEST_CASE("make_view MUP: all three streams masked at the sampled positions") {
  Rng gen(6);
  const AlignedChange ac = make_change(7, gen);
  Rng rng(7);
  const MaskedView view = make_view(ac, Objective::kMup, rng);
  REQUIRE(view.targets.size() % 3 == 0);
  std::map<int64_t, int> per_position;
  for (const MaskTarget& t : view.targets) ++per_position[t.position];
  for (const auto& [pos, count] : per_position) {
    CHECK(count == 3);
    CHECK(view.input.old_ids[static_cast<size_t>(pos)] == Vocab::kMask);
    CHECK(view.input.new_ids[static_cast<size_t>(pos)] == Vocab::kMask);
    CHECK(view.input.edit_ids[static_cast<size_t>(pos)] == kEditMaskId);
  }
}

TEST_CASE("make_view stream isolation: MNP leaves old and edit untouched (property)") {
  Rng gen(8);
  for (int iter = 0; iter < 50; ++iter) {
    const AlignedChange ac = make_change(4 + gen.below(10), gen);
    Rng rng(100 + iter);
    const MaskedView mnp = make_view(ac, Objective::kMnp, rng);
    CHECK(mnp.input.old_ids == ac.old_ids);
    CHECK(mnp.input.edit_ids == ac.edit_ids);
    Rng rng2(200 + iter);
    const MaskedView mop = make_view(ac, Objective::kMop, rng2);
    CHECK(mop.input.new_ids == ac.new_ids);
    CHECK(mop.input.edit_ids == ac.edit_ids);
    for (const MaskTarget& t : mop.targets) CHECK(t.stream == Stream::kOld);
  }
}

TEST_CASE("objective_loss: uniform logits make MEP cost L*ln(4) per instance") {
  Rng gen(9);
  const AlignedChange ac = make_change(6, gen);
  Rng rng(10);
  const std::vector<MaskedView> views{make_view(ac, Objective::kMep, rng)};

  Tape<double> tape;
  HeadLogits<double> logits;
  logits.old_logits = make_tensor<double>({1, 6, 24});
  logits.new_logits = make_tensor<double>({1, 6, 24});
  logits.edit_logits = make_tensor<double>({1, 6, 4});
  auto loss = objective_loss(tape, views, logits);
  CHECK(loss->data[0] == doctest::Approx(6.0 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("objective_loss: hand-computed softmax arithmetic on two targets") {
  AlignedChange ac;
  ac.old_ids = {5, 6};
  ac.new_ids = {5, 6};
  ac.edit_ids = {0, 0};
  Rng rng(11);
  std::vector<MaskedView> views{make_view(ac, Objective::kMep, rng)};

  Tape<double> tape;
  HeadLogits<double> logits;
  logits.old_logits = make_tensor<double>({1, 2, 24});
  logits.new_logits = make_tensor<double>({1, 2, 24});
  logits.edit_logits = make_tensor<double>({1, 2, 4});
  // both rows get logits [1, 0, 0, 0] with true class 0
  logits.edit_logits->data[0] = 1.0;
  logits.edit_logits->data[4] = 1.0;
  auto loss = objective_loss(tape, views, logits);
  const double per_target = -std::log(std::exp(1.0) / (std::exp(1.0) + 3.0));
  CHECK(per_target == doctest::Approx(0.7437).epsilon(1e-3));
  CHECK(loss->data[0] == doctest::Approx(2.0 * per_target).epsilon(1e-12));
}

TEST_CASE("objective_loss goes to zero for perfect logits") {
  AlignedChange ac;
  ac.old_ids = {5};
  ac.new_ids = {7};
  ac.edit_ids = {3};
  Rng rng(12);
  std::vector<MaskedView> views{make_view(ac, Objective::kMep, rng)};
  Tape<double> tape;
  HeadLogits<double> logits;
  logits.old_logits = make_tensor<double>({1, 1, 24});
  logits.new_logits = make_tensor<double>({1, 1, 24});
  logits.edit_logits = make_tensor<double>({1, 1, 4});
  logits.edit_logits->data[3] = 50.0;  // huge margin on the true class
  auto loss = objective_loss(tape, views, logits);
  CHECK(loss->data[0] < 1e-12);
}

TEST_CASE("combined_loss: disabling everything is an error, one objective stands alone") {
  const ModelConfig cfg = tiny_config();
  ModelParams<double> mp = init_params<double>(cfg, 13);
  Rng gen(14);
  const AlignedChange a = make_change(6, gen);
  const AlignedChange b = make_change(9, gen);
  const std::vector<const AlignedChange*> batch{&a, &b};

  SUBCASE("no objectives") {
    ObjectiveConfig none;
    none.mup = none.mnp = none.mop = none.mep = false;
    Tape<double> tape;
    try {
      combined_loss(tape, batch, mp, none, false, 1, nullptr);
      FAIL("expected ConfigNoObjectives");
    } catch (const Error& e) {
      CHECK(e.kind() == "ConfigNoObjectives");
    }
  }

  SUBCASE("single objective equals its standalone value") {
    ObjectiveConfig only_mep;
    only_mep.mup = only_mep.mnp = only_mep.mop = false;
    Tape<double> tape;
    auto r = combined_loss(tape, batch, mp, only_mep, false, 1, nullptr);
    CHECK(r.total->data[0] == doctest::Approx(r.values[3]).epsilon(1e-12));
    CHECK(r.values[0] == 0.0);
    CHECK(r.target_counts[3] == a.length() + b.length());
  }
}

TEST_CASE("combined_loss total equals the sum of separately computed objectives") {
  const ModelConfig cfg = tiny_config();
  ModelParams<double> mp = init_params<double>(cfg, 15);
  Rng gen(16);
  const AlignedChange a = make_change(5, gen);
  const AlignedChange b = make_change(8, gen);
  const std::vector<const AlignedChange*> batch{&a, &b};
  const uint64_t mask_seed = 77;

  Tape<double> tape;
  const auto all = combined_loss(tape, batch, mp, ObjectiveConfig{}, false, mask_seed,
                                 nullptr);

  double sum = 0.0;
  for (Objective obj :
       {Objective::kMup, Objective::kMnp, Objective::kMop, Objective::kMep}) {
    ObjectiveConfig one;
    one.mup = obj == Objective::kMup;
    one.mnp = obj == Objective::kMnp;
    one.mop = obj == Objective::kMop;
    one.mep = obj == Objective::kMep;
    Tape<double> t;
    sum += combined_loss(t, batch, mp, one, false, mask_seed, nullptr).total->data[0];
  }
  CHECK(all.total->data[0] == doctest::Approx(sum).epsilon(1e-9));
}

TEST_CASE("gathered-head path agrees with full predict_heads + objective_loss") {
  const ModelConfig cfg = tiny_config();
  ModelParams<double> mp = init_params<double>(cfg, 17);
  Rng gen(18);
  const AlignedChange a = make_change(7, gen);
  const AlignedChange b = make_change(4, gen);
  const std::vector<const AlignedChange*> batch{&a, &b};
  const uint64_t mask_seed = 99;

  for (Objective obj :
       {Objective::kMup, Objective::kMnp, Objective::kMop, Objective::kMep}) {
    ObjectiveConfig one;
    one.mup = obj == Objective::kMup;
    one.mnp = obj == Objective::kMnp;
    one.mop = obj == Objective::kMop;
    one.mep = obj == Objective::kMep;

    Tape<double> t1;
    const double gathered =
        combined_loss(t1, batch, mp, one, false, mask_seed, nullptr).total->data[0];

    // full-logit route, replicating the same views
    std::vector<MaskedView> views;
    std::vector<const AlignedChange*> inputs;
    for (size_t i = 0; i < batch.size(); ++i) {
      Rng rng(mix_seed({mask_seed, static_cast<uint64_t>(obj), i}));
      views.push_back(make_view(*batch[i], obj, rng, one.mask_rate));
    }
    for (const MaskedView& v : views) inputs.push_back(&v.input);
    const PaddedBatch pb = pad_batch(inputs);
    Tape<double> t2;
    auto h = encode(t2, embed_input(t2, pb, mp), pb, mp);
    auto full = objective_loss(t2, views, predict_heads(t2, h, mp));
    CHECK(gathered == doctest::Approx(full->data[0]).epsilon(1e-9));
  }
}

TEST_CASE("combined_loss is independent of batch padding companions") {
  const ModelConfig cfg = tiny_config();
  ModelParams<double> mp = init_params<double>(cfg, 19);
  Rng gen(20);
  const AlignedChange a = make_change(4, gen);

  ObjectiveConfig only_mep;
  only_mep.mup = only_mep.mnp = only_mep.mop = false;

  Tape<double> t1;
  const std::vector<const AlignedChange*> solo{&a};
  const double alone =
      combined_loss(t1, solo, mp, only_mep, false, 5, nullptr).values[3];

  AlignedChange longer = make_change(12, gen);
  Tape<double> t2;
  const std::vector<const AlignedChange*> pair{&a, &longer};
  auto r = combined_loss(t2, pair, mp, only_mep, false, 5, nullptr);

  // recompute instance a's own target-sum from the pairwise run: target sums
  // are additive, so 2*mean(pair) - sum(longer alone) must equal sum(a alone)
  Tape<double> t3;
  const std::vector<const AlignedChange*> solo_b{&longer};
  const double longer_alone =
      combined_loss(t3, solo_b, mp, only_mep, false, 5, nullptr).values[3];
  CHECK(2.0 * r.values[3] - longer_alone == doctest::Approx(alone).epsilon(1e-7));
}

TEST_CASE("fresh initialization scores near-uniform losses") {
  const ModelConfig cfg = tiny_config(64);
  ModelParams<double> mp = init_params<double>(cfg, 21);
  Rng gen(22);
  std::vector<AlignedChange> changes;
  std::vector<const AlignedChange*> batch;
  for (int i = 0; i < 16; ++i) changes.push_back(make_change(10, gen, 64));
  for (const auto& c : changes) batch.push_back(&c);

  Tape<double> tape;
  auto r = combined_loss(tape, batch, mp, ObjectiveConfig{}, false, 23, nullptr);
  const double mep_per_target =
      r.values[3] * 16.0 / static_cast<double>(r.target_counts[3]);
  const double mnp_per_target =
      r.values[1] * 16.0 / static_cast<double>(r.target_counts[1]);
  CHECK(mep_per_target == doctest::Approx(std::log(4.0)).epsilon(0.05));
  CHECK(mnp_per_target == doctest::Approx(std::log(64.0)).epsilon(0.05));
}

TEST_CASE("NULL is a legal prediction target (MOP at insert positions)") {
  const std::vector<int32_t> old_ids{5, 6};
  const std::vector<int32_t> new_ids{5, 9, 6};
  const AlignedChange ac = align_triples(old_ids, new_ids);  // insert at position 1
  REQUIRE(ac.old_ids[1] == Vocab::kNull);

  // force MOP to mask the insert position by retrying seeds
  for (uint64_t seed = 0;; ++seed) {
    Rng rng(seed);
    const MaskedView view = make_view(ac, Objective::kMop, rng);
    REQUIRE(view.targets.size() == 1);
    if (view.targets[0].position == 1) {
      CHECK(view.targets[0].true_id == Vocab::kNull);
      break;
    }
    REQUIRE(seed < 1000);
  }
}
