#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ccbert/align.hpp"
#include "ccbert/model.hpp"
#include "ccbert/rng.hpp"
#include "ccbert/tensor.hpp"
#include "ccbert/tokenizer.hpp"

namespace ccbert {

enum class Objective : int32_t { kMup = 0, kMnp = 1, kMop = 2, kMep = 3 };

inline const char* objective_name(Objective o) {
  switch (o) {
    case Objective::kMup: return "mup";
    case Objective::kMnp: return "mnp";
    case Objective::kMop: return "mop";
    case Objective::kMep: return "mep";
  }
  return "?";
}

enum class Stream : int32_t { kOld = 0, kNew = 1, kEdit = 2 };

struct MaskTarget {
  int64_t position;
  Stream stream;
  int32_t true_id;
};

// A masked copy of an AlignedChange plus the positions/labels the model must
// reconstruct. MUP masks all three streams at the same positions, MNP only
// the new stream, MOP only the old stream, MEP every edit action.
struct MaskedView {
  Objective objective;
  AlignedChange input;  // old_in / new_in / edit_in
  std::vector<MaskTarget> targets;
};

// K = max(1, round(rate * effective_len)) distinct positions drawn uniformly
// without replacement from [0, effective_len).
inline std::vector<int64_t> sample_mask_positions(int64_t effective_len, double rate,
                                                  Rng& rng) {
  if (effective_len < 1) fail("BadConfig", "sample_mask_positions: empty instance");
  int64_t k = std::llround(rate * static_cast<double>(effective_len));
  if (k < 1) k = 1;
  if (k > effective_len) k = effective_len;
  return rng.sample_without_replacement(effective_len, k);
}

inline MaskedView make_view(const AlignedChange& ac, Objective objective, Rng& rng,
                            double mask_rate = 0.15) {
  MaskedView view;
  view.objective = objective;
  view.input = ac;
  const int64_t len = ac.length();

  auto mask_old = [&](int64_t p) {
    view.targets.push_back({p, Stream::kOld, ac.old_ids[static_cast<size_t>(p)]});
    view.input.old_ids[static_cast<size_t>(p)] = Vocab::kMask;
  };
  auto mask_new = [&](int64_t p) {
    view.targets.push_back({p, Stream::kNew, ac.new_ids[static_cast<size_t>(p)]});
    view.input.new_ids[static_cast<size_t>(p)] = Vocab::kMask;
  };
  auto mask_edit = [&](int64_t p) {
    view.targets.push_back({p, Stream::kEdit, ac.edit_ids[static_cast<size_t>(p)]});
    view.input.edit_ids[static_cast<size_t>(p)] = kEditMaskId;
  };

  switch (objective) {
    case Objective::kMup:
      for (int64_t p : sample_mask_positions(len, mask_rate, rng)) {
        mask_old(p);
        mask_new(p);
        mask_edit(p);
      }
      break;
    case Objective::kMnp:
      for (int64_t p : sample_mask_positions(len, mask_rate, rng)) mask_new(p);
      break;
    case Objective::kMop:
      for (int64_t p : sample_mask_positions(len, mask_rate, rng)) mask_old(p);
      break;
    case Objective::kMep:
      for (int64_t p = 0; p < len; ++p) mask_edit(p);
      break;
  }
  return view;
}

struct ObjectiveConfig {
  bool mup = true;
  bool mnp = true;
  bool mop = true;
  bool mep = true;
  double mask_rate = 0.15;

  bool enabled(Objective o) const {
    switch (o) {
      case Objective::kMup: return mup;
      case Objective::kMnp: return mnp;
      case Objective::kMop: return mop;
      case Objective::kMep: return mep;
    }
    return false;
  }
  int count_enabled() const { return mup + mnp + mop + mep; }
};

// Loss of one objective over a batch of views, evaluated on full per-position
// head logits: sum over targets of -log p(true id), summed within each
// instance and averaged over the batch. Non-target positions are flagged with
// each stream's PAD id, which cross entropy ignores.
template <typename Real>
TensorPtr<Real> objective_loss(Tape<Real>& tape, const std::vector<MaskedView>& views,
                               const HeadLogits<Real>& logits) {
  const int64_t bsz = logits.edit_logits->shape[0];
  const int64_t len = logits.edit_logits->shape[1];
  if (static_cast<int64_t>(views.size()) != bsz) {
    fail("ShapeMismatch", "objective_loss: " + std::to_string(views.size()) +
                              " views vs batch " + std::to_string(bsz));
  }
  std::vector<int32_t> old_t(static_cast<size_t>(bsz * len), Vocab::kPad);
  std::vector<int32_t> new_t(static_cast<size_t>(bsz * len), Vocab::kPad);
  std::vector<int32_t> edit_t(static_cast<size_t>(bsz * len), kEditPadId);
  bool any_old = false, any_new = false, any_edit = false;
  for (int64_t b = 0; b < bsz; ++b) {
    for (const MaskTarget& t : views[static_cast<size_t>(b)].targets) {
      const size_t at = static_cast<size_t>(b * len + t.position);
      switch (t.stream) {
        case Stream::kOld: old_t[at] = t.true_id; any_old = true; break;
        case Stream::kNew: new_t[at] = t.true_id; any_new = true; break;
        case Stream::kEdit: edit_t[at] = t.true_id; any_edit = true; break;
      }
    }
  }

  const int64_t vcode = logits.old_logits->shape[2];
  TensorPtr<Real> total;
  auto accumulate = [&](const TensorPtr<Real>& term) {
    total = total ? tape.add(total, term) : term;
  };
  if (any_old) {
    accumulate(tape.cross_entropy_sum(tape.reshape(logits.old_logits, {bsz * len, vcode}),
                                      old_t, Vocab::kPad));
  }
  if (any_new) {
    accumulate(tape.cross_entropy_sum(tape.reshape(logits.new_logits, {bsz * len, vcode}),
                                      new_t, Vocab::kPad));
  }
  if (any_edit) {
    accumulate(tape.cross_entropy_sum(
        tape.reshape(logits.edit_logits, {bsz * len, kEditClassCount}), edit_t,
        kEditPadId));
  }
  if (!total) fail("BadConfig", "objective_loss: views carry no targets");
  return tape.scale(total, static_cast<Real>(1.0 / static_cast<double>(bsz)));
}

template <typename Real>
struct CombinedLoss {
  TensorPtr<Real> total;                  // scalar graph node
  std::array<double, 4> values{};         // per-objective batch means (0 if disabled)
  std::array<int64_t, 4> target_counts{};
};

// One full pre-training loss evaluation: builds the enabled objectives' views
// (independent seed streams per objective and instance), runs one forward
// pass per objective, and sums the losses. Head projections are evaluated
// only at target positions, which is algebraically identical to projecting
// every position and ignoring the rest.
template <typename Real>
CombinedLoss<Real> combined_loss(Tape<Real>& tape,
                                 const std::vector<const AlignedChange*>& batch,
                                 ModelParams<Real>& mp, const ObjectiveConfig& cfg,
                                 bool train, uint64_t mask_seed, Rng* dropout_rng) {
  if (batch.empty()) fail("EmptyCorpus", "combined_loss: empty batch");
  if (cfg.count_enabled() == 0) {
    fail("ConfigNoObjectives", "combined_loss: all four objectives disabled");
  }

  CombinedLoss<Real> out;
  const auto bsz = static_cast<int64_t>(batch.size());

  for (Objective obj :
       {Objective::kMup, Objective::kMnp, Objective::kMop, Objective::kMep}) {
    if (!cfg.enabled(obj)) continue;
    const auto oi = static_cast<size_t>(obj);

    std::vector<MaskedView> views;
    views.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
      Rng rng(mix_seed({mask_seed, static_cast<uint64_t>(obj), i}));
      views.push_back(make_view(*batch[i], obj, rng, cfg.mask_rate));
    }

    std::vector<const AlignedChange*> inputs;
    inputs.reserve(views.size());
    for (const MaskedView& v : views) inputs.push_back(&v.input);
    const PaddedBatch pb = pad_batch(inputs);

    auto x = embed_input(tape, pb, mp);
    auto h = encode(tape, x, pb, mp, train, dropout_rng);
    auto flat = tape.reshape(h, {pb.batch * pb.length, mp.config.d});

    std::vector<int64_t> rows_old, rows_new, rows_edit;
    std::vector<int32_t> t_old, t_new, t_edit;
    for (int64_t b = 0; b < pb.batch; ++b) {
      for (const MaskTarget& t : views[static_cast<size_t>(b)].targets) {
        const int64_t row = b * pb.length + t.position;
        switch (t.stream) {
          case Stream::kOld: rows_old.push_back(row); t_old.push_back(t.true_id); break;
          case Stream::kNew: rows_new.push_back(row); t_new.push_back(t.true_id); break;
          case Stream::kEdit: rows_edit.push_back(row); t_edit.push_back(t.true_id); break;
        }
      }
    }

    TensorPtr<Real> sum;
    auto accumulate = [&](const TensorPtr<Real>& term) {
      sum = sum ? tape.add(sum, term) : term;
    };
    const bool tied = mp.config.tie_heads;
    if (!rows_old.empty()) {
      auto gathered = tape.gather_rows(flat, rows_old);
      auto logits = head_project(tape, gathered, mp, mp.head_old_w, mp.head_old_b, tied);
      accumulate(tape.cross_entropy_sum(logits, t_old, -1));
    }
    if (!rows_new.empty()) {
      auto gathered = tape.gather_rows(flat, rows_new);
      auto logits = head_project(tape, gathered, mp, mp.head_new_w, mp.head_new_b, tied);
      accumulate(tape.cross_entropy_sum(logits, t_new, -1));
    }
    if (!rows_edit.empty()) {
      auto gathered = tape.gather_rows(flat, rows_edit);
      auto logits =
          head_project(tape, gathered, mp, mp.head_edit_w, mp.head_edit_b, false);
      accumulate(tape.cross_entropy_sum(logits, t_edit, -1));
    }

    auto value = tape.scale(sum, static_cast<Real>(1.0 / static_cast<double>(bsz)));
    out.values[oi] = static_cast<double>(value->data[0]);
    out.target_counts[oi] =
        static_cast<int64_t>(rows_old.size() + rows_new.size() + rows_edit.size());
    out.total = out.total ? tape.add(out.total, value) : value;
  }
  return out;
}

}  // namespace ccbert
