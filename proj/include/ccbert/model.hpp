#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ccbert/align.hpp"
#include "ccbert/tensor.hpp"
#include "ccbert/tokenizer.hpp"

namespace ccbert {

struct ModelConfig {
  int64_t d = 128;        // embedding width
  int64_t layers = 2;     // encoder layers (N)
  int64_t heads = 4;      // attention heads
  int64_t ffn_mult = 4;   // FFN inner width multiplier
  int64_t max_len = 128;  // positions
  int64_t vocab_code = 0; // set from the trained vocabulary
  int64_t vocab_edit = kEditVocabSize;
  double dropout = 0.1;
  bool tie_heads = false;  // project token logits through C instead of W_old/W_new

  void validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0) {
      fail("BadConfig", "model: d (" + std::to_string(d) + ") must be divisible by heads (" +
                            std::to_string(heads) + ")");
    }
    if (layers < 0 || ffn_mult < 1 || max_len < 1) {
      fail("BadConfig", "model: layers/ffn_mult/max_len out of range");
    }
    if (vocab_code <= Vocab::kSpecialCount) {
      fail("BadConfig", "model: vocab_code must exceed the special token count");
    }
    if (vocab_edit != kEditVocabSize) {
      fail("BadConfig", "model: vocab_edit must be " + std::to_string(kEditVocabSize));
    }
    if (dropout < 0.0 || dropout >= 1.0) fail("BadConfig", "model: dropout outside [0, 1)");
  }
};

template <typename Real>
struct EncoderLayerParams {
  Parameter<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<Real> ln1_gain, ln1_bias;
  Parameter<Real> w1, b1, w2, b2;
  Parameter<Real> ln2_gain, ln2_bias;
};

template <typename Real>
struct ModelParams {
  ModelConfig config;
  Parameter<Real> code_embed;  // C: [V_code, d]
  Parameter<Real> edit_embed;  // E: [V_edit, d]
  Parameter<Real> pos_embed;   // P: [max_len, d]
  std::vector<EncoderLayerParams<Real>> layers;
  Parameter<Real> head_old_w, head_old_b;    // [d, V_code], [V_code]
  Parameter<Real> head_new_w, head_new_b;    // [d, V_code], [V_code]
  Parameter<Real> head_edit_w, head_edit_b;  // [d, 4], [4]
  Parameter<Real> cls_w, cls_b;              // [d, 2], [2]; fine-tuning only

  // Everything the pre-training objectives can touch. The classifier head is
  // excluded so pre-training neither updates nor decays it.
  std::vector<Parameter<Real>*> pretrain_parameters() {
    std::vector<Parameter<Real>*> ps = {&code_embed, &edit_embed, &pos_embed};
    for (auto& l : layers) {
      for (Parameter<Real>* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                                 &l.ln1_gain, &l.ln1_bias, &l.w1, &l.b1, &l.w2, &l.b2,
                                 &l.ln2_gain, &l.ln2_bias}) {
        ps.push_back(p);
      }
    }
    if (!config.tie_heads) {
      ps.push_back(&head_old_w);
      ps.push_back(&head_new_w);
    }
    ps.push_back(&head_old_b);
    ps.push_back(&head_new_b);
    ps.push_back(&head_edit_w);
    ps.push_back(&head_edit_b);
    return ps;
  }

  std::vector<Parameter<Real>*> all_parameters() {
    auto ps = pretrain_parameters();
    ps.push_back(&cls_w);
    ps.push_back(&cls_b);
    return ps;
  }

  void zero_grads() {
    for (Parameter<Real>* p : all_parameters()) zero_grad(p->value);
  }
};

// All weights from N(0, 0.02); layer-norm gains 1 and biases 0. The PAD row
// of C is exempted from weight decay.
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams<Real> mp;
  mp.config = cfg;

  Rng rng(mix_seed({seed, 0x1217ULL}));
  auto normal_param = [&](const std::string& name, Shape shape) {
    Parameter<Real> p = make_parameter<Real>(name, std::move(shape));
    for (Real& v : p.value->data) v = static_cast<Real>(0.02 * rng.normal());
    return p;
  };
  auto const_param = [&](const std::string& name, Shape shape, Real value) {
    Parameter<Real> p = make_parameter<Real>(name, std::move(shape));
    std::fill(p.value->data.begin(), p.value->data.end(), value);
    return p;
  };

  const int64_t d = cfg.d;
  mp.code_embed = normal_param("embed.code", {cfg.vocab_code, d});
  mp.code_embed.decay_mask.assign(mp.code_embed.value->data.size(), Real(1));
  for (int64_t c = 0; c < d; ++c) mp.code_embed.decay_mask[static_cast<size_t>(c)] = Real(0);
  mp.edit_embed = normal_param("embed.edit", {cfg.vocab_edit, d});
  mp.pos_embed = normal_param("embed.pos", {cfg.max_len, d});

  mp.layers.reserve(static_cast<size_t>(cfg.layers));
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    EncoderLayerParams<Real> lp;
    lp.wq = normal_param(prefix + "attn.wq", {d, d});
    lp.bq = const_param(prefix + "attn.bq", {d}, Real(0));
    lp.wk = normal_param(prefix + "attn.wk", {d, d});
    lp.bk = const_param(prefix + "attn.bk", {d}, Real(0));
    lp.wv = normal_param(prefix + "attn.wv", {d, d});
    lp.bv = const_param(prefix + "attn.bv", {d}, Real(0));
    lp.wo = normal_param(prefix + "attn.wo", {d, d});
    lp.bo = const_param(prefix + "attn.bo", {d}, Real(0));
    lp.ln1_gain = const_param(prefix + "ln1.gain", {d}, Real(1));
    lp.ln1_bias = const_param(prefix + "ln1.bias", {d}, Real(0));
    lp.w1 = normal_param(prefix + "ffn.w1", {d, cfg.ffn_mult * d});
    lp.b1 = const_param(prefix + "ffn.b1", {cfg.ffn_mult * d}, Real(0));
    lp.w2 = normal_param(prefix + "ffn.w2", {cfg.ffn_mult * d, d});
    lp.b2 = const_param(prefix + "ffn.b2", {d}, Real(0));
    lp.ln2_gain = const_param(prefix + "ln2.gain", {d}, Real(1));
    lp.ln2_bias = const_param(prefix + "ln2.bias", {d}, Real(0));
    mp.layers.push_back(std::move(lp));
  }

  mp.head_old_w = normal_param("head.old.w", {d, cfg.vocab_code});
  mp.head_old_b = const_param("head.old.b", {cfg.vocab_code}, Real(0));
  mp.head_new_w = normal_param("head.new.w", {d, cfg.vocab_code});
  mp.head_new_b = const_param("head.new.b", {cfg.vocab_code}, Real(0));
  mp.head_edit_w = normal_param("head.edit.w", {d, kEditClassCount});
  mp.head_edit_b = const_param("head.edit.b", {kEditClassCount}, Real(0));
  mp.cls_w = normal_param("cls.w", {d, 2});
  mp.cls_b = const_param("cls.b", {2}, Real(0));
  return mp;
}

// Copies parameters (values, optimizer state, decay masks) into another
// precision; also serves as a deep copy when To == From.
template <typename To, typename From>
ModelParams<To> cast_params(ModelParams<From>& src) {
  ModelParams<To> dst = init_params<To>(src.config, 0);
  auto sp = src.all_parameters();
  auto dp = dst.all_parameters();
  for (size_t i = 0; i < sp.size(); ++i) {
    dp[i]->value->data.assign(sp[i]->value->data.begin(), sp[i]->value->data.end());
    dp[i]->adam_m.assign(sp[i]->adam_m.begin(), sp[i]->adam_m.end());
    dp[i]->adam_v.assign(sp[i]->adam_v.begin(), sp[i]->adam_v.end());
    dp[i]->step = sp[i]->step;
  }
  return dst;
}

// A batch padded to a common length: PAD (0) in both code streams and edit
// PAD (5) in the edit stream. non_pad marks real positions.
struct PaddedBatch {
  int64_t batch = 0;
  int64_t length = 0;
  std::vector<int32_t> old_ids, new_ids, edit_ids;  // batch * length each
  std::vector<uint8_t> non_pad;
  std::vector<int64_t> lengths;
};

inline PaddedBatch pad_batch(const std::vector<const AlignedChange*>& items) {
  PaddedBatch pb;
  pb.batch = static_cast<int64_t>(items.size());
  for (const AlignedChange* ac : items) pb.length = std::max(pb.length, ac->length());
  if (pb.length == 0) pb.length = 1;  // keep shapes non-degenerate
  const size_t total = static_cast<size_t>(pb.batch * pb.length);
  pb.old_ids.assign(total, Vocab::kPad);
  pb.new_ids.assign(total, Vocab::kPad);
  pb.edit_ids.assign(total, kEditPadId);
  pb.non_pad.assign(total, 0);
  pb.lengths.reserve(items.size());
  for (int64_t b = 0; b < pb.batch; ++b) {
    const AlignedChange& ac = *items[static_cast<size_t>(b)];
    const int64_t len = ac.length();
    pb.lengths.push_back(len);
    for (int64_t i = 0; i < len; ++i) {
      const size_t at = static_cast<size_t>(b * pb.length + i);
      pb.old_ids[at] = ac.old_ids[static_cast<size_t>(i)];
      pb.new_ids[at] = ac.new_ids[static_cast<size_t>(i)];
      pb.edit_ids[at] = ac.edit_ids[static_cast<size_t>(i)];
      pb.non_pad[at] = 1;
    }
  }
  return pb;
}

// X[b, i] = C[old_ids[b, i]] + C[new_ids[b, i]] + E[edit_ids[b, i]] + P[i].
template <typename Real>
TensorPtr<Real> embed_input(Tape<Real>& tape, const PaddedBatch& pb,
                            ModelParams<Real>& mp) {
  const ModelConfig& cfg = mp.config;
  if (pb.length > cfg.max_len) {
    fail("SequenceTooLong", "embed_input: batch length " + std::to_string(pb.length) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  }
  const Shape lead{pb.batch, pb.length};
  std::vector<int32_t> pos_ids(static_cast<size_t>(pb.batch * pb.length));
  for (int64_t b = 0; b < pb.batch; ++b) {
    for (int64_t i = 0; i < pb.length; ++i) {
      pos_ids[static_cast<size_t>(b * pb.length + i)] = static_cast<int32_t>(i);
    }
  }
  auto x = tape.add(tape.embedding(mp.code_embed.value, pb.old_ids, lead),
                    tape.embedding(mp.code_embed.value, pb.new_ids, lead));
  x = tape.add(x, tape.embedding(mp.edit_embed.value, pb.edit_ids, lead));
  x = tape.add(x, tape.embedding(mp.pos_embed.value, pos_ids, lead));
  return x;
}

// N identical post-layer-norm encoder layers: self-attention with PAD keys
// masked out of the softmax, residual, layer norm, then a gelu FFN, residual,
// layer norm.
template <typename Real>
TensorPtr<Real> encode(Tape<Real>& tape, TensorPtr<Real> x, const PaddedBatch& pb,
                       ModelParams<Real>& mp, bool train = false, Rng* rng = nullptr) {
  const ModelConfig& cfg = mp.config;
  const int64_t bsz = pb.batch, len = pb.length, d = cfg.d;
  const int64_t heads = cfg.heads, hd = d / heads;
  const Real ln_eps = Real(1e-5);
  const Real att_scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));

  for (EncoderLayerParams<Real>& lp : mp.layers) {
    auto flat = tape.reshape(x, {bsz * len, d});
    auto project = [&](Parameter<Real>& w, Parameter<Real>& b) {
      return tape.split_heads(tape.linear(flat, w.value, b.value), bsz, len, heads, hd);
    };
    auto q = project(lp.wq, lp.bq);
    auto k = project(lp.wk, lp.bk);
    auto v = project(lp.wv, lp.bv);

    auto scores = tape.matmul(q, k, /*transpose_b=*/true);  // [B, h, L, L]
    auto probs = tape.dropout(tape.masked_softmax(scores, att_scale, pb.non_pad),
                              cfg.dropout, train, rng);
    auto ctx = tape.merge_heads(tape.matmul(probs, v));  // [B*L, d]
    auto att = tape.dropout(tape.linear(ctx, lp.wo.value, lp.bo.value), cfg.dropout,
                            train, rng);
    x = tape.layer_norm(tape.add(flat, att), lp.ln1_gain.value, lp.ln1_bias.value, ln_eps);

    auto inner = tape.gelu(tape.linear(x, lp.w1.value, lp.b1.value));
    auto ffn = tape.dropout(tape.linear(inner, lp.w2.value, lp.b2.value), cfg.dropout,
                            train, rng);
    x = tape.layer_norm(tape.add(x, ffn), lp.ln2_gain.value, lp.ln2_bias.value, ln_eps);
    x = tape.reshape(x, {bsz, len, d});
  }
  return x;
}

template <typename Real>
struct HeadLogits {
  TensorPtr<Real> old_logits;   // [B, L, V_code]
  TensorPtr<Real> new_logits;   // [B, L, V_code]
  TensorPtr<Real> edit_logits;  // [B, L, 4]
};

// Projects hidden rows ([rows, d]) through one of the prediction heads.
template <typename Real>
TensorPtr<Real> head_project(Tape<Real>& tape, const TensorPtr<Real>& rows,
                             ModelParams<Real>& mp, Parameter<Real>& w, Parameter<Real>& b,
                             bool tied_to_code) {
  if (tied_to_code) {
    return tape.linear(rows, mp.code_embed.value, b.value, /*transpose_w=*/true);
  }
  return tape.linear(rows, w.value, b.value);
}

// Three independent linear projections of the shared hidden state.
template <typename Real>
HeadLogits<Real> predict_heads(Tape<Real>& tape, const TensorPtr<Real>& h,
                               ModelParams<Real>& mp) {
  if (h->shape.size() != 3) {
    fail("ShapeMismatch", "predict_heads: expected [B, L, d], got " + shape_str(h->shape));
  }
  const int64_t bsz = h->shape[0], len = h->shape[1], d = h->shape[2];
  const bool tied = mp.config.tie_heads;
  auto flat = tape.reshape(h, {bsz * len, d});
  HeadLogits<Real> out;
  out.old_logits = tape.reshape(
      head_project(tape, flat, mp, mp.head_old_w, mp.head_old_b, tied),
      {bsz, len, mp.config.vocab_code});
  out.new_logits = tape.reshape(
      head_project(tape, flat, mp, mp.head_new_w, mp.head_new_b, tied),
      {bsz, len, mp.config.vocab_code});
  out.edit_logits = tape.reshape(
      head_project(tape, flat, mp, mp.head_edit_w, mp.head_edit_b, false),
      {bsz, len, static_cast<int64_t>(kEditClassCount)});
  return out;
}

// Arithmetic mean of H over non-PAD positions only.
template <typename Real>
TensorPtr<Real> pool_mean(Tape<Real>& tape, const TensorPtr<Real>& h, const PaddedBatch& pb) {
  return tape.masked_mean(h, pb.non_pad);
}

}  // namespace ccbert
