#include "ccbert/align.hpp"

namespace ccbert {

namespace {

constexpr int32_t kNullId = 2;  // tokenizer Vocab::kNull

}  // namespace

AlignedChange align_triples(const std::vector<int32_t>& old_ids,
                            const std::vector<int32_t>& new_ids) {
  AlignedChange out;
  out.old_ids.reserve(old_ids.size() + new_ids.size());
  out.new_ids.reserve(old_ids.size() + new_ids.size());
  out.edit_ids.reserve(old_ids.size() + new_ids.size());

  auto push = [&out](int32_t o, int32_t n, EditAction e) {
    out.old_ids.push_back(o);
    out.new_ids.push_back(n);
    out.edit_ids.push_back(static_cast<int32_t>(e));
  };

  for (const Opcode& op : opcodes<int32_t>(old_ids, new_ids)) {
    switch (op.tag) {
      case OpTag::kEqual:
        for (int64_t k = 0; k < op.a2 - op.a1; ++k) {
          push(old_ids[static_cast<size_t>(op.a1 + k)],
               new_ids[static_cast<size_t>(op.b1 + k)], EditAction::kEqual);
        }
        break;
      case OpTag::kDelete:
        for (int64_t i = op.a1; i < op.a2; ++i) {
          push(old_ids[static_cast<size_t>(i)], kNullId, EditAction::kDelete);
        }
        break;
      case OpTag::kInsert:
        for (int64_t j = op.b1; j < op.b2; ++j) {
          push(kNullId, new_ids[static_cast<size_t>(j)], EditAction::kInsert);
        }
        break;
      case OpTag::kReplace: {
        const int64_t na = op.a2 - op.a1;
        const int64_t nb = op.b2 - op.b1;
        const int64_t paired = std::min(na, nb);
        for (int64_t k = 0; k < paired; ++k) {
          push(old_ids[static_cast<size_t>(op.a1 + k)],
               new_ids[static_cast<size_t>(op.b1 + k)], EditAction::kReplace);
        }
        for (int64_t k = paired; k < na; ++k) {
          push(old_ids[static_cast<size_t>(op.a1 + k)], kNullId, EditAction::kDelete);
        }
        for (int64_t k = paired; k < nb; ++k) {
          push(kNullId, new_ids[static_cast<size_t>(op.b1 + k)], EditAction::kInsert);
        }
        break;
      }
    }
  }
  return out;
}

AlignedChange truncate(const AlignedChange& ac, int64_t max_len) {
  if (max_len < 1) fail("BadConfig", "truncate: max_len must be >= 1");
  if (ac.length() <= max_len) return ac;
  AlignedChange out;
  const auto n = static_cast<size_t>(max_len);
  out.old_ids.assign(ac.old_ids.begin(), ac.old_ids.begin() + n);
  out.new_ids.assign(ac.new_ids.begin(), ac.new_ids.begin() + n);
  out.edit_ids.assign(ac.edit_ids.begin(), ac.edit_ids.begin() + n);
  return out;
}

}  // namespace ccbert
