#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccbert/error.hpp"

namespace ccbert {

// Edit-action alphabet. The first four values are the prediction space; MASK
// and PAD exist only in model input streams (V_edit = 6 embedding rows).
enum class EditAction : int32_t { kEqual = 0, kDelete = 1, kInsert = 2, kReplace = 3 };

inline constexpr int32_t kEditMaskId = 4;
inline constexpr int32_t kEditPadId = 5;
inline constexpr int32_t kEditVocabSize = 6;
inline constexpr int32_t kEditClassCount = 4;

struct MatchBlock {
  int64_t a = 0;
  int64_t b = 0;
  int64_t size = 0;
  friend bool operator==(const MatchBlock&, const MatchBlock&) = default;
};

enum class OpTag { kEqual, kDelete, kInsert, kReplace };

struct Opcode {
  OpTag tag;
  int64_t a1, a2;  // span in a
  int64_t b1, b2;  // span in b
  friend bool operator==(const Opcode&, const Opcode&) = default;
};

namespace detail {

// Longest contiguous match inside a[alo,ahi) x b[blo,bhi), preferring the
// earliest match (smallest start in a, then smallest start in b) among
// equally long ones. No junk heuristic.
template <typename T>
MatchBlock longest_match(std::span<const T> a, std::span<const T> b,
                         const std::unordered_map<T, std::vector<int64_t>>& b_index,
                         int64_t alo, int64_t ahi, int64_t blo, int64_t bhi) {
  int64_t besti = alo, bestj = blo, bestsize = 0;
  std::unordered_map<int64_t, int64_t> run_ending_at;
  for (int64_t i = alo; i < ahi; ++i) {
    std::unordered_map<int64_t, int64_t> next_run;
    auto it = b_index.find(a[static_cast<size_t>(i)]);
    if (it != b_index.end()) {
      for (int64_t j : it->second) {
        if (j < blo) continue;
        if (j >= bhi) break;  // positions are ascending
        int64_t k = 1;
        auto prev = run_ending_at.find(j - 1);
        if (prev != run_ending_at.end()) k = prev->second + 1;
        next_run[j] = k;
        if (k > bestsize) {
          besti = i - k + 1;
          bestj = j - k + 1;
          bestsize = k;
        }
      }
    }
    run_ending_at = std::move(next_run);
  }
  return {besti, bestj, bestsize};
}

}  // namespace detail

// Recursive longest-contiguous-match decomposition (Ratcliff–Obershelp).
// Returns blocks strictly increasing in both coordinates, with adjacent
// blocks coalesced, terminated by the sentinel (len(a), len(b), 0).
template <typename T>
std::vector<MatchBlock> matching_blocks(std::span<const T> a, std::span<const T> b) {
  std::unordered_map<T, std::vector<int64_t>> b_index;
  for (int64_t j = 0; j < static_cast<int64_t>(b.size()); ++j) {
    b_index[b[static_cast<size_t>(j)]].push_back(j);
  }

  std::vector<MatchBlock> found;
  std::vector<std::array<int64_t, 4>> queue{{0, static_cast<int64_t>(a.size()), 0,
                                             static_cast<int64_t>(b.size())}};
  while (!queue.empty()) {
    auto [alo, ahi, blo, bhi] = queue.back();
    queue.pop_back();
    MatchBlock m = detail::longest_match(a, b, b_index, alo, ahi, blo, bhi);
    if (m.size == 0) continue;
    found.push_back(m);
    if (alo < m.a && blo < m.b) queue.push_back({alo, m.a, blo, m.b});
    if (m.a + m.size < ahi && m.b + m.size < bhi) {
      queue.push_back({m.a + m.size, ahi, m.b + m.size, bhi});
    }
  }
  std::sort(found.begin(), found.end(), [](const MatchBlock& x, const MatchBlock& y) {
    return x.a != y.a ? x.a < y.a : x.b < y.b;
  });

  std::vector<MatchBlock> blocks;
  for (const MatchBlock& m : found) {
    if (!blocks.empty() && blocks.back().a + blocks.back().size == m.a &&
        blocks.back().b + blocks.back().size == m.b) {
      blocks.back().size += m.size;
    } else {
      blocks.push_back(m);
    }
  }
  blocks.push_back({static_cast<int64_t>(a.size()), static_cast<int64_t>(b.size()), 0});
  return blocks;
}

// Edit script derived from matching_blocks. Spans partition [0,len(a)) and
// [0,len(b)).
template <typename T>
std::vector<Opcode> opcodes(std::span<const T> a, std::span<const T> b) {
  std::vector<Opcode> ops;
  int64_t i = 0, j = 0;
  for (const MatchBlock& m : matching_blocks(a, b)) {
    if (i < m.a && j < m.b) {
      ops.push_back({OpTag::kReplace, i, m.a, j, m.b});
    } else if (i < m.a) {
      ops.push_back({OpTag::kDelete, i, m.a, j, m.b});
    } else if (j < m.b) {
      ops.push_back({OpTag::kInsert, i, m.a, j, m.b});
    }
    if (m.size > 0) {
      ops.push_back({OpTag::kEqual, m.a, m.a + m.size, m.b, m.b + m.size});
    }
    i = m.a + m.size;
    j = m.b + m.size;
  }
  return ops;
}

// Three equal-length streams: old token ids, new token ids, edit actions.
// NULL (token id 2) fills the absent side of inserts and deletes so the
// streams stay aligned position by position.
struct AlignedChange {
  std::vector<int32_t> old_ids;
  std::vector<int32_t> new_ids;
  std::vector<int32_t> edit_ids;

  int64_t length() const { return static_cast<int64_t>(edit_ids.size()); }
  friend bool operator==(const AlignedChange&, const AlignedChange&) = default;
};

// Aligns two token id sequences into the triple-stream form. Inputs must not
// contain special ids (PAD/MASK/NULL/UNK). Inside a replace block the first
// min(|old|,|new|) positions pair up as REPLACE and the overflow becomes
// DELETE or INSERT.
AlignedChange align_triples(const std::vector<int32_t>& old_ids,
                            const std::vector<int32_t>& new_ids);

// Keeps the first max_len positions (the head of the hunk).
AlignedChange truncate(const AlignedChange& ac, int64_t max_len);

}  // namespace ccbert
