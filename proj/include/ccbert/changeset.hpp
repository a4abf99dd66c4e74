#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ccbert/error.hpp"

namespace ccbert {

struct FileChange {
  std::string path;
  std::string old_text;
  std::string new_text;
};

struct CommitRecord {
  std::string commit_id;
  std::vector<FileChange> files;
  std::optional<int> label;  // used only by fine-tuning
};

enum class LineTag { kContext, kRemoved, kAdded };

struct HunkLine {
  int64_t line_no = 0;  // 1-based; old numbering in old_lines, new in new_lines
  std::string text;
  LineTag tag = LineTag::kContext;
};

// A contiguous change unit: context lines appear identically in both views,
// removed lines only in old_lines, added lines only in new_lines.
struct Hunk {
  std::string file_path;
  std::vector<HunkLine> old_lines;
  std::vector<HunkLine> new_lines;
};

enum class RunTag { kEqual, kRemoved, kAdded };

struct LineRun {
  RunTag tag;
  std::vector<std::string> lines;
  friend bool operator==(const LineRun&, const LineRun&) = default;
};

// Splits on '\n'; a missing trailing newline does not create a phantom line
// ("a\nb" and "a\nb\n" both give {"a","b"}, "" gives {}).
std::vector<std::string> split_lines(const std::string& text);

// Line-level edit runs from the same longest-contiguous-match engine the
// token aligner uses. Replace opcodes decompose into a removed run followed
// by an added run. Two empty inputs yield one empty equal run.
std::vector<LineRun> diff_lines(const std::string& old_text, const std::string& new_text);

// Groups changed lines into hunks: changed parts separated by <= gap_limit
// unchanged lines merge into one hunk, then each hunk is padded with up to
// `context` unchanged lines on each side. Identical texts give no hunks.
std::vector<Hunk> extract_hunks(const FileChange& fc, int context = 3, int gap_limit = 3);

// (old_snippet, new_snippet): each view's lines joined with '\n', no trailing
// newline. Context lines are shared between the two snippets.
std::pair<std::string, std::string> hunk_to_snippets(const Hunk& hunk);

// One @@-section of a unified diff, reduced to the two text views.
struct DiffFragment {
  std::string path;
  std::string old_snippet;
  std::string new_snippet;
};

// Parses unified-diff text (---/+++ headers, @@ hunk headers). Each
// @@-section yields one fragment. Throws Error("MalformedDiff", ...) with the
// offending line number on format violations, including input with no
// @@-section at all.
std::vector<DiffFragment> parse_unified_diff(const std::string& text);

}  // namespace ccbert
