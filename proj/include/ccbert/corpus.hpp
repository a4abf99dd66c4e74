#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ccbert/align.hpp"
#include "ccbert/changeset.hpp"
#include "ccbert/jsonl.hpp"

namespace ccbert {

// One processed hunk, the pre-training unit.
struct Instance {
  std::string commit_id;
  AlignedChange change;
  std::optional<int> label;
};

// A labeled commit for fine-tuning: its hunks in corpus order.
struct Commit {
  std::string commit_id;
  std::vector<AlignedChange> hunks;
  std::optional<int> label;
};

// Hunk-level record carried between extract-hunks and encode-corpus.
struct HunkRecord {
  std::string commit_id;
  std::string file;
  int64_t old_start = 0;  // 1-based first line of the old view, 0 if empty
  int64_t new_start = 0;
  std::string old_snippet;
  std::string new_snippet;
  std::optional<int> label;
};

// {"commit_id", "label"?, "files": [{"path","old_text","new_text"}]} or
// {"commit_id", "label"?, "diff": "<unified diff>"}.
CommitRecord parse_commit_record(const json& j, int64_t line_no);

std::vector<CommitRecord> read_commits(const std::string& path);

json hunk_record_to_json(const HunkRecord& r);
HunkRecord parse_hunk_record(const json& j, int64_t line_no);
std::vector<HunkRecord> read_hunk_records(const std::string& path);

json instance_to_json(const Instance& inst);
Instance parse_instance(const json& j, int64_t line_no);
std::vector<Instance> read_instances(const std::string& path);

// Groups instances by commit_id, preserving first-seen order of commits and
// the input order of hunks within each commit.
std::vector<Commit> group_by_commit(const std::vector<Instance>& instances);

}  // namespace ccbert
