#include "ccbert/corpus.hpp"

#include <unordered_map>

namespace ccbert {

namespace {

[[noreturn]] void bad_record(int64_t line_no, const std::string& why) {
  fail("BadRecord", "line " + std::to_string(line_no) + ": " + why);
}

std::string require_string(const json& j, const char* key, int64_t line_no) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    bad_record(line_no, std::string("missing string field '") + key + "'");
  }
  return it->get<std::string>();
}

std::optional<int> optional_label(const json& j, int64_t line_no) {
  auto it = j.find("label");
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_number_integer()) bad_record(line_no, "label must be 0 or 1");
  const int v = it->get<int>();
  if (v != 0 && v != 1) bad_record(line_no, "label must be 0 or 1");
  return v;
}

std::vector<int32_t> id_array(const json& j, const char* key, int64_t line_no) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_array()) {
    bad_record(line_no, std::string("missing array field '") + key + "'");
  }
  std::vector<int32_t> out;
  out.reserve(it->size());
  for (const json& v : *it) {
    if (!v.is_number_integer()) {
      bad_record(line_no, std::string(key) + " must contain integers");
    }
    out.push_back(v.get<int32_t>());
  }
  return out;
}

}  // namespace

CommitRecord parse_commit_record(const json& j, int64_t line_no) {
  CommitRecord rec;
  rec.commit_id = require_string(j, "commit_id", line_no);
  if (rec.commit_id.empty()) bad_record(line_no, "commit_id must be non-empty");
  rec.label = optional_label(j, line_no);

  const bool has_files = j.contains("files");
  const bool has_diff = j.contains("diff");
  if (has_files == has_diff) {
    bad_record(line_no, "expected exactly one of 'files' or 'diff'");
  }
  if (has_files) {
    const json& files = j["files"];
    if (!files.is_array() || files.empty()) {
      bad_record(line_no, "'files' must be a non-empty array");
    }
    for (const json& f : files) {
      FileChange fc;
      fc.path = require_string(f, "path", line_no);
      fc.old_text = require_string(f, "old_text", line_no);
      fc.new_text = require_string(f, "new_text", line_no);
      rec.files.push_back(std::move(fc));
    }
  } else {
    const std::string diff = require_string(j, "diff", line_no);
    for (DiffFragment& frag : parse_unified_diff(diff)) {
      rec.files.push_back({std::move(frag.path), std::move(frag.old_snippet),
                           std::move(frag.new_snippet)});
    }
  }
  return rec;
}

std::vector<CommitRecord> read_commits(const std::string& path) {
  std::vector<CommitRecord> out;
  for_each_jsonl(path, [&](int64_t line_no, const json& j) {
    out.push_back(parse_commit_record(j, line_no));
  });
  return out;
}

json hunk_record_to_json(const HunkRecord& r) {
  json j{{"commit_id", r.commit_id},
         {"file", r.file},
         {"old_start", r.old_start},
         {"new_start", r.new_start},
         {"old_snippet", r.old_snippet},
         {"new_snippet", r.new_snippet}};
  if (r.label) j["label"] = *r.label;
  return j;
}

HunkRecord parse_hunk_record(const json& j, int64_t line_no) {
  HunkRecord r;
  r.commit_id = require_string(j, "commit_id", line_no);
  r.file = require_string(j, "file", line_no);
  r.old_snippet = require_string(j, "old_snippet", line_no);
  r.new_snippet = require_string(j, "new_snippet", line_no);
  r.old_start = j.value("old_start", int64_t{0});
  r.new_start = j.value("new_start", int64_t{0});
  r.label = optional_label(j, line_no);
  return r;
}

std::vector<HunkRecord> read_hunk_records(const std::string& path) {
  std::vector<HunkRecord> out;
  for_each_jsonl(path, [&](int64_t line_no, const json& j) {
    out.push_back(parse_hunk_record(j, line_no));
  });
  return out;
}

json instance_to_json(const Instance& inst) {
  json j{{"commit_id", inst.commit_id},
         {"old_ids", inst.change.old_ids},
         {"new_ids", inst.change.new_ids},
         {"edit_ids", inst.change.edit_ids}};
  if (inst.label) j["label"] = *inst.label;
  return j;
}

Instance parse_instance(const json& j, int64_t line_no) {
  Instance inst;
  inst.commit_id = require_string(j, "commit_id", line_no);
  inst.change.old_ids = id_array(j, "old_ids", line_no);
  inst.change.new_ids = id_array(j, "new_ids", line_no);
  inst.change.edit_ids = id_array(j, "edit_ids", line_no);
  inst.label = optional_label(j, line_no);
  const size_t len = inst.change.edit_ids.size();
  if (len == 0 || inst.change.old_ids.size() != len || inst.change.new_ids.size() != len) {
    bad_record(line_no, "old_ids/new_ids/edit_ids must be equal-length and non-empty");
  }
  for (int32_t e : inst.change.edit_ids) {
    if (e < 0 || e >= kEditClassCount) {
      bad_record(line_no, "edit_ids must be in [0, 4)");
    }
  }
  return inst;
}

std::vector<Instance> read_instances(const std::string& path) {
  std::vector<Instance> out;
  for_each_jsonl(path, [&](int64_t line_no, const json& j) {
    out.push_back(parse_instance(j, line_no));
  });
  return out;
}

std::vector<Commit> group_by_commit(const std::vector<Instance>& instances) {
  std::vector<Commit> commits;
  std::unordered_map<std::string, size_t> index;
  for (const Instance& inst : instances) {
    auto [it, inserted] = index.emplace(inst.commit_id, commits.size());
    if (inserted) {
      commits.push_back({inst.commit_id, {}, inst.label});
    }
    Commit& c = commits[it->second];
    c.hunks.push_back(inst.change);
    if (!c.label) c.label = inst.label;
  }
  return commits;
}

}  // namespace ccbert
