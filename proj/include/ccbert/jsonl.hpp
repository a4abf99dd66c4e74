#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ccbert/error.hpp"

namespace ccbert {

using json = nlohmann::json;

// Calls fn(line_no, parsed) for every non-empty line. Line numbers are 1-based.
inline void for_each_jsonl(const std::string& path,
                           const std::function<void(int64_t, const json&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("IoError", "cannot open " + path);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      fail("BadRecord", path + ":" + std::to_string(line_no) + ": invalid JSON");
    }
    fn(line_no, j);
  }
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("IoError", "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

// Writes to <path>.tmp and renames on commit so readers never observe a
// partially written file. Destructor without commit() discards the temp file.
class AtomicFile {
 public:
  explicit AtomicFile(std::string path)
      : path_(std::move(path)), tmp_(path_ + ".tmp"), out_(tmp_, std::ios::binary) {
    if (!out_) fail("IoError", "cannot open " + tmp_ + " for writing");
  }

  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }

  void write_json_line(const json& j) { out_ << j.dump() << '\n'; }

  void commit() {
    out_.flush();
    if (!out_) fail("IoError", "write failed for " + tmp_);
    out_.close();
    std::filesystem::rename(tmp_, path_);
    committed_ = true;
  }

 private:
  std::string path_;
  std::string tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

}  // namespace ccbert
