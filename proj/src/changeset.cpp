#include "ccbert/changeset.hpp"

#include <algorithm>
#include <cctype>

#include "ccbert/align.hpp"

namespace ccbert {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < text.size()) {
    const size_t nl = text.find('\n', start);
    if (nl == std::string::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

std::vector<LineRun> diff_lines(const std::string& old_text, const std::string& new_text) {
  const std::vector<std::string> a = split_lines(old_text);
  const std::vector<std::string> b = split_lines(new_text);

  std::vector<LineRun> runs;
  if (a.empty() && b.empty()) {
    runs.push_back({RunTag::kEqual, {}});
    return runs;
  }

  auto slice = [](const std::vector<std::string>& v, int64_t lo, int64_t hi) {
    return std::vector<std::string>(v.begin() + lo, v.begin() + hi);
  };

  for (const Opcode& op : opcodes<std::string>(a, b)) {
    switch (op.tag) {
      case OpTag::kEqual:
        runs.push_back({RunTag::kEqual, slice(a, op.a1, op.a2)});
        break;
      case OpTag::kDelete:
        runs.push_back({RunTag::kRemoved, slice(a, op.a1, op.a2)});
        break;
      case OpTag::kInsert:
        runs.push_back({RunTag::kAdded, slice(b, op.b1, op.b2)});
        break;
      case OpTag::kReplace:
        runs.push_back({RunTag::kRemoved, slice(a, op.a1, op.a2)});
        runs.push_back({RunTag::kAdded, slice(b, op.b1, op.b2)});
        break;
    }
  }
  return runs;
}

namespace {

struct Row {
  RunTag tag;
  int64_t old_no = 0;  // 1-based, 0 when absent
  int64_t new_no = 0;
  const std::string* text = nullptr;
};

}  // namespace

std::vector<Hunk> extract_hunks(const FileChange& fc, int context, int gap_limit) {
  if (context < 0 || gap_limit < 0) {
    fail("BadConfig", "extract_hunks: context and gap_limit must be >= 0");
  }
  const std::vector<LineRun> runs = diff_lines(fc.old_text, fc.new_text);

  std::vector<Row> rows;
  int64_t old_no = 1, new_no = 1;
  for (const LineRun& run : runs) {
    for (const std::string& line : run.lines) {
      switch (run.tag) {
        case RunTag::kEqual:
          rows.push_back({run.tag, old_no++, new_no++, &line});
          break;
        case RunTag::kRemoved:
          rows.push_back({run.tag, old_no++, 0, &line});
          break;
        case RunTag::kAdded:
          rows.push_back({run.tag, 0, new_no++, &line});
          break;
      }
    }
  }

  // Maximal ranges of changed rows (removed/added, possibly interleaved with
  // nothing in between).
  std::vector<std::pair<int64_t, int64_t>> parts;  // [first, last] row indices
  for (int64_t i = 0; i < static_cast<int64_t>(rows.size()); ++i) {
    if (rows[static_cast<size_t>(i)].tag == RunTag::kEqual) continue;
    if (!parts.empty() && parts.back().second == i - 1) {
      parts.back().second = i;
    } else {
      parts.emplace_back(i, i);
    }
  }
  if (parts.empty()) return {};

  // Merge parts whose gap (unchanged lines strictly between) is <= gap_limit.
  std::vector<std::pair<int64_t, int64_t>> groups{parts.front()};
  for (size_t p = 1; p < parts.size(); ++p) {
    const int64_t gap = parts[p].first - groups.back().second - 1;
    if (gap <= gap_limit) {
      groups.back().second = parts[p].second;
    } else {
      groups.push_back(parts[p]);
    }
  }

  std::vector<Hunk> hunks;
  for (const auto& [first, last] : groups) {
    const int64_t lo = std::max<int64_t>(0, first - context);
    const int64_t hi = std::min<int64_t>(static_cast<int64_t>(rows.size()) - 1,
                                         last + context);
    Hunk h;
    h.file_path = fc.path;
    for (int64_t i = lo; i <= hi; ++i) {
      const Row& r = rows[static_cast<size_t>(i)];
      switch (r.tag) {
        case RunTag::kEqual:
          h.old_lines.push_back({r.old_no, *r.text, LineTag::kContext});
          h.new_lines.push_back({r.new_no, *r.text, LineTag::kContext});
          break;
        case RunTag::kRemoved:
          h.old_lines.push_back({r.old_no, *r.text, LineTag::kRemoved});
          break;
        case RunTag::kAdded:
          h.new_lines.push_back({r.new_no, *r.text, LineTag::kAdded});
          break;
      }
    }
    hunks.push_back(std::move(h));
  }
  return hunks;
}

std::pair<std::string, std::string> hunk_to_snippets(const Hunk& hunk) {
  auto join = [](const std::vector<HunkLine>& lines) {
    std::string out;
    for (size_t i = 0; i < lines.size(); ++i) {
      if (i > 0) out += '\n';
      out += lines[i].text;
    }
    return out;
  };
  return {join(hunk.old_lines), join(hunk.new_lines)};
}

namespace {

[[noreturn]] void malformed(int64_t line_no, const std::string& why) {
  fail("MalformedDiff", "line " + std::to_string(line_no) + ": " + why);
}

std::string header_path(const std::string& line) {
  // "--- a/foo.c\t2024-01-01" -> "a/foo.c"; strips the customary a/ b/ prefix.
  std::string p = line.substr(4);
  const size_t tab = p.find('\t');
  if (tab != std::string::npos) p.resize(tab);
  if (p.rfind("a/", 0) == 0 || p.rfind("b/", 0) == 0) p = p.substr(2);
  return p;
}

// "@@ -l[,n] +l[,n] @@..." -> (old_count, new_count); returns false on parse
// failure.
bool parse_hunk_header(const std::string& line, int64_t* old_count, int64_t* new_count) {
  size_t pos = 2;
  auto read_side = [&](char sign, int64_t* count) {
    while (pos < line.size() && line[pos] == ' ') ++pos;
    if (pos >= line.size() || line[pos] != sign) return false;
    ++pos;
    size_t digits = 0;
    while (pos < line.size() && isdigit(static_cast<unsigned char>(line[pos]))) {
      ++pos;
      ++digits;
    }
    if (digits == 0) return false;
    *count = 1;
    if (pos < line.size() && line[pos] == ',') {
      ++pos;
      int64_t n = 0;
      digits = 0;
      while (pos < line.size() && isdigit(static_cast<unsigned char>(line[pos]))) {
        n = n * 10 + (line[pos] - '0');
        ++pos;
        ++digits;
      }
      if (digits == 0) return false;
      *count = n;
    }
    return true;
  };
  if (line.rfind("@@ ", 0) != 0) return false;
  if (!read_side('-', old_count)) return false;
  if (!read_side('+', new_count)) return false;
  while (pos < line.size() && line[pos] == ' ') ++pos;
  return pos + 1 < line.size() && line[pos] == '@' && line[pos + 1] == '@';
}

bool is_file_metadata(const std::string& line) {
  static const char* prefixes[] = {"diff ",      "index ",     "new file",
                                   "deleted file", "old mode", "new mode",
                                   "similarity ", "rename ",   "copy ",
                                   "Binary files"};
  for (const char* p : prefixes) {
    if (line.rfind(p, 0) == 0) return true;
  }
  return line.empty();
}

}  // namespace

std::vector<DiffFragment> parse_unified_diff(const std::string& text) {
  const std::vector<std::string> lines = split_lines(text);
  std::vector<DiffFragment> fragments;
  std::string current_path;
  bool have_file_header = false;

  size_t i = 0;
  while (i < lines.size()) {
    const std::string& line = lines[i];
    const int64_t line_no = static_cast<int64_t>(i) + 1;

    if (line.rfind("--- ", 0) == 0) {
      if (i + 1 >= lines.size() || lines[i + 1].rfind("+++ ", 0) != 0) {
        malformed(line_no, "'---' header not followed by '+++'");
      }
      current_path = header_path(lines[i + 1]);
      if (current_path == "/dev/null" || current_path == "dev/null") {
        current_path = header_path(line);
      }
      have_file_header = true;
      i += 2;
      continue;
    }
    if (line.rfind("@@", 0) == 0) {
      if (!have_file_header) malformed(line_no, "'@@' section before any ---/+++ header");
      int64_t old_count = 0, new_count = 0;
      if (!parse_hunk_header(line, &old_count, &new_count)) {
        malformed(line_no, "cannot parse hunk header '" + line + "'");
      }
      ++i;
      std::vector<std::string> old_lines, new_lines;
      while (static_cast<int64_t>(old_lines.size()) < old_count ||
             static_cast<int64_t>(new_lines.size()) < new_count) {
        if (i >= lines.size()) {
          malformed(static_cast<int64_t>(i), "hunk body shorter than header counts");
        }
        const std::string& body = lines[i];
        const int64_t body_no = static_cast<int64_t>(i) + 1;
        if (body.rfind('\\', 0) == 0) {  // "\ No newline at end of file"
          ++i;
          continue;
        }
        const char marker = body.empty() ? ' ' : body[0];
        const std::string content = body.empty() ? "" : body.substr(1);
        switch (marker) {
          case ' ':
            old_lines.push_back(content);
            new_lines.push_back(content);
            break;
          case '-':
            old_lines.push_back(content);
            break;
          case '+':
            new_lines.push_back(content);
            break;
          default:
            malformed(body_no, "unexpected line inside hunk body");
        }
        ++i;
      }
      DiffFragment frag;
      frag.path = current_path;
      for (size_t k = 0; k < old_lines.size(); ++k) {
        if (k > 0) frag.old_snippet += '\n';
        frag.old_snippet += old_lines[k];
      }
      for (size_t k = 0; k < new_lines.size(); ++k) {
        if (k > 0) frag.new_snippet += '\n';
        frag.new_snippet += new_lines[k];
      }
      fragments.push_back(std::move(frag));
      continue;
    }
    if (is_file_metadata(line)) {
      ++i;
      continue;
    }
    malformed(line_no, "unrecognized line '" + line + "'");
  }

  if (fragments.empty()) {
    malformed(static_cast<int64_t>(lines.size()), "no @@ hunk section found");
  }
  return fragments;
}

}  // namespace ccbert
