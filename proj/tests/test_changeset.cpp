#include "doctest.h"

#include <set>

#include "ccbert/changeset.hpp"
#include "ccbert/rng.hpp"
#include "testutil.hpp"

using namespace ccbert;

namespace {

std::string join_nl(const std::vector<std::string>& lines) {
  std::string out;
  for (const std::string& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

// Projection check: equal+removed runs reproduce the old lines, equal+added
// runs reproduce the new lines.
void check_run_projection(const std::vector<LineRun>& runs, const std::string& old_text,
                          const std::string& new_text) {
  std::vector<std::string> old_got, new_got;
  for (const LineRun& r : runs) {
    if (r.tag != RunTag::kAdded) {
      old_got.insert(old_got.end(), r.lines.begin(), r.lines.end());
    }
    if (r.tag != RunTag::kRemoved) {
      new_got.insert(new_got.end(), r.lines.begin(), r.lines.end());
    }
  }
  CHECK(old_got == split_lines(old_text));
  CHECK(new_got == split_lines(new_text));
}

FileChange change(const std::vector<std::string>& old_lines,
                  const std::vector<std::string>& new_lines) {
  return {"f.java", join_nl(old_lines), join_nl(new_lines)};
}

std::vector<std::string> numbered_lines(int n) {
  std::vector<std::string> out;
  for (int i = 1; i <= n; ++i) out.push_back("line" + std::to_string(i) + "();");
  return out;
}

}  // namespace

TEST_CASE("split_lines: trailing newline does not create a phantom line") {
  CHECK(split_lines("a\nb\n") == std::vector<std::string>{"a", "b"});
  CHECK(split_lines("a\nb") == std::vector<std::string>{"a", "b"});
  CHECK(split_lines("") == std::vector<std::string>{});
  CHECK(split_lines("\n") == std::vector<std::string>{""});
}

TEST_CASE("diff_lines: identical inputs give one equal run") {
  const auto runs = diff_lines("a\nb\n", "a\nb\n");
  REQUIRE(runs.size() == 1);
  CHECK(runs[0] == LineRun{RunTag::kEqual, {"a", "b"}});
}

TEST_CASE("diff_lines: one-line replacement decomposes into removed+added") {
  const auto runs = diff_lines("a\nb\nc\n", "a\nx\nc\n");
  REQUIRE(runs.size() == 4);
  CHECK(runs[0] == LineRun{RunTag::kEqual, {"a"}});
  CHECK(runs[1] == LineRun{RunTag::kRemoved, {"b"}});
  CHECK(runs[2] == LineRun{RunTag::kAdded, {"x"}});
  CHECK(runs[3] == LineRun{RunTag::kEqual, {"c"}});
}

TEST_CASE("diff_lines: insertion into an empty file") {
  const auto runs = diff_lines("", "a\n");
  REQUIRE(runs.size() == 1);
  CHECK(runs[0] == LineRun{RunTag::kAdded, {"a"}});
}

TEST_CASE("diff_lines: two empty inputs give one empty equal run") {
  const auto runs = diff_lines("", "");
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].tag == RunTag::kEqual);
  CHECK(runs[0].lines.empty());
}

TEST_CASE("diff_lines projection property on random line edits") {
  Rng rng(0x11E5);
  const std::vector<std::string> pool{"alpha", "beta", "gamma", "delta", "eps"};
  for (int iter = 0; iter < 200; ++iter) {
    std::vector<std::string> old_lines, new_lines;
    for (uint64_t i = 0, n = rng.below(10); i < n; ++i) {
      old_lines.push_back(pool[rng.below(pool.size())]);
    }
    for (uint64_t i = 0, n = rng.below(10); i < n; ++i) {
      new_lines.push_back(pool[rng.below(pool.size())]);
    }
    const std::string old_text = join_nl(old_lines), new_text = join_nl(new_lines);
    check_run_projection(diff_lines(old_text, new_text), old_text, new_text);
  }
}

TEST_CASE("extract_hunks: logger-style one-line replacement mid-file") {
  std::vector<std::string> old_lines = numbered_lines(9);
  old_lines[4] = "logger.info(\"msg\");";
  std::vector<std::string> new_lines = old_lines;
  new_lines[4] = "logger.debug(\"msg\");";

  const auto hunks = extract_hunks(change(old_lines, new_lines));
  REQUIRE(hunks.size() == 1);
  const Hunk& h = hunks[0];

  int removed = 0, added = 0, old_ctx = 0, new_ctx = 0;
  for (const HunkLine& l : h.old_lines) {
    if (l.tag == LineTag::kRemoved) ++removed;
    else ++old_ctx;
  }
  for (const HunkLine& l : h.new_lines) {
    if (l.tag == LineTag::kAdded) ++added;
    else ++new_ctx;
  }
  CHECK(removed == 1);
  CHECK(added == 1);
  CHECK(old_ctx == 6);  // 3 before + 3 after
  CHECK(new_ctx == 6);
  CHECK(h.old_lines[3].text == "logger.info(\"msg\");");
  CHECK(h.new_lines[3].text == "logger.debug(\"msg\");");

  // context lines appear identically in both views
  std::vector<std::string> octx, nctx;
  for (const HunkLine& l : h.old_lines) {
    if (l.tag == LineTag::kContext) octx.push_back(l.text);
  }
  for (const HunkLine& l : h.new_lines) {
    if (l.tag == LineTag::kContext) nctx.push_back(l.text);
  }
  CHECK(octx == nctx);
}

TEST_CASE("extract_hunks: gap of 2 unchanged lines keeps one hunk") {
  std::vector<std::string> old_lines = numbered_lines(20);
  std::vector<std::string> new_lines = old_lines;
  new_lines[9] = "changedA();";   // line 10
  new_lines[12] = "changedB();";  // line 13, gap of 2 (lines 11-12)
  const auto hunks = extract_hunks(change(old_lines, new_lines));
  CHECK(hunks.size() == 1);
}

TEST_CASE("extract_hunks: gap of 7 unchanged lines splits into two hunks") {
  std::vector<std::string> old_lines = numbered_lines(25);
  std::vector<std::string> new_lines = old_lines;
  new_lines[9] = "changedA();";   // line 10
  new_lines[17] = "changedB();";  // line 18, gap of 7
  const auto hunks = extract_hunks(change(old_lines, new_lines));
  CHECK(hunks.size() == 2);
}

TEST_CASE("extract_hunks: gap of exactly 3 merges, 4 splits") {
  std::vector<std::string> old_lines = numbered_lines(20);
  std::vector<std::string> a = old_lines, b = old_lines;
  a[5] = "x();";
  a[9] = "y();";  // gap of 3 (lines 7,8,9)
  CHECK(extract_hunks(change(old_lines, a)).size() == 1);
  b[5] = "x();";
  b[10] = "y();";  // gap of 4
  CHECK(extract_hunks(change(old_lines, b)).size() == 2);
}

TEST_CASE("extract_hunks: identical texts give no hunks") {
  const auto lines = numbered_lines(5);
  CHECK(extract_hunks(change(lines, lines)).empty());
}

TEST_CASE("extract_hunks: merging monotonicity and changed-line coverage") {
  Rng rng(0x6A9);
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<std::string> old_lines = numbered_lines(30);
    std::vector<std::string> new_lines = old_lines;
    const uint64_t edits = 1 + rng.below(5);
    for (uint64_t e = 0; e < edits; ++e) {
      new_lines[rng.below(new_lines.size())] = "edit" + std::to_string(rng.below(1000)) +
                                               "();";
    }
    const FileChange fc = change(old_lines, new_lines);

    size_t prev_count = 0;
    for (int gap = 6; gap >= 0; --gap) {  // decreasing gap_limit never merges more
      const size_t count = extract_hunks(fc, 3, gap).size();
      if (gap < 6) CHECK(count >= prev_count);
      prev_count = count;
    }

    // every changed line appears in some hunk
    std::set<std::string> changed;
    for (const LineRun& run : diff_lines(fc.old_text, fc.new_text)) {
      if (run.tag == RunTag::kEqual) continue;
      for (const std::string& l : run.lines) changed.insert(l);
    }
    std::set<std::string> covered;
    for (const Hunk& h : extract_hunks(fc)) {
      for (const HunkLine& l : h.old_lines) {
        if (l.tag == LineTag::kRemoved) covered.insert(l.text);
      }
      for (const HunkLine& l : h.new_lines) {
        if (l.tag == LineTag::kAdded) covered.insert(l.text);
      }
    }
    CHECK(changed == covered);
  }
}

TEST_CASE("hunk_to_snippets: pure insertion and pure deletion") {
  SUBCASE("insertion between two context lines") {
    const auto hunks = extract_hunks(change({"a", "b"}, {"a", "x", "b"}));
    REQUIRE(hunks.size() == 1);
    const auto [old_snippet, new_snippet] = hunk_to_snippets(hunks[0]);
    CHECK(old_snippet == "a\nb");
    CHECK(new_snippet == "a\nx\nb");
  }
  SUBCASE("pure deletion leaves contexts only in the new view") {
    const auto hunks = extract_hunks(change({"a", "x", "b"}, {"a", "b"}));
    REQUIRE(hunks.size() == 1);
    const auto [old_snippet, new_snippet] = hunk_to_snippets(hunks[0]);
    CHECK(old_snippet == "a\nx\nb");
    CHECK(new_snippet == "a\nb");
  }
}

TEST_CASE("hunk round-trip: snippet diff reproduces the hunk's changed lines") {
  Rng rng(0x2B2B);
  for (int iter = 0; iter < 100; ++iter) {
    std::vector<std::string> old_lines = numbered_lines(15);
    std::vector<std::string> new_lines = old_lines;
    for (uint64_t e = 0, n = 1 + rng.below(3); e < n; ++e) {
      const auto at = rng.below(new_lines.size());
      if (rng.uniform01() < 0.5) {
        new_lines[at] = "mut" + std::to_string(rng.below(100)) + "();";
      } else {
        new_lines.insert(new_lines.begin() + static_cast<int64_t>(at),
                         "ins" + std::to_string(rng.below(100)) + "();");
      }
    }
    for (const Hunk& h : extract_hunks(change(old_lines, new_lines))) {
      std::vector<std::string> want_removed, want_added;
      for (const HunkLine& l : h.old_lines) {
        if (l.tag == LineTag::kRemoved) want_removed.push_back(l.text);
      }
      for (const HunkLine& l : h.new_lines) {
        if (l.tag == LineTag::kAdded) want_added.push_back(l.text);
      }
      const auto [old_snippet, new_snippet] = hunk_to_snippets(h);
      std::vector<std::string> got_removed, got_added;
      for (const LineRun& run : diff_lines(old_snippet, new_snippet)) {
        if (run.tag == RunTag::kRemoved) {
          got_removed.insert(got_removed.end(), run.lines.begin(), run.lines.end());
        } else if (run.tag == RunTag::kAdded) {
          got_added.insert(got_added.end(), run.lines.begin(), run.lines.end());
        }
      }
      CHECK(got_removed == want_removed);
      CHECK(got_added == want_added);
    }
  }
}

TEST_CASE("parse_unified_diff: minimal one-section diff") {
  const std::string diff =
      "--- a/f.c\n"
      "+++ b/f.c\n"
      "@@ -1,3 +1,3 @@\n"
      " a\n"
      "-b\n"
      "+x\n"
      " c\n";
  const auto frags = parse_unified_diff(diff);
  REQUIRE(frags.size() == 1);
  CHECK(frags[0].path == "f.c");
  CHECK(frags[0].old_snippet == "a\nb\nc");
  CHECK(frags[0].new_snippet == "a\nx\nc");
}

TEST_CASE("parse_unified_diff: two @@ sections yield two fragments") {
  const std::string diff =
      "--- a/f.c\n"
      "+++ b/f.c\n"
      "@@ -1,2 +1,2 @@\n"
      " a\n"
      "-b\n"
      "+x\n"
      "@@ -10,2 +10,3 @@\n"
      " p\n"
      "+q\n"
      " r\n";
  const auto frags = parse_unified_diff(diff);
  REQUIRE(frags.size() == 2);
  CHECK(frags[1].old_snippet == "p\nr");
  CHECK(frags[1].new_snippet == "p\nq\nr");
}

TEST_CASE("parse_unified_diff: error paths carry the line number") {
  SUBCASE("no @@ section at all") {
    CHECK_THROWS_WITH_AS(parse_unified_diff("just some text\n"),
                         doctest::Contains("line 1"), Error);
  }
  SUBCASE("@@ before any file header") {
    CHECK_THROWS_AS(parse_unified_diff("@@ -1,1 +1,1 @@\n x\n"), Error);
  }
  SUBCASE("unparseable hunk header") {
    const std::string diff = "--- a/f\n+++ b/f\n@@ nonsense @@\n";
    CHECK_THROWS_WITH_AS(parse_unified_diff(diff), doctest::Contains("line 3"), Error);
  }
  SUBCASE("body shorter than header counts") {
    const std::string diff = "--- a/f\n+++ b/f\n@@ -1,2 +1,2 @@\n a\n";
    CHECK_THROWS_AS(parse_unified_diff(diff), Error);
  }
  SUBCASE("error kind is MalformedDiff") {
    try {
      parse_unified_diff("nope\n");
      FAIL("expected an exception");
    } catch (const Error& e) {
      CHECK(e.kind() == "MalformedDiff");
    }
  }
}
