#include "ccbert/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "ccbert/jsonl.hpp"

namespace ccbert {

namespace {

enum class ByteClass { kWord, kSpace, kPunct };

ByteClass classify(unsigned char c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
    return ByteClass::kSpace;
  }
  if ((c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
      c == '_' || c >= 0x80) {
    return ByteClass::kWord;
  }
  return ByteClass::kPunct;
}

const char* kSpecialNames[] = {"<PAD>", "<MASK>", "<NULL>", "<UNK>"};

std::string to_hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out += digits[c >> 4];
    out += digits[c & 0xf];
  }
  return out;
}

std::string from_hex(const std::string& hex, const std::string& context) {
  auto nibble = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    fail("BadVocabFile", context + ": invalid hex digit");
  };
  if (hex.size() % 2 != 0) fail("BadVocabFile", context + ": odd hex length");
  std::string out;
  out.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2) {
    out += static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1]));
  }
  return out;
}

void add_token(Vocab& v, const std::string& token) {
  const auto id = static_cast<int32_t>(v.id_to_token.size());
  if (!v.token_to_id.emplace(token, id).second) {
    fail("BadVocabFile", "duplicate token at id " + std::to_string(id));
  }
  v.id_to_token.push_back(token);
}

Vocab base_vocab() {
  Vocab v;
  for (const char* name : kSpecialNames) add_token(v, name);
  for (int b = 0; b < 256; ++b) add_token(v, std::string(1, static_cast<char>(b)));
  return v;
}

}  // namespace

std::vector<std::string> pretokenize(const std::string& text) {
  std::vector<std::string> pieces;
  size_t start = 0;
  while (start < text.size()) {
    const ByteClass cls = classify(static_cast<unsigned char>(text[start]));
    size_t end = start + 1;
    while (end < text.size() && classify(static_cast<unsigned char>(text[end])) == cls) {
      ++end;
    }
    pieces.push_back(text.substr(start, end - start));
    start = end;
  }
  return pieces;
}

Vocab train_bpe(const std::function<bool(std::string*)>& next_text, int32_t vocab_size) {
  if (vocab_size <= Vocab::kSpecialCount + 256) {
    fail("BadConfig", "train_bpe: vocab_size must exceed " +
                          std::to_string(Vocab::kSpecialCount + 256));
  }

  std::unordered_map<std::string, int64_t> piece_counts;
  std::string text;
  int64_t total_bytes = 0;
  while (next_text(&text)) {
    total_bytes += static_cast<int64_t>(text.size());
    for (std::string& piece : pretokenize(text)) {
      ++piece_counts[std::move(piece)];
    }
  }
  if (total_bytes == 0) fail("CorpusEmpty", "train_bpe: corpus yields no bytes");

  struct Word {
    std::vector<std::string> symbols;
    int64_t count;
  };
  std::vector<Word> words;
  words.reserve(piece_counts.size());
  for (const auto& [piece, count] : piece_counts) {
    Word w;
    w.count = count;
    w.symbols.reserve(piece.size());
    for (char c : piece) w.symbols.emplace_back(1, c);
    words.push_back(std::move(w));
  }
  // Pair counting iterates this vector, so give it a deterministic order.
  std::sort(words.begin(), words.end(),
            [](const Word& a, const Word& b) { return a.symbols < b.symbols; });

  Vocab vocab = base_vocab();
  const int32_t merge_target = vocab_size - Vocab::kSpecialCount - 256;

  for (int32_t m = 0; m < merge_target; ++m) {
    // std::map keeps pairs in lexicographic order, which settles frequency
    // ties deterministically.
    std::map<std::pair<std::string, std::string>, int64_t> pair_counts;
    for (const Word& w : words) {
      for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;
      }
    }
    if (pair_counts.empty()) break;

    const std::pair<std::string, std::string>* best = nullptr;
    int64_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = &pair;
        best_count = count;
      }
    }

    const std::string left = best->first, right = best->second;
    const std::string merged = left + right;
    vocab.merges.emplace_back(left, right);
    add_token(vocab, merged);

    for (Word& w : words) {
      if (w.symbols.size() < 2) continue;
      std::vector<std::string> out;
      out.reserve(w.symbols.size());
      size_t i = 0;
      while (i < w.symbols.size()) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          out.push_back(merged);
          i += 2;
        } else {
          out.push_back(std::move(w.symbols[i]));
          ++i;
        }
      }
      w.symbols = std::move(out);
    }
  }
  return vocab;
}

Vocab train_bpe(const std::vector<std::string>& corpus, int32_t vocab_size) {
  size_t i = 0;
  return train_bpe(
      [&](std::string* out) {
        if (i >= corpus.size()) return false;
        *out = corpus[i++];
        return true;
      },
      vocab_size);
}

namespace {

// Unambiguous composite key for a symbol pair; tokens are raw byte strings
// and may contain any byte, so a separator character would not be safe.
std::string pair_key(const std::string& left, const std::string& right) {
  std::string key;
  key.reserve(4 + left.size() + right.size());
  const auto n = static_cast<uint32_t>(left.size());
  key += static_cast<char>(n & 0xff);
  key += static_cast<char>((n >> 8) & 0xff);
  key += static_cast<char>((n >> 16) & 0xff);
  key += static_cast<char>((n >> 24) & 0xff);
  key += left;
  key += right;
  return key;
}

}  // namespace

BpeEncoder::BpeEncoder(const Vocab& vocab) : vocab_(&vocab) {
  for (size_t r = 0; r < vocab.merges.size(); ++r) {
    rank_.emplace(pair_key(vocab.merges[r].first, vocab.merges[r].second),
                  static_cast<int32_t>(r));
  }
}

std::vector<int32_t> BpeEncoder::encode(const std::string& text) const {
  std::vector<int32_t> ids;
  for (const std::string& piece : pretokenize(text)) {
    std::vector<std::string> symbols;
    symbols.reserve(piece.size());
    for (char c : piece) symbols.emplace_back(1, c);

    // Repeatedly apply the earliest-learned merge present, to every
    // occurrence left to right, until no merge applies.
    while (symbols.size() >= 2) {
      int32_t best_rank = INT32_MAX;
      for (size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = rank_.find(pair_key(symbols[i], symbols[i + 1]));
        if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == INT32_MAX) break;
      const std::string& left = vocab_->merges[static_cast<size_t>(best_rank)].first;
      const std::string& right = vocab_->merges[static_cast<size_t>(best_rank)].second;
      std::vector<std::string> out;
      out.reserve(symbols.size());
      size_t i = 0;
      while (i < symbols.size()) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          out.push_back(left + right);
          i += 2;
        } else {
          out.push_back(std::move(symbols[i]));
          ++i;
        }
      }
      symbols = std::move(out);
    }

    for (const std::string& s : symbols) {
      auto it = vocab_->token_to_id.find(s);
      if (it == vocab_->token_to_id.end()) {
        fail("BadVocabFile", "encode: symbol missing from vocabulary");
      }
      ids.push_back(it->second);
    }
  }
  return ids;
}

std::vector<int32_t> encode(const Vocab& vocab, const std::string& text) {
  return BpeEncoder(vocab).encode(text);
}

std::string decode(const Vocab& vocab, const std::vector<int32_t>& ids) {
  std::string out;
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab.size()) {
      fail("IdOutOfRange", "decode: id " + std::to_string(id) + " outside [0, " +
                               std::to_string(vocab.size()) + ")");
    }
    if (id == Vocab::kNull) continue;  // NULL decodes as empty string
    if (id < Vocab::kSpecialCount) {
      fail("IdOutOfRange", "decode: special id " + std::to_string(id) +
                               " is not decodable");
    }
    out += vocab.id_to_token[static_cast<size_t>(id)];
  }
  return out;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  AtomicFile file(path);
  std::ostream& out = file.stream();
  out << "CCBERT-VOCAB v1 " << vocab.size() << "\n";
  for (const auto& [left, right] : vocab.merges) {
    out << to_hex(left) << '\t' << to_hex(right) << '\n';
  }
  for (int32_t id = Vocab::kSpecialCount; id < vocab.size(); ++id) {
    out << id << '\t' << to_hex(vocab.id_to_token[static_cast<size_t>(id)]) << '\n';
  }
  file.commit();
}

Vocab load_vocab(const std::string& path) {
  std::vector<std::string> lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) fail("BadVocabFile", path + ": empty file");

  std::istringstream header(lines[0]);
  std::string magic, version;
  int64_t size = 0;
  header >> magic >> version >> size;
  if (magic != "CCBERT-VOCAB" || version != "v1" || size <= Vocab::kSpecialCount) {
    fail("BadVocabFile", path + ": bad header '" + lines[0] + "'");
  }

  const int64_t token_lines = size - Vocab::kSpecialCount;
  const int64_t merge_lines = static_cast<int64_t>(lines.size()) - 1 - token_lines;
  if (merge_lines < 0) fail("BadVocabFile", path + ": fewer lines than header declares");

  Vocab vocab;
  for (const char* name : kSpecialNames) add_token(vocab, name);

  auto split_tab = [&](const std::string& line, int64_t line_no) {
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      fail("BadVocabFile", path + ":" + std::to_string(line_no) + ": missing tab");
    }
    return std::pair<std::string, std::string>(line.substr(0, tab), line.substr(tab + 1));
  };

  for (int64_t i = 0; i < merge_lines; ++i) {
    const auto [l, r] = split_tab(lines[static_cast<size_t>(1 + i)], 2 + i);
    vocab.merges.emplace_back(from_hex(l, path), from_hex(r, path));
  }
  for (int64_t i = 0; i < token_lines; ++i) {
    const int64_t line_no = 1 + merge_lines + i;
    const auto [id_str, hex] = split_tab(lines[static_cast<size_t>(line_no)], line_no + 1);
    const int64_t id = std::stoll(id_str);
    if (id != Vocab::kSpecialCount + i) {
      fail("BadVocabFile", path + ":" + std::to_string(line_no + 1) +
                               ": ids must be dense and ascending, got " + id_str);
    }
    add_token(vocab, from_hex(hex, path));
  }
  if (vocab.size() != size) fail("BadVocabFile", path + ": token count mismatch");
  return vocab;
}

}  // namespace ccbert
