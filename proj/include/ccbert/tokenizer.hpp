#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ccbert/error.hpp"

namespace ccbert {

// Byte-level BPE vocabulary. Ids are dense: the four specials, then the 256
// single-byte tokens, then one token per merge in learned order. Specials are
// never produced by merges; UNK is reserved for imported vocabularies and
// never emitted by encode.
struct Vocab {
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kMask = 1;
  static constexpr int32_t kNull = 2;
  static constexpr int32_t kUnk = 3;
  static constexpr int32_t kSpecialCount = 4;
  static constexpr int32_t kByteBase = kSpecialCount;  // byte b has id 4 + b

  std::vector<std::pair<std::string, std::string>> merges;
  std::unordered_map<std::string, int32_t> token_to_id;  // non-special tokens
  std::vector<std::string> id_to_token;                  // dense, size() entries

  int32_t size() const { return static_cast<int32_t>(id_to_token.size()); }
};

// Partition of text into pre-tokenization pieces: runs of word bytes
// (alphanumeric, '_', anything >= 0x80), runs of whitespace, and runs of
// punctuation. Merges never cross piece boundaries, so the concatenation of
// decoded tokens restores the text exactly.
std::vector<std::string> pretokenize(const std::string& text);

// Learns merges greedily by descending pair frequency over the corpus, ties
// broken by lexicographic order of the (left, right) byte strings. Stops at
// vocab_size tokens or when no pair occurs twice, whichever comes first.
// vocab_size must exceed 260 (specials + byte alphabet). Throws
// Error("CorpusEmpty") when the corpus yields no bytes.
Vocab train_bpe(const std::function<bool(std::string*)>& next_text, int32_t vocab_size);
Vocab train_bpe(const std::vector<std::string>& corpus, int32_t vocab_size);

// Deterministic; never emits special ids (byte-level base alphabet makes
// unknown bytes impossible).
std::vector<int32_t> encode(const Vocab& vocab, const std::string& text);

// encode() with the merge rank table built once; use for corpus loops. The
// referenced Vocab must outlive the encoder.
class BpeEncoder {
 public:
  explicit BpeEncoder(const Vocab& vocab);
  std::vector<int32_t> encode(const std::string& text) const;

 private:
  const Vocab* vocab_;
  std::unordered_map<std::string, int32_t> rank_;
};

// Inverse of encode. NULL decodes as the empty string; other special ids and
// ids >= vocab size throw Error("IdOutOfRange").
std::string decode(const Vocab& vocab, const std::vector<int32_t>& ids);

// Text format: line 1 "CCBERT-VOCAB v1 <vocab_size>", one merge per line
// "left<TAB>right", then one line per non-special token "id<TAB>token". All
// token bytes are hex encoded so arbitrary bytes survive the line format.
void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace ccbert
