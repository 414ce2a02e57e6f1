#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "embedkit/errors.hpp"

namespace embedkit {

// Subword vocabulary. Ids are dense; specials sit at fixed positions.
// Continuation pieces carry the "##" prefix. Learned by BPE-style
// pair-frequency merges, applied with WordPiece greedy longest-match.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecials = 5;

  static const std::vector<std::string>& special_tokens();

  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  // -1 when absent
  int id_of(std::string_view token) const;
  bool contains(std::string_view token) const { return id_of(token) >= 0; }

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// [CLS] ... [SEP] padded to max_len; attention_mask marks real tokens.
struct TokenSeq {
  std::vector<int> ids;
  std::vector<int> attention_mask;
  int max_len{0};
};

struct TokenizerOptions {
  bool lowercase{false};
};

// whitespace split + punctuation split, used by both training and encoding
std::vector<std::string> pre_tokenize(std::string_view text, const TokenizerOptions& opts = {});

// BPE pair-frequency merges over the corpus until the vocabulary reaches
// min(target_size, achievable). Deterministic given corpus order.
Vocab train_vocab(std::span<const std::string> corpus_lines, int target_size, int min_freq,
                  const TokenizerOptions& opts = {});

// specials first, then a's tokens, then b's novel tokens
Vocab merge_vocab(const Vocab& a, const Vocab& b);

// greedy longest-match per word; words with no full tokenization become [UNK]
TokenSeq encode(const Vocab& vocab, std::string_view text, int max_len,
                const TokenizerOptions& opts = {});

// inverse of encode for display/round-trips: drops specials, joins pieces
std::string decode(const Vocab& vocab, std::span<const int> ids);

}  // namespace embedkit
