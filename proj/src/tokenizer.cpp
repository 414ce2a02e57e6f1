#include "embedkit/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

namespace embedkit {

namespace {

// ---------------------------------------------------------------------------
// UTF-8 / character classes
// ---------------------------------------------------------------------------

// decodes the codepoint at byte offset i, advancing i; invalid bytes yield
// U+FFFD and advance by one
uint32_t next_codepoint(std::string_view s, size_t& i) {
  const auto byte = [&](size_t k) { return static_cast<unsigned char>(s[k]); };
  const unsigned char b0 = byte(i);
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  auto cont = [&](size_t k) { return k < s.size() && (byte(k) & 0xC0) == 0x80; };
  if ((b0 & 0xE0) == 0xC0 && cont(i + 1)) {
    const uint32_t cp = (static_cast<uint32_t>(b0 & 0x1F) << 6) | (byte(i + 1) & 0x3F);
    i += 2;
    return cp;
  }
  if ((b0 & 0xF0) == 0xE0 && cont(i + 1) && cont(i + 2)) {
    const uint32_t cp = (static_cast<uint32_t>(b0 & 0x0F) << 12) |
                        (static_cast<uint32_t>(byte(i + 1) & 0x3F) << 6) | (byte(i + 2) & 0x3F);
    i += 3;
    return cp;
  }
  if ((b0 & 0xF8) == 0xF0 && cont(i + 1) && cont(i + 2) && cont(i + 3)) {
    const uint32_t cp = (static_cast<uint32_t>(b0 & 0x07) << 18) |
                        (static_cast<uint32_t>(byte(i + 1) & 0x3F) << 12) |
                        (static_cast<uint32_t>(byte(i + 2) & 0x3F) << 6) | (byte(i + 3) & 0x3F);
    i += 4;
    return cp;
  }
  ++i;
  return 0xFFFD;
}

void append_codepoint(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_space_cp(uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' ||
         cp == 0x00A0 || cp == 0x2028 || cp == 0x2029 || (cp >= 0x2000 && cp <= 0x200A);
}

bool is_control_cp(uint32_t cp) {
  return cp < 0x20 || cp == 0x7F || (cp >= 0x80 && cp <= 0x9F) || cp == 0x200B ||
         cp == 0xFEFF;
}

// ASCII punctuation plus the Latin-1 symbol range and General Punctuation
// block; covers the quote/dash styles common in European text
bool is_punct_cp(uint32_t cp) {
  if (cp < 0x80) {
    return (cp >= '!' && cp <= '/') || (cp >= ':' && cp <= '@') || (cp >= '[' && cp <= '`') ||
           (cp >= '{' && cp <= '~');
  }
  return (cp >= 0x00A1 && cp <= 0x00BF) || cp == 0x00D7 || cp == 0x00F7 ||
         (cp >= 0x2010 && cp <= 0x2027) || (cp >= 0x2030 && cp <= 0x205E);
}

uint32_t lower_cp(uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp >= 0x00C0 && cp <= 0x00DE && cp != 0x00D7) return cp + 0x20;  // Latin-1
  if (cp >= 0x0100 && cp <= 0x0137) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp >= 0x0139 && cp <= 0x0148) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x014A && cp <= 0x0177) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp == 0x0178) return 0x00FF;  // Y with diaeresis
  if (cp >= 0x0179 && cp <= 0x017E) return (cp % 2 == 1) ? cp + 1 : cp;
  return cp;
}

std::vector<std::string> split_codepoints(std::string_view word) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < word.size()) {
    const size_t start = i;
    next_codepoint(word, i);
    out.emplace_back(word.substr(start, i - start));
  }
  return out;
}

std::string strip_continuation(const std::string& piece) {
  if (piece.size() > 2 && piece[0] == '#' && piece[1] == '#') return piece.substr(2);
  return piece;
}

bool is_continuation(const std::string& piece) {
  return piece.size() > 2 && piece[0] == '#' && piece[1] == '#';
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

const std::vector<std::string>& Vocab::special_tokens() {
  static const std::vector<std::string> specials = {"[PAD]", "[CLS]", "[SEP]", "[MASK]",
                                                    "[UNK]"};
  return specials;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& specials = special_tokens();
  if (tokens_.size() < specials.size()) {
    throw DataError("vocab: missing special tokens");
  }
  for (size_t i = 0; i < specials.size(); ++i) {
    if (tokens_[i] != specials[i]) {
      throw DataError("vocab: token " + std::to_string(i) + " must be " + specials[i]);
    }
  }
  index_.reserve(tokens_.size());
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }
}

int Vocab::id_of(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("vocab: cannot open '" + path + "' for writing");
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("vocab: cannot open '" + path + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// pre-tokenization
// ---------------------------------------------------------------------------

std::vector<std::string> pre_tokenize(std::string_view text, const TokenizerOptions& opts) {
  std::vector<std::string> words;
  std::string current;
  size_t i = 0;
  while (i < text.size()) {
    uint32_t cp = next_codepoint(text, i);
    if (is_control_cp(cp)) cp = ' ';
    if (is_space_cp(cp)) {
      if (!current.empty()) {
        words.push_back(std::move(current));
        current.clear();
      }
      continue;
    }
    if (opts.lowercase) cp = lower_cp(cp);
    if (is_punct_cp(cp)) {
      if (!current.empty()) {
        words.push_back(std::move(current));
        current.clear();
      }
      std::string p;
      append_codepoint(p, cp);
      words.push_back(std::move(p));
      continue;
    }
    append_codepoint(current, cp);
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

Vocab train_vocab(std::span<const std::string> corpus_lines, int target_size, int min_freq,
                  const TokenizerOptions& opts) {
  if (min_freq < 1) throw ConfigError("train_vocab: min_freq must be >= 1");

  // word frequencies in first-seen order
  std::vector<std::string> word_order;
  std::unordered_map<std::string, int64_t> word_freq;
  for (const auto& line : corpus_lines) {
    for (auto& w : pre_tokenize(line, opts)) {
      auto [it, inserted] = word_freq.emplace(w, 0);
      if (inserted) word_order.push_back(w);
      it->second += 1;
    }
  }
  if (word_order.empty()) throw DataError("train_vocab: corpus has no tokens");

  // seed the alphabet: every character both as word-initial and continuation
  std::set<std::string> char_set;
  for (const auto& w : word_order) {
    for (const auto& c : split_codepoints(w)) char_set.insert(c);
  }
  std::vector<std::string> tokens = Vocab::special_tokens();
  for (const auto& c : char_set) tokens.push_back(c);
  for (const auto& c : char_set) tokens.push_back("##" + c);

  if (target_size <= static_cast<int>(tokens.size())) {
    throw ConfigError("train_vocab: target_size " + std::to_string(target_size) +
                      " not above specials + alphabet (" + std::to_string(tokens.size()) + ")");
  }

  // each word as its current piece sequence
  struct WordState {
    std::vector<std::string> pieces;
    int64_t freq;
  };
  std::vector<WordState> words;
  words.reserve(word_order.size());
  for (const auto& w : word_order) {
    auto cps = split_codepoints(w);
    WordState ws;
    ws.freq = word_freq[w];
    for (size_t k = 0; k < cps.size(); ++k) {
      ws.pieces.push_back(k == 0 ? cps[k] : "##" + cps[k]);
    }
    words.push_back(std::move(ws));
  }

  std::set<std::string> have(tokens.begin(), tokens.end());
  while (static_cast<int>(tokens.size()) < target_size) {
    // ordered map gives the deterministic lexicographic tie-break
    std::map<std::pair<std::string, std::string>, int64_t> pair_freq;
    for (const auto& ws : words) {
      for (size_t k = 0; k + 1 < ws.pieces.size(); ++k) {
        pair_freq[{ws.pieces[k], ws.pieces[k + 1]}] += ws.freq;
      }
    }
    std::pair<std::string, std::string> best;
    int64_t best_freq = 0;
    for (const auto& [pair, freq] : pair_freq) {
      if (freq > best_freq) {
        best_freq = freq;
        best = pair;
      }
    }
    if (best_freq < min_freq) break;  // achievable size reached

    const std::string merged = best.first + strip_continuation(best.second);
    for (auto& ws : words) {
      auto& p = ws.pieces;
      for (size_t k = 0; k + 1 < p.size();) {
        if (p[k] == best.first && p[k + 1] == best.second) {
          p[k] = merged;
          p.erase(p.begin() + static_cast<std::ptrdiff_t>(k) + 1);
        } else {
          ++k;
        }
      }
    }
    if (have.insert(merged).second) tokens.push_back(merged);
  }

  return Vocab(std::move(tokens));
}

Vocab merge_vocab(const Vocab& a, const Vocab& b) {
  std::vector<std::string> tokens = Vocab::special_tokens();
  std::set<std::string> have(tokens.begin(), tokens.end());
  for (int i = Vocab::kNumSpecials; i < a.size(); ++i) {
    if (have.insert(a.token(i)).second) tokens.push_back(a.token(i));
  }
  for (int i = Vocab::kNumSpecials; i < b.size(); ++i) {
    if (have.insert(b.token(i)).second) tokens.push_back(b.token(i));
  }
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

namespace {

// greedy longest-match; empty result means the word cannot be tokenized
std::vector<int> wordpiece_match(const Vocab& vocab, const std::string& word) {
  const auto cps = split_codepoints(word);
  std::vector<int> pieces;
  size_t start = 0;
  while (start < cps.size()) {
    int matched_id = -1;
    size_t matched_end = start;
    std::string candidate = start == 0 ? "" : "##";
    // longest prefix wins: extend then remember the last hit
    std::string built = candidate;
    for (size_t end = start; end < cps.size(); ++end) {
      built += cps[end];
      const int id = vocab.id_of(built);
      if (id >= 0) {
        matched_id = id;
        matched_end = end + 1;
      }
    }
    if (matched_id < 0) return {};
    pieces.push_back(matched_id);
    start = matched_end;
  }
  return pieces;
}

}  // namespace

TokenSeq encode(const Vocab& vocab, std::string_view text, int max_len,
                const TokenizerOptions& opts) {
  if (max_len < 3) throw ConfigError("encode: max_len must be >= 3");
  TokenSeq seq;
  seq.max_len = max_len;
  seq.ids.reserve(static_cast<size_t>(max_len));
  seq.ids.push_back(Vocab::kCls);
  for (const auto& word : pre_tokenize(text, opts)) {
    const auto pieces = wordpiece_match(vocab, word);
    if (pieces.empty()) {
      seq.ids.push_back(Vocab::kUnk);
    } else {
      seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.end());
    }
    if (static_cast<int>(seq.ids.size()) >= max_len - 1) break;
  }
  if (static_cast<int>(seq.ids.size()) > max_len - 1) seq.ids.resize(static_cast<size_t>(max_len) - 1);
  seq.ids.push_back(Vocab::kSep);
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.ids.resize(static_cast<size_t>(max_len), Vocab::kPad);
  seq.attention_mask.resize(static_cast<size_t>(max_len), 0);
  return seq;
}

std::string decode(const Vocab& vocab, std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab.size()) throw DataError("decode: id out of range");
    if (id < Vocab::kNumSpecials) continue;
    const std::string& tok = vocab.token(id);
    if (is_continuation(tok)) {
      out += strip_continuation(tok);
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

}  // namespace embedkit
