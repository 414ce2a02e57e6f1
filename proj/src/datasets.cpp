#include "embedkit/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "embedkit/rng.hpp"

namespace embedkit::data {

using nlohmann::json;

void default_warn(const std::string& message) { std::cerr << "warning: " << message << "\n"; }

namespace {

struct LineCtx {
  const std::string& path;
  size_t line_no;

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(path + ":" + std::to_string(line_no) + ": " + what);
  }
};

// strict field access with line-addressed errors; unknown fields warn only
template <typename T>
T required(const json& j, const char* field, const LineCtx& ctx) {
  const auto it = j.find(field);
  if (it == j.end()) ctx.fail(std::string("missing required field '") + field + "'");
  T out{};
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    ctx.fail(std::string("field '") + field + "' has the wrong type");
  }
  return out;
}

void warn_unknown(const json& j, std::initializer_list<const char*> known, const LineCtx& ctx,
                  const WarnFn& warn) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(known.begin(), known.end(),
                     [&key](const char* k) { return key == k; }) == known.end()) {
      warn(ctx.path + ":" + std::to_string(ctx.line_no) + ": unknown field '" + key + "'");
    }
  }
}

template <typename Record>
std::vector<Record> load_jsonl(const std::string& path, const WarnFn& warn,
                               Record (*parse)(const json&, const LineCtx&, const WarnFn&)) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<Record> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;  // tolerate blank lines / trailing newline
    LineCtx ctx{path, line_no};
    json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) ctx.fail("malformed JSON object");
    records.push_back(parse(j, ctx, warn));
  }
  return records;
}

StsPair parse_sts(const json& j, const LineCtx& ctx, const WarnFn& warn) {
  warn_unknown(j, {"a", "b", "score", "split"}, ctx, warn);
  StsPair r;
  r.a = required<std::string>(j, "a", ctx);
  r.b = required<std::string>(j, "b", ctx);
  r.score = required<double>(j, "score", ctx);
  r.split = required<std::string>(j, "split", ctx);
  if (!std::isfinite(r.score)) ctx.fail("score must be finite");
  if (r.split != "train" && r.split != "test") ctx.fail("split must be 'train' or 'test'");
  return r;
}

CostraTriplet parse_costra(const json& j, const LineCtx& ctx, const WarnFn& warn) {
  warn_unknown(j, {"anchor", "closer", "farther", "category"}, ctx, warn);
  CostraTriplet r;
  r.anchor = required<std::string>(j, "anchor", ctx);
  r.closer = required<std::string>(j, "closer", ctx);
  r.farther = required<std::string>(j, "farther", ctx);
  r.category = required<std::string>(j, "category", ctx);
  // all six source categories parse; scoring filters to the four scored ones
  static const std::set<std::string> known = {"basic",          "modality", "time",
                                              "style",          "opposite", "generalization"};
  if (known.find(r.category) == known.end()) ctx.fail("unknown category '" + r.category + "'");
  return r;
}

LabeledDoc parse_docs(const json& j, const LineCtx& ctx, const WarnFn& warn) {
  warn_unknown(j, {"text", "labels"}, ctx, warn);
  LabeledDoc r;
  r.text = required<std::string>(j, "text", ctx);
  r.labels = required<std::vector<int>>(j, "labels", ctx);
  if (r.labels.empty()) ctx.fail("labels must be non-empty");
  for (int c : r.labels) {
    if (c < 0) ctx.fail("labels must be non-negative ids");
  }
  return r;
}

QueryDocPair parse_ranking(const json& j, const LineCtx& ctx, const WarnFn& warn) {
  warn_unknown(j, {"query_id", "query", "doc", "label"}, ctx, warn);
  QueryDocPair r;
  r.query_id = required<std::string>(j, "query_id", ctx);
  r.query = required<std::string>(j, "query", ctx);
  r.doc = required<std::string>(j, "doc", ctx);
  r.label = required<double>(j, "label", ctx);
  if (!(r.label >= 0.0 && r.label <= 1.0)) ctx.fail("label must be in [0, 1]");
  return r;
}

ParallelPair parse_parallel(const json& j, const LineCtx& ctx, const WarnFn& warn) {
  warn_unknown(j, {"src", "tgt"}, ctx, warn);
  ParallelPair r;
  r.src = required<std::string>(j, "src", ctx);
  r.tgt = required<std::string>(j, "tgt", ctx);
  if (r.src.empty() || r.tgt.empty()) ctx.fail("src and tgt must be non-empty");
  return r;
}

void write_jsonl(const std::string& path, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& row : rows) out << row.dump() << '\n';
}

}  // namespace

std::vector<StsPair> load_sts(const std::string& path, const WarnFn& warn) {
  return load_jsonl<StsPair>(path, warn, parse_sts);
}
std::vector<CostraTriplet> load_costra(const std::string& path, const WarnFn& warn) {
  return load_jsonl<CostraTriplet>(path, warn, parse_costra);
}
std::vector<LabeledDoc> load_docs(const std::string& path, const WarnFn& warn) {
  return load_jsonl<LabeledDoc>(path, warn, parse_docs);
}
std::vector<QueryDocPair> load_ranking(const std::string& path, const WarnFn& warn) {
  auto records = load_jsonl<QueryDocPair>(path, warn, parse_ranking);
  // pairs sharing a query_id must agree on the query text
  std::map<std::string, std::string> seen;
  for (const auto& r : records) {
    auto [it, inserted] = seen.emplace(r.query_id, r.query);
    if (!inserted && it->second != r.query) {
      throw DataError(path + ": query_id '" + r.query_id + "' maps to differing query texts");
    }
  }
  return records;
}
std::vector<ParallelPair> load_parallel(const std::string& path, const WarnFn& warn) {
  return load_jsonl<ParallelPair>(path, warn, parse_parallel);
}

void save_sts(const std::string& path, std::span<const StsPair> records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back(json{{"a", r.a}, {"b", r.b}, {"score", r.score}, {"split", r.split}});
  }
  write_jsonl(path, rows);
}

void save_costra(const std::string& path, std::span<const CostraTriplet> records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back(json{{"anchor", r.anchor},
                        {"closer", r.closer},
                        {"farther", r.farther},
                        {"category", r.category}});
  }
  write_jsonl(path, rows);
}

void save_docs(const std::string& path, std::span<const LabeledDoc> records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back(json{{"text", r.text}, {"labels", r.labels}});
  }
  write_jsonl(path, rows);
}

void save_ranking(const std::string& path, std::span<const QueryDocPair> records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back(json{{"query_id", r.query_id},
                        {"query", r.query},
                        {"doc", r.doc},
                        {"label", r.label}});
  }
  write_jsonl(path, rows);
}

void save_parallel(const std::string& path, std::span<const ParallelPair> records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back(json{{"src", r.src}, {"tgt", r.tgt}});
  }
  write_jsonl(path, rows);
}

// ---------------------------------------------------------------------------
// corpus preprocessing
// ---------------------------------------------------------------------------

namespace {

bool is_sentence_final(char c) { return c == '.' || c == '!' || c == '?'; }

bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v';
}

// uppercase start covers ASCII plus the Latin-1/Latin-Ext-A letters used by
// Czech; multi-byte check looks at the decoded codepoint
bool starts_uppercase(const std::string& s, size_t i) {
  if (i >= s.size()) return false;
  const unsigned char b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) return s[i] >= 'A' && s[i] <= 'Z';
  if ((b0 & 0xE0) == 0xC0 && i + 1 < s.size()) {
    const uint32_t cp = (static_cast<uint32_t>(b0 & 0x1F) << 6) |
                        (static_cast<unsigned char>(s[i + 1]) & 0x3F);
    if (cp >= 0x00C0 && cp <= 0x00DE && cp != 0x00D7) return true;  // Latin-1 uppers
    if (cp >= 0x0100 && cp <= 0x0137 && cp % 2 == 0) return true;   // Latin Ext-A
    if (cp >= 0x0139 && cp <= 0x0148 && cp % 2 == 1) return true;
    if (cp >= 0x014A && cp <= 0x0177 && cp % 2 == 0) return true;
    if (cp == 0x0178) return true;
    if (cp >= 0x0179 && cp <= 0x017D && cp % 2 == 1) return true;
  }
  return false;
}

// drops control characters and collapses whitespace runs so that otherwise
// equal sentences deduplicate
std::string strip_controls(const std::string& line) {
  std::string out;
  out.reserve(line.size());
  bool pending_space = false;
  for (char c : line) {
    const unsigned char b = static_cast<unsigned char>(c);
    if (b < 0x20 || b == 0x7F) continue;
    if (c == ' ') {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

int word_count(const std::string& s) {
  int count = 0;
  bool in_word = false;
  for (char c : s) {
    if (is_ascii_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++count;
    }
  }
  return count;
}

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && is_ascii_space(s[b])) ++b;
  while (e > b && is_ascii_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

}  // namespace

std::vector<std::string> preprocess_corpus(std::span<const std::string> lines,
                                           const PreprocessOptions& opts) {
  std::vector<std::string> sentences;
  std::set<std::string> seen;
  for (const auto& raw : lines) {
    const std::string line = strip_controls(raw);
    std::vector<std::string> parts;
    size_t start = 0;
    for (size_t i = 0; i < line.size(); ++i) {
      if (!is_sentence_final(line[i])) continue;
      // boundary: final punctuation, whitespace, then an uppercase letter
      size_t j = i + 1;
      while (j < line.size() && is_sentence_final(line[j])) ++j;
      size_t k = j;
      while (k < line.size() && is_ascii_space(line[k])) ++k;
      if (k > j && starts_uppercase(line, k)) {
        parts.push_back(line.substr(start, j - start));
        start = k;
        i = k - 1;
      }
    }
    parts.push_back(line.substr(start));
    for (auto& part : parts) {
      const std::string sentence = trim(part);
      if (sentence.empty()) continue;
      const int words = word_count(sentence);
      if (words < opts.min_words || words > opts.max_words) continue;
      if (seen.insert(sentence).second) sentences.push_back(sentence);
    }
  }
  return sentences;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::string& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& line : lines) out << line << '\n';
}

std::vector<int> subset_indices(size_t total, size_t n, uint64_t seed) {
  if (n > total) {
    throw ConfigError("subset: requested " + std::to_string(n) + " of " + std::to_string(total));
  }
  std::vector<int> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  SplitRng rng(seed);
  rng.shuffle(idx);
  idx.resize(n);
  return idx;
}

template <typename T>
std::vector<T> subset(std::span<const T> records, size_t n, uint64_t seed) {
  const auto idx = subset_indices(records.size(), n, seed);
  std::vector<T> out;
  out.reserve(n);
  for (int i : idx) out.push_back(records[static_cast<size_t>(i)]);
  return out;
}

template std::vector<StsPair> subset(std::span<const StsPair>, size_t, uint64_t);
template std::vector<CostraTriplet> subset(std::span<const CostraTriplet>, size_t, uint64_t);
template std::vector<LabeledDoc> subset(std::span<const LabeledDoc>, size_t, uint64_t);
template std::vector<QueryDocPair> subset(std::span<const QueryDocPair>, size_t, uint64_t);
template std::vector<ParallelPair> subset(std::span<const ParallelPair>, size_t, uint64_t);
template std::vector<std::string> subset(std::span<const std::string>, size_t, uint64_t);

}  // namespace embedkit::data
