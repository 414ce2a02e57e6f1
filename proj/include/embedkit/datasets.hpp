#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "embedkit/errors.hpp"

namespace embedkit::data {

// JSONL schemas, field names exact:
//   sts      {"a","b","score","split"}
//   costra   {"anchor","closer","farther","category"}
//   docs     {"text","labels"}
//   ranking  {"query_id","query","doc","label"}
//   parallel {"src","tgt"}

struct StsPair {
  std::string a;
  std::string b;
  double score{0.0};
  std::string split;  // "train" or "test"
};

struct CostraTriplet {
  std::string anchor;
  std::string closer;
  std::string farther;
  std::string category;
};

struct LabeledDoc {
  std::string text;
  std::vector<int> labels;  // non-empty; singleton for sentiment
};

struct QueryDocPair {
  std::string query_id;
  std::string query;
  std::string doc;
  double label{0.0};  // relevance in [0, 1]
};

struct ParallelPair {
  std::string src;
  std::string tgt;
};

using WarnFn = std::function<void(const std::string&)>;
void default_warn(const std::string& message);

std::vector<StsPair> load_sts(const std::string& path, const WarnFn& warn = default_warn);
std::vector<CostraTriplet> load_costra(const std::string& path, const WarnFn& warn = default_warn);
std::vector<LabeledDoc> load_docs(const std::string& path, const WarnFn& warn = default_warn);
std::vector<QueryDocPair> load_ranking(const std::string& path, const WarnFn& warn = default_warn);
std::vector<ParallelPair> load_parallel(const std::string& path, const WarnFn& warn = default_warn);

void save_sts(const std::string& path, std::span<const StsPair> records);
void save_costra(const std::string& path, std::span<const CostraTriplet> records);
void save_docs(const std::string& path, std::span<const LabeledDoc> records);
void save_ranking(const std::string& path, std::span<const QueryDocPair> records);
void save_parallel(const std::string& path, std::span<const ParallelPair> records);

struct PreprocessOptions {
  int min_words{3};
  int max_words{64};
};

// paragraph lines -> filtered, deduplicated sentences. Splits on
// sentence-final punctuation followed by whitespace and an uppercase letter,
// strips control characters, keeps sentences within the word bounds.
std::vector<std::string> preprocess_corpus(std::span<const std::string> lines,
                                           const PreprocessOptions& opts = {});

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, std::span<const std::string> lines);

// uniform sample of n records without replacement; prefix-of-shuffle, so
// subsets nest: subset(n1) is a prefix of subset(n2) for n1 < n2
template <typename T>
std::vector<T> subset(std::span<const T> records, size_t n, uint64_t seed);

std::vector<int> subset_indices(size_t total, size_t n, uint64_t seed);

}  // namespace embedkit::data
