#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "embedkit/datasets.hpp"

namespace embedkit::data {

// Desk-scale stand-ins for the Czech evaluation sets, generated with known
// ground truth: STS scores are content-word Jaccard, Costra triplets plant a
// nearer/farther lexical structure, document labels are keyword-determined,
// and ranking relevance is query-term containment.
struct SyntheticSizes {
  int corpus_sentences{2000};
  int sts_train{200};
  int sts_test{300};
  int costra_triplets{400};
  int multilabel_docs{600};
  int sentiment_docs{600};
  int ranking_train_queries{60};
  int ranking_test_queries{30};
  int ranking_candidates{40};
  int parallel_pairs{600};

  void validate() const;
};

struct SyntheticSuite {
  std::vector<std::string> corpus;  // one sentence per line
  std::vector<StsPair> sts;         // carries train/test split
  std::vector<CostraTriplet> costra;
  std::vector<LabeledDoc> multilabel_docs;
  std::vector<LabeledDoc> sentiment_docs;  // labels 0=neg 1=neutral 2=pos
  std::vector<QueryDocPair> ranking_train;
  std::vector<QueryDocPair> ranking_test;
  std::vector<ParallelPair> parallel;
  std::vector<std::string> fillers;  // function words, excluded by the overlap oracle
  int num_topics{0};
};

SyntheticSuite make_synthetic_suite(uint64_t seed, const SyntheticSizes& sizes = {});

// Jaccard similarity over non-stopword tokens, scaled to 0..5. This is the
// scorer the planted STS pairs are built from.
double token_overlap_score(const std::string& a, const std::string& b,
                           std::span<const std::string> stopwords);

// writes the canonical file layout: corpus.txt, sts.jsonl, costra.jsonl,
// docs_multilabel.jsonl, docs_sentiment.jsonl, ranking_train.jsonl,
// ranking_test.jsonl, parallel.jsonl, fillers.txt
void write_suite(const SyntheticSuite& suite, const std::string& dir);

}  // namespace embedkit::data
