#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "embedkit/errors.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

// spearman cannot rank a constant vector
struct UndefinedCorrelationError : DataError {
  using DataError::DataError;
};

// Scores are reported in percentage points (0-100; correlations -100..100).
struct MetricReport {
  std::string name;
  double value{0.0};
  std::optional<double> stddev;
  int n{0};
};

namespace metrics {

// Pearson correlation of fractional (average) ranks; ties share their
// averaged rank. Input range (-1, 1), callers scale to table units.
double spearman(std::span<const double> x, std::span<const double> y);

double cosine(std::span<const float> a, std::span<const float> b);

// per-category fraction of triplets with cos(anchor,closer) > cos(anchor,farther);
// ties count as incorrect. Macro score averages the scored categories.
struct CostraResult {
  std::map<std::string, double> per_category;  // percent
  std::map<std::string, int> counts;
  double macro{0.0};  // percent
  int total{0};
};

// the four categories that enter the macro average
const std::vector<std::string>& costra_scored_categories();

CostraResult costra_score(std::span<const std::string> categories, const Tensor& anchor,
                          const Tensor& closer, const Tensor& farther);

enum class F1Mode { Micro, Macro };

// label sets per example; classes absent from both sides contribute 0 to macro
double f1_scores(std::span<const std::vector<int>> pred, std::span<const std::vector<int>> gold,
                 F1Mode mode, int num_labels);

// per query: |relevant in top-k| / min(k, candidates); macro-averaged, x100.
// Each inner vector is the relevance of that query's ranked candidates.
double precision_at_k(std::span<const std::vector<bool>> ranked_relevance, int k = 10);

struct KFoldResult {
  double mean{0.0};
  double stddev{0.0};  // population
  std::vector<double> fold_scores;
};

// deterministic shuffled split; folds differ in size by <= 1. The callback
// trains on train indices and returns the score on the test fold.
KFoldResult kfold_eval(
    int n_records, int k, uint64_t seed,
    const std::function<double(std::span<const int> train_idx, std::span<const int> test_idx)>& run);

// fold index boundaries helper, exposed for tests
std::vector<std::vector<int>> kfold_splits(int n_records, int k, uint64_t seed);

double mean_of(std::span<const double> v);
double population_stddev(std::span<const double> v);

}  // namespace metrics
}  // namespace embedkit
