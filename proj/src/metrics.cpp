#include "embedkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "embedkit/rng.hpp"

namespace embedkit::metrics {

namespace {

std::vector<double> fractional_ranks(std::span<const double> v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    // ranks are 1-based; tied entries share the average rank
    const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw UndefinedCorrelationError("spearman: constant input vector");
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  if (x.size() < 2) throw ConfigError("spearman: need at least 2 points");
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  return pearson(rx, ry);
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom == 0.0) return 0.0;
  return dot / denom;
}

const std::vector<std::string>& costra_scored_categories() {
  static const std::vector<std::string> cats = {"time", "style", "generalization", "opposite"};
  return cats;
}

CostraResult costra_score(std::span<const std::string> categories, const Tensor& anchor,
                          const Tensor& closer, const Tensor& farther) {
  const int n = anchor.rows();
  if (closer.rows() != n || farther.rows() != n ||
      static_cast<int>(categories.size()) != n) {
    throw DimensionError("costra_score: triplet size mismatch");
  }
  const auto& scored = costra_scored_categories();
  std::map<std::string, int> correct;
  std::map<std::string, int> total;
  const int h = anchor.cols();
  for (int i = 0; i < n; ++i) {
    const auto& cat = categories[static_cast<size_t>(i)];
    if (std::find(scored.begin(), scored.end(), cat) == scored.end()) continue;
    const auto row = [h](const Tensor& t, int r) {
      return t.data().subspan(static_cast<size_t>(r) * h, static_cast<size_t>(h));
    };
    const double sim_closer = cosine(row(anchor, i), row(closer, i));
    const double sim_farther = cosine(row(anchor, i), row(farther, i));
    total[cat] += 1;
    if (sim_closer > sim_farther) correct[cat] += 1;  // ties are incorrect
  }
  CostraResult result;
  double macro_sum = 0.0;
  int macro_n = 0;
  for (const auto& cat : scored) {
    if (total[cat] == 0) continue;
    const double acc = 100.0 * correct[cat] / total[cat];
    result.per_category[cat] = acc;
    result.counts[cat] = total[cat];
    result.total += total[cat];
    macro_sum += acc;
    macro_n += 1;
  }
  if (macro_n == 0) throw DataError("costra_score: no triplets in scored categories");
  result.macro = macro_sum / macro_n;
  return result;
}

double f1_scores(std::span<const std::vector<int>> pred, std::span<const std::vector<int>> gold,
                 F1Mode mode, int num_labels) {
  if (pred.size() != gold.size()) throw DimensionError("f1_scores: length mismatch");
  if (num_labels < 1) throw ConfigError("f1_scores: num_labels must be >= 1");
  std::vector<int64_t> tp(static_cast<size_t>(num_labels), 0);
  std::vector<int64_t> fp(static_cast<size_t>(num_labels), 0);
  std::vector<int64_t> fn(static_cast<size_t>(num_labels), 0);
  std::vector<char> in_pred(static_cast<size_t>(num_labels), 0);
  std::vector<char> in_gold(static_cast<size_t>(num_labels), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    for (int c : pred[i]) {
      if (c < 0 || c >= num_labels) throw DataError("f1_scores: label id out of universe");
      in_pred[static_cast<size_t>(c)] = 1;
    }
    for (int c : gold[i]) {
      if (c < 0 || c >= num_labels) throw DataError("f1_scores: label id out of universe");
      in_gold[static_cast<size_t>(c)] = 1;
    }
    for (int c : pred[i]) {
      const bool hit = std::find(gold[i].begin(), gold[i].end(), c) != gold[i].end();
      if (hit) {
        tp[static_cast<size_t>(c)] += 1;
      } else {
        fp[static_cast<size_t>(c)] += 1;
      }
    }
    for (int c : gold[i]) {
      const bool hit = std::find(pred[i].begin(), pred[i].end(), c) != pred[i].end();
      if (!hit) fn[static_cast<size_t>(c)] += 1;
    }
  }
  if (mode == F1Mode::Micro) {
    int64_t stp = 0, sfp = 0, sfn = 0;
    for (int c = 0; c < num_labels; ++c) {
      stp += tp[static_cast<size_t>(c)];
      sfp += fp[static_cast<size_t>(c)];
      sfn += fn[static_cast<size_t>(c)];
    }
    const double denom = 2.0 * static_cast<double>(stp) + static_cast<double>(sfp) + static_cast<double>(sfn);
    if (denom == 0.0) return 0.0;
    return 100.0 * 2.0 * static_cast<double>(stp) / denom;
  }
  // macro: classes absent from both pred and gold contribute F1 = 0
  double total = 0.0;
  for (int c = 0; c < num_labels; ++c) {
    const double denom = 2.0 * static_cast<double>(tp[static_cast<size_t>(c)]) +
                         static_cast<double>(fp[static_cast<size_t>(c)]) +
                         static_cast<double>(fn[static_cast<size_t>(c)]);
    total += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp[static_cast<size_t>(c)]) / denom;
  }
  return 100.0 * total / num_labels;
}

double precision_at_k(std::span<const std::vector<bool>> ranked_relevance, int k) {
  if (k < 1) throw ConfigError("precision_at_k: k must be >= 1");
  if (ranked_relevance.empty()) throw DataError("precision_at_k: no queries");
  double total = 0.0;
  for (const auto& rel : ranked_relevance) {
    if (rel.empty()) throw DataError("precision_at_k: query with zero candidates");
    const int denom = std::min<int>(k, static_cast<int>(rel.size()));
    int hits = 0;
    for (int i = 0; i < denom; ++i) {
      if (rel[static_cast<size_t>(i)]) ++hits;
    }
    total += static_cast<double>(hits) / denom;
  }
  return 100.0 * total / static_cast<double>(ranked_relevance.size());
}

std::vector<std::vector<int>> kfold_splits(int n_records, int k, uint64_t seed) {
  if (k < 2) throw ConfigError("kfold: k must be >= 2");
  if (k > n_records) throw ConfigError("kfold: k exceeds record count");
  std::vector<int> idx(static_cast<size_t>(n_records));
  std::iota(idx.begin(), idx.end(), 0);
  SplitRng rng(seed);
  rng.shuffle(idx);
  std::vector<std::vector<int>> folds(static_cast<size_t>(k));
  const int base = n_records / k;
  const int rem = n_records % k;
  size_t cursor = 0;
  for (int f = 0; f < k; ++f) {
    const int size = base + (f < rem ? 1 : 0);
    folds[static_cast<size_t>(f)].assign(idx.begin() + static_cast<std::ptrdiff_t>(cursor),
                                         idx.begin() + static_cast<std::ptrdiff_t>(cursor + static_cast<size_t>(size)));
    cursor += static_cast<size_t>(size);
  }
  return folds;
}

KFoldResult kfold_eval(
    int n_records, int k, uint64_t seed,
    const std::function<double(std::span<const int>, std::span<const int>)>& run) {
  const auto folds = kfold_splits(n_records, k, seed);
  KFoldResult result;
  for (int f = 0; f < k; ++f) {
    std::vector<int> train;
    train.reserve(static_cast<size_t>(n_records));
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      train.insert(train.end(), folds[static_cast<size_t>(g)].begin(), folds[static_cast<size_t>(g)].end());
    }
    result.fold_scores.push_back(run(train, folds[static_cast<size_t>(f)]));
  }
  result.mean = mean_of(result.fold_scores);
  result.stddev = population_stddev(result.fold_scores);
  return result;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double population_stddev(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace embedkit::metrics
