#include "embedkit/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "embedkit/fp16.hpp"
#include "embedkit/hash.hpp"
#include "embedkit/objectives.hpp"
#include "embedkit/optimizer.hpp"
#include "embedkit/rng.hpp"

namespace embedkit {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

namespace {

json run_config_to_json(const RunConfig& c) {
  return json{{"task", c.task},
              {"corpus", c.corpus},
              {"vocab", c.vocab},
              {"model", c.model},
              {"teacher_emb", c.teacher_emb},
              {"parallel", c.parallel},
              {"data", c.data},
              {"out", c.out},
              {"report", c.report},
              {"seed", c.seed},
              {"lr", c.lr},
              {"batch", c.batch},
              {"epochs", c.epochs},
              {"steps", c.steps},
              {"temperature", c.temperature},
              {"weight_decay", c.weight_decay},
              {"warmup_frac", c.warmup_frac},
              {"clip_norm", c.clip_norm},
              {"pooling", c.pooling},
              {"mlm_ratio", c.mlm_ratio},
              {"enc_mask_ratio", c.enc_mask_ratio},
              {"dec_mask_ratio", c.dec_mask_ratio},
              {"relevance_threshold", c.relevance_threshold},
              {"folds", c.folds},
              {"head", c.head},
              {"finetune_task", c.finetune_task},
              {"lowercase", c.lowercase},
              {"preprocess", c.preprocess},
              {"layers", c.encoder.layers},
              {"hidden", c.encoder.hidden},
              {"heads", c.encoder.heads},
              {"ffn_mult", c.encoder.ffn_mult},
              {"max_len", c.encoder.max_len},
              {"vocab_size", c.encoder.vocab_size},
              {"dropout", c.encoder.dropout_p}};
}

template <typename T>
void maybe_set(const json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: key '") + key + "' has the wrong type");
  }
}

void set_from_json(RunConfig& c, const json& j) {
  maybe_set(j, "task", c.task);
  maybe_set(j, "corpus", c.corpus);
  maybe_set(j, "vocab", c.vocab);
  maybe_set(j, "model", c.model);
  maybe_set(j, "teacher_emb", c.teacher_emb);
  maybe_set(j, "parallel", c.parallel);
  maybe_set(j, "data", c.data);
  maybe_set(j, "out", c.out);
  maybe_set(j, "report", c.report);
  maybe_set(j, "seed", c.seed);
  maybe_set(j, "lr", c.lr);
  maybe_set(j, "batch", c.batch);
  maybe_set(j, "epochs", c.epochs);
  maybe_set(j, "steps", c.steps);
  maybe_set(j, "temperature", c.temperature);
  maybe_set(j, "weight_decay", c.weight_decay);
  maybe_set(j, "warmup_frac", c.warmup_frac);
  maybe_set(j, "clip_norm", c.clip_norm);
  maybe_set(j, "pooling", c.pooling);
  maybe_set(j, "mlm_ratio", c.mlm_ratio);
  maybe_set(j, "enc_mask_ratio", c.enc_mask_ratio);
  maybe_set(j, "dec_mask_ratio", c.dec_mask_ratio);
  maybe_set(j, "relevance_threshold", c.relevance_threshold);
  maybe_set(j, "folds", c.folds);
  maybe_set(j, "head", c.head);
  maybe_set(j, "finetune_task", c.finetune_task);
  maybe_set(j, "lowercase", c.lowercase);
  maybe_set(j, "preprocess", c.preprocess);
  maybe_set(j, "layers", c.encoder.layers);
  maybe_set(j, "hidden", c.encoder.hidden);
  maybe_set(j, "heads", c.encoder.heads);
  maybe_set(j, "ffn_mult", c.encoder.ffn_mult);
  maybe_set(j, "max_len", c.encoder.max_len);
  maybe_set(j, "vocab_size", c.encoder.vocab_size);
  maybe_set(j, "dropout", c.encoder.dropout_p);
}

}  // namespace

std::string RunConfig::canonical_json() const { return run_config_to_json(*this).dump(); }

std::string RunConfig::config_hash() const { return fingerprint(canonical_json()); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) {
    throw ConfigError("config: '" + path + "' is not a JSON object");
  }
  RunConfig cfg;
  const json known = run_config_to_json(cfg);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      std::cerr << "warning: " << path << ": unknown config key '" << key << "'\n";
    }
  }
  set_from_json(cfg, j);
  apply_env_overrides(cfg);
  return cfg;
}

void apply_env_overrides(RunConfig& cfg) {
  json j = json::object();
  const json schema = run_config_to_json(cfg);
  for (const auto& [key, value] : schema.items()) {
    std::string env_key = "EMBEDKIT_";
    for (char ch : key) env_key.push_back(static_cast<char>(std::toupper(ch)));
    const char* raw = std::getenv(env_key.c_str());
    if (raw == nullptr) continue;
    if (value.is_string()) {
      j[key] = std::string(raw);
    } else if (value.is_boolean()) {
      const std::string s(raw);
      j[key] = (s == "1" || s == "true" || s == "yes");
    } else {
      json parsed = json::parse(raw, nullptr, false);
      if (parsed.is_discarded() || !parsed.is_number()) {
        throw ConfigError("config: environment override " + env_key + " is not numeric");
      }
      j[key] = parsed;
    }
  }
  set_from_json(cfg, j);
}

void apply_paper_scale(RunConfig& cfg) {
  // full-scale profile: documented, not CI-tested
  cfg.encoder.layers = 12;
  cfg.encoder.hidden = 256;
  cfg.encoder.heads = 4;
  cfg.encoder.max_len = 512;
  cfg.encoder.vocab_size = 57226;
  cfg.batch = 512;
  cfg.steps = 250000;
  cfg.lr = 5e-4;
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

std::string model_param_hash(const EncoderModel& model) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& [name, t] : model.named_params()) {
    h = fnv1a64(name, h);
    const auto d = t.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()),
                                 d.size() * sizeof(float)),
                h);
  }
  return hex64(h);
}

SentenceEncoder load_sentence_encoder(const std::string& model_path,
                                      const std::string& vocab_path, bool lowercase) {
  SentenceEncoder enc;
  enc.model = load_encoder(model_path);
  enc.vocab = Vocab::load(vocab_path);
  enc.tokenizer_opts.lowercase = lowercase;
  if (enc.vocab.size() != enc.model.cfg.vocab_size) {
    throw DataError("vocab size " + std::to_string(enc.vocab.size()) +
                    " does not match model vocab_size " +
                    std::to_string(enc.model.cfg.vocab_size));
  }
  return enc;
}

double sts_spearman(const SentenceEncoder& enc, Pooling pooling,
                    std::span<const data::StsPair> pairs) {
  if (pairs.size() < 2) throw DataError("sts: need at least 2 pairs");
  std::vector<std::string> a_texts, b_texts;
  a_texts.reserve(pairs.size());
  b_texts.reserve(pairs.size());
  for (const auto& p : pairs) {
    a_texts.push_back(p.a);
    b_texts.push_back(p.b);
  }
  Tensor ea = embed_sentences(enc, pooling, a_texts, /*normalize=*/true);
  Tensor eb = embed_sentences(enc, pooling, b_texts, /*normalize=*/true);
  const int h = ea.cols();
  std::vector<double> sims(pairs.size()), gold(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    sims[i] = metrics::cosine(ea.data().subspan(i * static_cast<size_t>(h), static_cast<size_t>(h)),
                              eb.data().subspan(i * static_cast<size_t>(h), static_cast<size_t>(h)));
    gold[i] = pairs[i].score;
  }
  return metrics::spearman(sims, gold);
}

std::vector<std::vector<bool>> rank_by_cosine(const SentenceEncoder& enc, Pooling pooling,
                                              std::span<const data::QueryDocPair> pairs,
                                              double threshold) {
  if (pairs.empty()) throw DataError("ranking: no pairs");
  // group rows per query in first-appearance order
  std::vector<std::string> query_order;
  std::map<std::string, std::vector<size_t>> by_query;
  for (size_t i = 0; i < pairs.size(); ++i) {
    auto [it, inserted] = by_query.emplace(pairs[i].query_id, std::vector<size_t>{});
    if (inserted) query_order.push_back(pairs[i].query_id);
    it->second.push_back(i);
  }
  std::vector<std::string> doc_texts;
  doc_texts.reserve(pairs.size());
  for (const auto& p : pairs) doc_texts.push_back(p.doc);
  std::vector<std::string> query_texts;
  query_texts.reserve(query_order.size());
  for (const auto& qid : query_order) {
    query_texts.push_back(pairs[by_query[qid].front()].query);
  }
  Tensor docs = embed_sentences(enc, pooling, doc_texts, /*normalize=*/true);
  Tensor queries = embed_sentences(enc, pooling, query_texts, /*normalize=*/true);
  const int h = docs.cols();

  std::vector<std::vector<bool>> ranked;
  ranked.reserve(query_order.size());
  for (size_t q = 0; q < query_order.size(); ++q) {
    const auto& rows = by_query[query_order[q]];
    const auto qv = queries.data().subspan(q * static_cast<size_t>(h), static_cast<size_t>(h));
    std::vector<std::pair<double, size_t>> scored;
    scored.reserve(rows.size());
    for (size_t r : rows) {
      const auto dv = docs.data().subspan(r * static_cast<size_t>(h), static_cast<size_t>(h));
      scored.emplace_back(metrics::cosine(qv, dv), r);
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;  // ties keep original order
    });
    std::vector<bool> rel;
    rel.reserve(scored.size());
    for (const auto& [score, r] : scored) rel.push_back(pairs[r].label > threshold);
    ranked.push_back(std::move(rel));
  }
  return ranked;
}

double mean_pairwise_cosine(const SentenceEncoder& enc, Pooling pooling,
                            std::span<const std::string> texts) {
  if (texts.size() < 2) throw DataError("mean_pairwise_cosine: need at least 2 texts");
  Tensor e = embed_sentences(enc, pooling, texts, /*normalize=*/true);
  const int h = e.cols();
  double total = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < texts.size(); ++i) {
    for (size_t j = i + 1; j < texts.size(); ++j) {
      const auto a = e.data().subspan(i * static_cast<size_t>(h), static_cast<size_t>(h));
      const auto b = e.data().subspan(j * static_cast<size_t>(h), static_cast<size_t>(h));
      double dot = 0.0;
      for (int k = 0; k < h; ++k) dot += static_cast<double>(a[static_cast<size_t>(k)]) * b[static_cast<size_t>(k)];
      total += dot;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// zero-shot
// ---------------------------------------------------------------------------

ZeroShotResult run_zero_shot(const SentenceEncoder& enc, const std::string& pooling_policy,
                             const ZeroShotData& data) {
  const std::string hash_before = model_param_hash(enc.model);

  Pooling chosen;
  if (pooling_policy == "auto") {
    std::vector<data::StsPair> train_pairs;
    for (const auto& p : data.sts) {
      if (p.split == "train") train_pairs.push_back(p);
    }
    if (train_pairs.size() < 2) {
      throw ConfigError("zero-shot: pooling policy 'auto' needs an STS train split");
    }
    bool any = false;
    double best = 0.0;
    chosen = Pooling::CLS;
    for (Pooling p : {Pooling::CLS, Pooling::MEAN, Pooling::MAX}) {
      double score;
      try {
        score = sts_spearman(enc, p, train_pairs);
      } catch (const UndefinedCorrelationError&) {
        continue;  // degenerate pooling (e.g. constant CLS) never wins
      }
      if (!any || score > best) {
        any = true;
        best = score;
        chosen = p;
      }
    }
    if (!any) throw DataError("zero-shot: no pooling produced a defined validation correlation");
  } else {
    chosen = pooling_from_string(pooling_policy);
  }

  ZeroShotResult result;
  result.pooling = chosen;

  std::vector<data::StsPair> test_pairs;
  for (const auto& p : data.sts) {
    if (p.split == "test") test_pairs.push_back(p);
  }
  if (!test_pairs.empty()) {
    const double rho = sts_spearman(enc, chosen, test_pairs);
    result.metrics.push_back(
        MetricReport{"STS-Spearman", 100.0 * rho, std::nullopt, static_cast<int>(test_pairs.size())});
  }

  if (!data.costra.empty()) {
    std::vector<std::string> anchors, closers, farthers, categories;
    for (const auto& t : data.costra) {
      anchors.push_back(t.anchor);
      closers.push_back(t.closer);
      farthers.push_back(t.farther);
      categories.push_back(t.category);
    }
    Tensor ea = embed_sentences(enc, chosen, anchors, true);
    Tensor ec = embed_sentences(enc, chosen, closers, true);
    Tensor ef = embed_sentences(enc, chosen, farthers, true);
    const auto costra = metrics::costra_score(categories, ea, ec, ef);
    result.metrics.push_back(MetricReport{"Costra", costra.macro, std::nullopt, costra.total});
  }

  if (!data.ranking.empty()) {
    const auto ranked = rank_by_cosine(enc, chosen, data.ranking, data.relevance_threshold);
    result.metrics.push_back(MetricReport{"P@10", metrics::precision_at_k(ranked, 10),
                                          std::nullopt, static_cast<int>(ranked.size())});
  }

  if (model_param_hash(enc.model) != hash_before) {
    throw ContractError("zero-shot: evaluation mutated model parameters");
  }
  return result;
}

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

namespace {

int resolve_num_labels(std::span<const data::LabeledDoc> docs, int configured) {
  int max_label = -1;
  for (const auto& d : docs) {
    for (int c : d.labels) max_label = std::max(max_label, c);
  }
  const int universe = configured > 0 ? configured : max_label + 1;
  if (max_label >= universe) {
    throw DataError("docs: label id " + std::to_string(max_label) +
                    " outside universe of size " + std::to_string(universe));
  }
  return universe;
}

struct HeadParams {
  Tensor w;
  Tensor b;
};

HeadParams init_head(int h, int classes, uint64_t seed) {
  HeadParams head;
  head.w = Tensor::zeros({h, classes}, /*requires_grad=*/true);
  head.b = Tensor::zeros({classes}, /*requires_grad=*/true);
  SplitRng rng(seed);
  for (auto& v : head.w.mutable_data()) v = rng.truncated_normal(0.02f);
  return head;
}

Tensor multi_hot(std::span<const data::LabeledDoc> docs, std::span<const int> idx,
                 int num_labels) {
  Tensor t = Tensor::zeros({static_cast<int>(idx.size()), num_labels});
  auto tv = t.mutable_data();
  for (size_t i = 0; i < idx.size(); ++i) {
    for (int c : docs[static_cast<size_t>(idx[i])].labels) {
      tv[i * static_cast<size_t>(num_labels) + static_cast<size_t>(c)] = 1.0f;
    }
  }
  return t;
}

std::vector<std::vector<int>> predict_labels(const Tensor& logits, bool multilabel,
                                             double threshold) {
  std::vector<std::vector<int>> out;
  const int n = logits.rows(), c = logits.cols();
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<int> labels;
    if (multilabel) {
      for (int j = 0; j < c; ++j) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.at(i, j))));
        if (p > threshold) labels.push_back(j);
      }
    } else {
      int best = 0;
      for (int j = 1; j < c; ++j) {
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      }
      labels.push_back(best);
    }
    out.push_back(std::move(labels));
  }
  return out;
}

std::vector<std::vector<int>> gold_labels(std::span<const data::LabeledDoc> docs,
                                          std::span<const int> idx) {
  std::vector<std::vector<int>> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(docs[static_cast<size_t>(i)].labels);
  return out;
}

}  // namespace

double probe_fold_score(const Tensor& embeddings, std::span<const data::LabeledDoc> docs,
                        std::span<const int> train_idx, std::span<const int> test_idx,
                        const ProbeOptions& opts, int num_labels) {
  const bool multilabel = opts.head == "multilabel-sigmoid";
  if (!multilabel && opts.head != "multiclass-softmax") {
    throw ConfigError("probe: head must be multilabel-sigmoid or multiclass-softmax");
  }
  const int h = embeddings.cols();
  HeadParams head = init_head(h, num_labels, opts.seed);
  AdamWConfig ocfg;
  ocfg.weight_decay = 0.0f;
  AdamW opt({head.w, head.b}, ocfg);
  std::vector<int> order(train_idx.begin(), train_idx.end());
  SplitRng rng(opts.seed);
  const int steps_per_epoch =
      std::max(1, static_cast<int>(order.size()) / std::max(1, opts.batch));
  Schedule sched{static_cast<float>(opts.lr), std::max(1, opts.epochs * steps_per_epoch), 0.0f};
  int step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch)) {
      const size_t count = std::min(static_cast<size_t>(opts.batch), order.size() - start);
      std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(start + count));
      Tape tape;
      Tensor x = gather_rows(tape, embeddings, batch_idx);
      Tensor logits = linear(tape, x, head.w, head.b);
      Tensor loss;
      if (multilabel) {
        loss = bce_with_logits_mean(tape, logits, multi_hot(docs, batch_idx, num_labels));
      } else {
        std::vector<int> targets;
        targets.reserve(batch_idx.size());
        for (int i : batch_idx) targets.push_back(docs[static_cast<size_t>(i)].labels[0]);
        loss = cross_entropy_mean(tape, logits, targets);
      }
      tape.backward(loss);
      opt.step(lr_at(sched, step++));
      opt.zero_grads();
    }
  }
  Tape tape = Tape::inference();
  Tensor x = gather_rows(tape, embeddings, test_idx);
  Tensor logits = linear(tape, x, head.w, head.b);
  const auto pred = predict_labels(logits, multilabel, opts.threshold);
  const auto gold = gold_labels(docs, test_idx);
  return metrics::f1_scores(pred, gold,
                            multilabel ? metrics::F1Mode::Micro : metrics::F1Mode::Macro,
                            num_labels);
}

MetricReport run_probe(const SentenceEncoder& enc, std::span<const data::LabeledDoc> docs,
                       const ProbeOptions& opts) {
  if (docs.empty()) throw DataError("probe: no documents");
  const bool multilabel = opts.head == "multilabel-sigmoid";
  if (!multilabel && opts.head != "multiclass-softmax") {
    throw ConfigError("probe: head must be multilabel-sigmoid or multiclass-softmax");
  }
  const int num_labels = resolve_num_labels(docs, opts.num_labels);
  const std::string hash_before = model_param_hash(enc.model);

  // CLS pooling is the probing standard; embeddings computed once, frozen
  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (const auto& d : docs) texts.push_back(d.text);
  Tensor embeddings = embed_sentences(enc, Pooling::CLS, texts, /*normalize=*/false);

  auto result = metrics::kfold_eval(
      static_cast<int>(docs.size()), opts.k_folds, opts.seed,
      [&](std::span<const int> train_idx, std::span<const int> test_idx) {
        return probe_fold_score(embeddings, docs, train_idx, test_idx, opts, num_labels);
      });

  if (model_param_hash(enc.model) != hash_before) {
    throw ContractError("probe: encoder parameters changed under a frozen probe");
  }
  return MetricReport{multilabel ? "F1-micro" : "F1-macro", result.mean, result.stddev,
                      opts.k_folds};
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

namespace {

struct EncodedCache {
  std::vector<TokenSeq> seqs;
};

TokenBatch batch_from_texts(const SentenceEncoder& enc, std::span<const std::string> texts) {
  std::vector<TokenSeq> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) {
    seqs.push_back(encode(enc.vocab, t, enc.cfg().max_len, enc.tokenizer_opts));
  }
  return pack_batch(seqs);
}

double finetune_classification_fold(const SentenceEncoder& base,
                                    std::span<const data::LabeledDoc> docs,
                                    std::span<const int> train_idx,
                                    std::span<const int> test_idx, int num_labels,
                                    const FinetuneOptions& opts) {
  const bool multilabel = opts.head == "multilabel-sigmoid";
  SentenceEncoder enc{clone_encoder(base.model), base.vocab, base.tokenizer_opts};
  HeadParams head = init_head(enc.cfg().hidden, num_labels, opts.seed);
  std::vector<Tensor> params = enc.model.params();
  params.push_back(head.w);
  params.push_back(head.b);
  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(opts.weight_decay);
  AdamW opt(params, ocfg);

  std::vector<int> order(train_idx.begin(), train_idx.end());
  SplitRng rng(opts.seed);
  const int steps_per_epoch = std::max(1, static_cast<int>(order.size()) / std::max(1, opts.batch));
  Schedule sched{static_cast<float>(opts.lr), std::max(1, opts.epochs * steps_per_epoch), 0.10f};
  int step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch)) {
      const size_t count = std::min(static_cast<size_t>(opts.batch), order.size() - start);
      std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(start + count));
      std::vector<std::string> texts;
      texts.reserve(batch_idx.size());
      for (int i : batch_idx) texts.push_back(docs[static_cast<size_t>(i)].text);
      TokenBatch batch = batch_from_texts(enc, texts);
      Tape tape;
      Tensor states = encoder_forward(tape, enc.model, batch, /*training=*/true,
                                      rng.split(9000 + static_cast<uint64_t>(step)).next_u64());
      Tensor pooled = pool(tape, states, batch, Pooling::CLS);
      Tensor logits = linear(tape, pooled, head.w, head.b);
      Tensor loss;
      if (multilabel) {
        loss = bce_with_logits_mean(tape, logits, multi_hot(docs, batch_idx, num_labels));
      } else {
        std::vector<int> targets;
        targets.reserve(batch_idx.size());
        for (int i : batch_idx) targets.push_back(docs[static_cast<size_t>(i)].labels[0]);
        loss = cross_entropy_mean(tape, logits, targets);
      }
      check_finite(loss.data(), "finetune_classification loss");
      tape.backward(loss);
      opt.step(lr_at(sched, step++));
      opt.zero_grads();
    }
  }

  std::vector<std::string> test_texts;
  test_texts.reserve(test_idx.size());
  for (int i : test_idx) test_texts.push_back(docs[static_cast<size_t>(i)].text);
  TokenBatch batch = batch_from_texts(enc, test_texts);
  Tape tape = Tape::inference();
  Tensor states = encoder_forward(tape, enc.model, batch, /*training=*/false, 0);
  Tensor pooled = pool(tape, states, batch, Pooling::CLS);
  Tensor logits = linear(tape, pooled, head.w, head.b);
  const auto pred = predict_labels(logits, multilabel, opts.threshold);
  const auto gold = gold_labels(docs, test_idx);
  return metrics::f1_scores(pred, gold,
                            multilabel ? metrics::F1Mode::Micro : metrics::F1Mode::Macro,
                            num_labels);
}

// bi-encoder in-batch contrastive fine-tune; returns skipped batch count
int finetune_ranking_inplace(SentenceEncoder& enc,
                             std::span<const data::QueryDocPair> train_pairs,
                             const FinetuneOptions& opts) {
  if (train_pairs.empty()) throw DataError("finetune ranking: no training pairs");
  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(opts.weight_decay);
  AdamW opt(enc.model.params(), ocfg);

  std::vector<int> order(train_pairs.size());
  std::iota(order.begin(), order.end(), 0);
  SplitRng rng(opts.seed);
  const int steps_per_epoch =
      std::max(1, static_cast<int>(order.size()) / std::max(1, opts.batch));
  Schedule sched{static_cast<float>(opts.lr), std::max(1, opts.epochs * steps_per_epoch), 0.10f};
  int step = 0;
  int skipped = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (size_t start = 0; start + 1 < order.size() || (start < order.size() && opts.batch == 1);
         start += static_cast<size_t>(opts.batch)) {
      const size_t count = std::min(static_cast<size_t>(opts.batch), order.size() - start);
      if (count < 2) break;  // in-batch negatives need at least 2 docs
      std::vector<int> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(start + count));
      // anchors: rows whose doc is labeled relevant
      std::vector<int> anchor_rows;
      for (size_t i = 0; i < batch_idx.size(); ++i) {
        if (train_pairs[static_cast<size_t>(batch_idx[i])].label > opts.relevance_threshold) {
          anchor_rows.push_back(static_cast<int>(i));
        }
      }
      if (anchor_rows.empty()) {
        ++skipped;
        continue;
      }
      std::vector<std::string> queries, doc_texts;
      for (int r : anchor_rows) {
        queries.push_back(train_pairs[static_cast<size_t>(batch_idx[static_cast<size_t>(r)])].query);
      }
      for (int i : batch_idx) doc_texts.push_back(train_pairs[static_cast<size_t>(i)].doc);

      TokenBatch qbatch = batch_from_texts(enc, queries);
      TokenBatch dbatch = batch_from_texts(enc, doc_texts);
      Tape tape;
      const uint64_t sq = rng.split(5000 + static_cast<uint64_t>(step)).next_u64();
      const uint64_t sd = rng.split(6000 + static_cast<uint64_t>(step)).next_u64();
      Tensor qs = encoder_forward(tape, enc.model, qbatch, /*training=*/true, sq);
      Tensor ds = encoder_forward(tape, enc.model, dbatch, /*training=*/true, sd);
      Tensor qp = l2_normalize_rows(tape, pool(tape, qs, qbatch, opts.pooling));
      Tensor dp = l2_normalize_rows(tape, pool(tape, ds, dbatch, opts.pooling));
      Tensor logits = scale(tape, matmul_nt(tape, qp, dp),
                            1.0f / static_cast<float>(opts.temperature));
      Tensor loss = cross_entropy_mean(tape, logits, anchor_rows);
      check_finite(loss.data(), "finetune_ranking loss");
      tape.backward(loss);
      opt.step(lr_at(sched, step++));
      opt.zero_grads();
    }
  }
  return skipped;
}

}  // namespace

FinetuneResult run_finetune(const SentenceEncoder& enc,
                            std::span<const data::LabeledDoc> docs,
                            std::span<const data::QueryDocPair> ranking_train,
                            std::span<const data::QueryDocPair> ranking_test,
                            const FinetuneOptions& opts) {
  FinetuneResult result;
  if (opts.task == "classification") {
    if (docs.empty()) throw DataError("finetune classification: no documents");
    const int num_labels = resolve_num_labels(docs, opts.num_labels);
    auto fold = metrics::kfold_eval(
        static_cast<int>(docs.size()), opts.k_folds, opts.seed,
        [&](std::span<const int> train_idx, std::span<const int> test_idx) {
          return finetune_classification_fold(enc, docs, train_idx, test_idx, num_labels, opts);
        });
    const bool multilabel = opts.head == "multilabel-sigmoid";
    result.metric = MetricReport{multilabel ? "F1-micro" : "F1-macro", fold.mean, fold.stddev,
                                 opts.k_folds};
    return result;
  }
  if (opts.task != "ranking") {
    throw ConfigError("finetune: task must be classification or ranking");
  }
  // ranking mode forbids any head: the bi-encoder itself is optimized
  SentenceEncoder tuned{clone_encoder(enc.model), enc.vocab, enc.tokenizer_opts};
  result.skipped_batches = finetune_ranking_inplace(tuned, ranking_train, opts);
  const auto ranked = rank_by_cosine(tuned, opts.pooling, ranking_test, opts.relevance_threshold);
  result.metric = MetricReport{"P@10", metrics::precision_at_k(ranked, 10), std::nullopt,
                               static_cast<int>(ranked.size())};
  return result;
}

std::vector<AblationPoint> run_datasize_ablation(
    std::span<const std::pair<std::string, SentenceEncoder>> inits,
    std::span<const data::QueryDocPair> ranking_train,
    std::span<const data::QueryDocPair> ranking_test, std::span<const int> sizes, int repeats,
    const FinetuneOptions& opts) {
  if (repeats < 1) throw ConfigError("ablation: repeats must be >= 1");
  for (size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1]) throw ConfigError("ablation: sizes must be ascending");
  }
  for (int s : sizes) {
    if (s > static_cast<int>(ranking_train.size())) {
      throw ConfigError("ablation: size " + std::to_string(s) + " exceeds training set of " +
                        std::to_string(ranking_train.size()));
    }
  }
  std::vector<AblationPoint> points;
  for (const auto& [label, enc] : inits) {
    for (int size : sizes) {
      AblationPoint point;
      point.init_label = label;
      point.size = size;
      for (int r = 0; r < repeats; ++r) {
        const uint64_t sub_seed = SplitRng(opts.seed).split(static_cast<uint64_t>(size))
                                      .split(static_cast<uint64_t>(r))
                                      .next_u64();
        const auto sub = data::subset(ranking_train, static_cast<size_t>(size), sub_seed);
        FinetuneOptions fopts = opts;
        fopts.task = "ranking";
        fopts.seed = sub_seed;
        const auto res = run_finetune(enc, {}, sub, ranking_test, fopts);
        point.repeats.push_back(res.metric.value);
      }
      point.mean = metrics::mean_of(point.repeats);
      point.stddev = metrics::population_stddev(point.repeats);
      points.push_back(std::move(point));
    }
  }
  return points;
}

std::string ablation_csv(std::span<const AblationPoint> points) {
  std::ostringstream os;
  os << "init,size,mean,stddev\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& p : points) {
    os << p.init_label << ',' << p.size << ',' << p.mean << ',' << p.stddev << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// quantization check
// ---------------------------------------------------------------------------

QuantizeReport quantize_roundtrip(const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw DimensionError("quantize: expected [rows x dim]");
  check_finite(embeddings.data(), "quantize input");
  const int rows = embeddings.rows(), dim = embeddings.cols();
  std::vector<int> overflow_rows;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < dim; ++j) {
      if (std::fabs(embeddings.at(i, j)) > fp16_max()) {
        overflow_rows.push_back(i);
        break;
      }
    }
  }
  if (!overflow_rows.empty()) {
    std::string msg = "quantize: values outside f16 range in rows";
    for (size_t i = 0; i < overflow_rows.size() && i < 16; ++i) {
      msg += ' ' + std::to_string(overflow_rows[i]);
    }
    if (overflow_rows.size() > 16) msg += " ...";
    throw NumericError(msg);
  }

  QuantizeReport report;
  report.rows = rows;
  report.dim = dim;
  for (int i = 0; i < rows; ++i) {
    std::vector<float> rt(static_cast<size_t>(dim));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int j = 0; j < dim; ++j) {
      const float orig = embeddings.at(i, j);
      const float back = f16_to_f32(f32_to_f16(orig));
      rt[static_cast<size_t>(j)] = back;
      report.max_abs_err = std::max(report.max_abs_err,
                                    static_cast<double>(std::fabs(back - orig)));
      dot += static_cast<double>(orig) * back;
      na += static_cast<double>(orig) * orig;
      nb += static_cast<double>(back) * back;
    }
    if (na > 0.0 && nb > 0.0) {
      const double cos = dot / (std::sqrt(na) * std::sqrt(nb));
      report.max_cos_dev = std::max(report.max_cos_dev, std::fabs(cos - 1.0));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// training recipes
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> load_training_sentences(const RunConfig& cfg) {
  if (cfg.corpus.empty()) throw ConfigError("training: config key 'corpus' is required");
  auto lines = data::read_lines(cfg.corpus);
  if (cfg.preprocess) {
    lines = data::preprocess_corpus(lines);
  } else {
    std::vector<std::string> kept;
    for (auto& l : lines) {
      if (!l.empty()) kept.push_back(std::move(l));
    }
    lines = std::move(kept);
  }
  if (lines.empty()) throw DataError("training: corpus '" + cfg.corpus + "' has no sentences");
  return lines;
}

Vocab load_required_vocab(const RunConfig& cfg) {
  if (cfg.vocab.empty()) throw ConfigError("training: config key 'vocab' is required");
  return Vocab::load(cfg.vocab);
}

SentenceEncoder init_or_load_student(const RunConfig& cfg, Vocab vocab, uint64_t seed) {
  SentenceEncoder enc;
  if (!cfg.model.empty()) {
    enc.model = load_encoder(cfg.model);
    if (enc.model.cfg.vocab_size != vocab.size()) {
      throw DataError("training: checkpoint vocab_size does not match vocab file");
    }
  } else {
    EncoderConfig ecfg = cfg.encoder;
    ecfg.vocab_size = vocab.size();
    enc.model = init_encoder(ecfg, seed);
  }
  enc.vocab = std::move(vocab);
  enc.tokenizer_opts.lowercase = cfg.lowercase;
  return enc;
}

void save_outputs(const RunConfig& cfg, const EncoderModel& model, const Vocab& vocab,
                  const char* model_name = "model.ekc") {
  if (cfg.out.empty()) throw ConfigError("training: config key 'out' is required");
  fs::create_directories(cfg.out);
  save_encoder((fs::path(cfg.out) / model_name).string(), model);
  vocab.save((fs::path(cfg.out) / "vocab.txt").string());
}

struct StepDriver {
  int total_steps;
  int batches_per_epoch;
  int batch;

  StepDriver(int n_items, const RunConfig& cfg) {
    batch = std::max(1, cfg.batch);
    batches_per_epoch = std::max(1, n_items / batch);
    total_steps = cfg.steps > 0 ? cfg.steps : std::max(1, cfg.epochs) * batches_per_epoch;
  }
};

void log_progress(const char* task, int step, int total, double loss) {
  if (step % 50 == 0 || step + 1 == total) {
    std::cout << task << " step " << step + 1 << "/" << total << " loss " << loss << "\n";
  }
}

}  // namespace

TrainStats train_mlm(const RunConfig& cfg) {
  Vocab vocab = load_required_vocab(cfg);
  const auto sentences = load_training_sentences(cfg);
  SentenceEncoder enc = init_or_load_student(cfg, std::move(vocab), cfg.seed);

  std::vector<TokenSeq> seqs;
  seqs.reserve(sentences.size());
  for (const auto& s : sentences) {
    seqs.push_back(encode(enc.vocab, s, enc.cfg().max_len, enc.tokenizer_opts));
  }

  StepDriver driver(static_cast<int>(seqs.size()), cfg);
  Schedule sched{static_cast<float>(cfg.lr), driver.total_steps,
                 static_cast<float>(cfg.warmup_frac)};
  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(cfg.weight_decay);
  ocfg.clip_norm = static_cast<float>(cfg.clip_norm);
  AdamW opt(enc.model.params(), ocfg);

  SplitRng rng(cfg.seed);
  std::vector<int> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  TrainStats stats;
  int step = 0;
  for (int epoch = 0; step < driver.total_steps; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (int b = 0; b < driver.batches_per_epoch && step < driver.total_steps; ++b) {
      std::vector<TokenSeq> batch_seqs;
      for (int i = 0; i < driver.batch; ++i) {
        batch_seqs.push_back(seqs[static_cast<size_t>(order[static_cast<size_t>(b * driver.batch + i)])]);
      }
      TokenBatch batch = pack_batch(batch_seqs);
      const MaskingPlan plan =
          make_masking_plan(batch, static_cast<float>(cfg.mlm_ratio), enc.cfg().vocab_size,
                            rng.split(1000 + static_cast<uint64_t>(step)));
      if (plan.slots.empty()) {
        ++stats.skipped_batches;
        continue;
      }
      Tape tape;
      Tensor loss = mlm_loss(tape, enc.model, batch, plan,
                             rng.split(2000 + static_cast<uint64_t>(step)).next_u64());
      tape.backward(loss);
      opt.step(lr_at(sched, step));
      opt.zero_grads();
      stats.losses.push_back(loss.item());
      log_progress("mlm", step, driver.total_steps, loss.item());
      ++step;
    }
  }
  save_outputs(cfg, enc.model, enc.vocab);
  return stats;
}

TrainStats train_retromae(const RunConfig& cfg) {
  Vocab vocab = load_required_vocab(cfg);
  const auto sentences = load_training_sentences(cfg);
  SentenceEncoder enc = init_or_load_student(cfg, std::move(vocab), cfg.seed);
  ShallowDecoder decoder = init_decoder(enc.cfg(), cfg.seed + 1);

  std::vector<TokenSeq> seqs;
  seqs.reserve(sentences.size());
  for (const auto& s : sentences) {
    seqs.push_back(encode(enc.vocab, s, enc.cfg().max_len, enc.tokenizer_opts));
  }

  StepDriver driver(static_cast<int>(seqs.size()), cfg);
  Schedule sched{static_cast<float>(cfg.lr), driver.total_steps,
                 static_cast<float>(cfg.warmup_frac)};
  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(cfg.weight_decay);
  ocfg.clip_norm = static_cast<float>(cfg.clip_norm);
  std::vector<Tensor> params = enc.model.params();
  for (auto& t : decoder.params()) params.push_back(t);
  AdamW opt(params, ocfg);

  SplitRng rng(cfg.seed);
  std::vector<int> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  TrainStats stats;
  int step = 0;
  for (int epoch = 0; step < driver.total_steps; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (int b = 0; b < driver.batches_per_epoch && step < driver.total_steps; ++b) {
      std::vector<TokenSeq> batch_seqs;
      for (int i = 0; i < driver.batch; ++i) {
        batch_seqs.push_back(seqs[static_cast<size_t>(order[static_cast<size_t>(b * driver.batch + i)])]);
      }
      TokenBatch batch = pack_batch(batch_seqs);
      Tape tape;
      Tensor loss;
      try {
        loss = retromae_loss(tape, enc.model, decoder, batch,
                             static_cast<float>(cfg.enc_mask_ratio),
                             static_cast<float>(cfg.dec_mask_ratio),
                             rng.split(3000 + static_cast<uint64_t>(step)).next_u64());
      } catch (const DataError&) {
        ++stats.skipped_batches;  // batch with nothing maskable
        continue;
      }
      tape.backward(loss);
      opt.step(lr_at(sched, step));
      opt.zero_grads();
      stats.losses.push_back(loss.item());
      log_progress("retromae", step, driver.total_steps, loss.item());
      ++step;
    }
  }
  // the decoder is pre-training scaffolding; only the encoder ships
  save_outputs(cfg, enc.model, enc.vocab);
  return stats;
}

TrainStats train_simcse(const RunConfig& cfg) {
  Vocab vocab = load_required_vocab(cfg);
  const auto sentences = load_training_sentences(cfg);
  SentenceEncoder enc = init_or_load_student(cfg, std::move(vocab), cfg.seed);
  const Pooling pooling =
      cfg.pooling == "auto" ? Pooling::CLS : pooling_from_string(cfg.pooling);

  StepDriver driver(static_cast<int>(sentences.size()), cfg);
  Schedule sched{static_cast<float>(cfg.lr), driver.total_steps,
                 static_cast<float>(cfg.warmup_frac)};
  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(cfg.weight_decay);
  ocfg.clip_norm = static_cast<float>(cfg.clip_norm);
  AdamW opt(enc.model.params(), ocfg);

  SplitRng rng(cfg.seed);
  std::vector<int> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  TrainStats stats;
  int step = 0;
  for (int epoch = 0; step < driver.total_steps; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (int b = 0; b < driver.batches_per_epoch && step < driver.total_steps; ++b) {
      std::vector<std::string> batch_texts;
      for (int i = 0; i < driver.batch; ++i) {
        batch_texts.push_back(
            sentences[static_cast<size_t>(order[static_cast<size_t>(b * driver.batch + i)])]);
      }
      if (batch_texts.size() < 2) {
        ++stats.skipped_batches;
        continue;
      }
      Tape tape;
      const uint64_t s1 = rng.split(4000 + static_cast<uint64_t>(step)).next_u64();
      const uint64_t s2 = rng.split(7000 + static_cast<uint64_t>(step)).next_u64();
      Tensor loss = simcse_loss(tape, enc, batch_texts, static_cast<float>(cfg.temperature),
                                {s1, s2}, pooling);
      tape.backward(loss);
      opt.step(lr_at(sched, step));
      opt.zero_grads();
      stats.losses.push_back(loss.item());
      log_progress("simcse", step, driver.total_steps, loss.item());
      ++step;
    }
  }
  save_outputs(cfg, enc.model, enc.vocab);
  return stats;
}

TrainStats train_distill(const RunConfig& cfg) {
  Vocab vocab = load_required_vocab(cfg);
  if (cfg.parallel.empty()) throw ConfigError("distill: config key 'parallel' is required");
  if (cfg.teacher_emb.empty()) throw ConfigError("distill: config key 'teacher_emb' is required");
  const auto pairs = data::load_parallel(cfg.parallel);
  bool normalized = false;
  Tensor teacher = load_embeddings(cfg.teacher_emb, &normalized);
  if (teacher.rows() != static_cast<int>(pairs.size())) {
    throw DataError("distill: teacher rows " + std::to_string(teacher.rows()) +
                    " != parallel pairs " + std::to_string(pairs.size()));
  }
  SentenceEncoder enc = init_or_load_student(cfg, std::move(vocab), cfg.seed);
  const Pooling pooling =
      cfg.pooling == "auto" ? Pooling::MEAN : pooling_from_string(cfg.pooling);
  ProjectionHead head = init_projection(enc.cfg().hidden, teacher.cols(), cfg.seed + 7);

  StepDriver driver(static_cast<int>(pairs.size()), cfg);
  Schedule sched{static_cast<float>(cfg.lr), driver.total_steps,
                 static_cast<float>(cfg.warmup_frac)};
  AdamWConfig ocfg;
  ocfg.weight_decay = static_cast<float>(cfg.weight_decay);
  ocfg.clip_norm = static_cast<float>(cfg.clip_norm);
  std::vector<Tensor> params = enc.model.params();
  params.push_back(head.weight);
  AdamW opt(params, ocfg);

  SplitRng rng(cfg.seed);
  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const int ht = teacher.cols();
  TrainStats stats;
  int step = 0;
  for (int epoch = 0; step < driver.total_steps; ++epoch) {
    SplitRng erng = rng.split(static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    for (int b = 0; b < driver.batches_per_epoch && step < driver.total_steps; ++b) {
      std::vector<std::string> src, tgt;
      std::vector<float> teacher_rows;
      for (int i = 0; i < driver.batch; ++i) {
        const int idx = order[static_cast<size_t>(b * driver.batch + i)];
        src.push_back(pairs[static_cast<size_t>(idx)].src);
        tgt.push_back(pairs[static_cast<size_t>(idx)].tgt);
        const auto row = teacher.data().subspan(static_cast<size_t>(idx) * static_cast<size_t>(ht),
                                                static_cast<size_t>(ht));
        teacher_rows.insert(teacher_rows.end(), row.begin(), row.end());
      }
      Tensor batch_teacher =
          Tensor::from_data({driver.batch, ht}, std::move(teacher_rows));
      Tape tape;
      Tensor loss = distill_loss(tape, enc, head, batch_teacher, src, tgt, pooling,
                                 /*training=*/true,
                                 rng.split(8000 + static_cast<uint64_t>(step)).next_u64());
      tape.backward(loss);
      opt.step(lr_at(sched, step));
      opt.zero_grads();
      stats.losses.push_back(loss.item());
      log_progress("distill", step, driver.total_steps, loss.item());
      ++step;
    }
  }

  if (cfg.out.empty()) throw ConfigError("training: config key 'out' is required");
  fs::create_directories(cfg.out);
  auto with_head = enc.model.named_params();
  with_head.emplace_back("proj.weight", head.weight);
  const std::string head_path = (fs::path(cfg.out) / "model_with_head.ekc").string();
  save_checkpoint(head_path, enc.cfg(), with_head);
  // the projection is training scaffolding; the shipped model drops it
  strip_projection(head_path, (fs::path(cfg.out) / "model.ekc").string());
  enc.vocab.save((fs::path(cfg.out) / "vocab.txt").string());
  return stats;
}

}  // namespace embedkit
