#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "embedkit/checkpoint.hpp"
#include "embedkit/datasets.hpp"
#include "embedkit/encoder.hpp"
#include "embedkit/report.hpp"

namespace embedkit {

// Run configuration, loaded from a JSON file with environment overrides
// (EMBEDKIT_<UPPER_KEY>). Every run pins a seed.
struct RunConfig {
  std::string task;

  // paths
  std::string corpus;
  std::string vocab;
  std::string model;
  std::string teacher_emb;
  std::string parallel;
  std::string data;
  std::string out;
  std::string report;

  uint64_t seed{42};

  // training hyperparameters (desk-scale defaults; --paper-scale swaps in the
  // full-scale profile)
  double lr{3e-4};
  int batch{32};
  int epochs{3};
  int steps{0};  // when > 0, step-driven instead of epoch-driven
  double temperature{0.05};
  double weight_decay{0.01};
  double warmup_frac{0.10};
  double clip_norm{0.0};  // 0 = off
  std::string pooling{"auto"};
  double mlm_ratio{0.15};
  double enc_mask_ratio{0.30};
  double dec_mask_ratio{0.50};
  double relevance_threshold{0.5};
  int folds{5};
  std::string head{"multilabel-sigmoid"};
  std::string finetune_task{"ranking"};
  bool lowercase{false};
  bool preprocess{false};

  EncoderConfig encoder;  // used when initializing a fresh model

  std::string canonical_json() const;
  std::string config_hash() const;
};

RunConfig load_run_config(const std::string& path);
void apply_env_overrides(RunConfig& cfg);
void apply_paper_scale(RunConfig& cfg);

// ---------------------------------------------------------------------------
// training recipes; each writes <out>/model.ekc and <out>/vocab.txt
// ---------------------------------------------------------------------------

struct TrainStats {
  std::vector<double> losses;  // one entry per optimizer step
  int skipped_batches{0};
};

TrainStats train_mlm(const RunConfig& cfg);
TrainStats train_retromae(const RunConfig& cfg);
TrainStats train_simcse(const RunConfig& cfg);
// writes both model_with_head.ekc and the stripped model.ekc
TrainStats train_distill(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// evaluation regimes
// ---------------------------------------------------------------------------

struct ZeroShotData {
  std::vector<data::StsPair> sts;             // train rows drive pooling selection
  std::vector<data::CostraTriplet> costra;
  std::vector<data::QueryDocPair> ranking;    // candidates per query
  double relevance_threshold{0.5};
};

struct ZeroShotResult {
  std::vector<MetricReport> metrics;
  Pooling pooling{Pooling::CLS};
};

// pooling_policy: auto|cls|mean|max; auto needs sts train rows and never
// selects a pooling whose validation correlation is undefined
ZeroShotResult run_zero_shot(const SentenceEncoder& enc, const std::string& pooling_policy,
                             const ZeroShotData& data);

struct ProbeOptions {
  std::string head{"multilabel-sigmoid"};  // or multiclass-softmax
  int k_folds{5};
  int num_labels{0};
  int epochs{30};
  double lr{0.05};
  int batch{64};
  double threshold{0.5};
  uint64_t seed{42};
};

// linear head on frozen CLS embeddings; the encoder hash is asserted
// unchanged across the probe
MetricReport run_probe(const SentenceEncoder& enc, std::span<const data::LabeledDoc> docs,
                       const ProbeOptions& opts);

// one probe fold on fixed embedding rows (no encoder in the loop): trains the
// head on train_idx rows and scores F1 on test_idx rows
double probe_fold_score(const Tensor& embeddings, std::span<const data::LabeledDoc> docs,
                        std::span<const int> train_idx, std::span<const int> test_idx,
                        const ProbeOptions& opts, int num_labels);

struct FinetuneOptions {
  std::string task{"ranking"};  // or classification
  std::string head{"multiclass-softmax"};
  int num_labels{0};
  int k_folds{5};
  int epochs{2};
  double lr{1e-4};
  int batch{32};
  double temperature{0.05};
  double relevance_threshold{0.5};
  double threshold{0.5};
  double weight_decay{0.01};
  uint64_t seed{42};
  Pooling pooling{Pooling::MEAN};
};

struct FinetuneResult {
  MetricReport metric;
  int skipped_batches{0};
};

// classification: full model + head, k-fold; ranking: bi-encoder in-batch
// contrastive fine-tune scored by P@10 on the test pairs
FinetuneResult run_finetune(const SentenceEncoder& enc,
                            std::span<const data::LabeledDoc> docs,
                            std::span<const data::QueryDocPair> ranking_train,
                            std::span<const data::QueryDocPair> ranking_test,
                            const FinetuneOptions& opts);

struct AblationPoint {
  std::string init_label;
  int size{0};
  double mean{0.0};
  double stddev{0.0};
  std::vector<double> repeats;
};

std::vector<AblationPoint> run_datasize_ablation(
    std::span<const std::pair<std::string, SentenceEncoder>> inits,
    std::span<const data::QueryDocPair> ranking_train,
    std::span<const data::QueryDocPair> ranking_test, std::span<const int> sizes, int repeats,
    const FinetuneOptions& opts);

std::string ablation_csv(std::span<const AblationPoint> points);

struct QuantizeReport {
  double max_abs_err{0.0};
  double max_cos_dev{0.0};
  int rows{0};
  int dim{0};
};

// f32 -> f16 -> f32; values outside the f16 range raise NumericError naming
// the offending rows
QuantizeReport quantize_roundtrip(const Tensor& embeddings);

// ---------------------------------------------------------------------------
// helpers shared by the CLI and tests
// ---------------------------------------------------------------------------

// fingerprint over all parameters, for frozen-encoder and reproducibility checks
std::string model_param_hash(const EncoderModel& model);

SentenceEncoder load_sentence_encoder(const std::string& model_path,
                                      const std::string& vocab_path, bool lowercase = false);

// ranks each query's candidates by cosine and returns per-query relevance in
// rank order (relevant = label > threshold)
std::vector<std::vector<bool>> rank_by_cosine(const SentenceEncoder& enc, Pooling pooling,
                                              std::span<const data::QueryDocPair> pairs,
                                              double threshold);

double sts_spearman(const SentenceEncoder& enc, Pooling pooling,
                    std::span<const data::StsPair> pairs);

// mean pairwise cosine among the given sentences (anisotropy probe)
double mean_pairwise_cosine(const SentenceEncoder& enc, Pooling pooling,
                            std::span<const std::string> texts);

}  // namespace embedkit
