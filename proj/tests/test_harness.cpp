#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "embedkit/fp16.hpp"
#include "embedkit/harness.hpp"
#include "embedkit/report.hpp"
#include "embedkit/synthetic.hpp"
#include "testutil.hpp"

using namespace embedkit;
namespace fs = std::filesystem;

namespace {

SentenceEncoder small_encoder(uint64_t seed, const std::vector<std::string>& corpus,
                              int hidden = 16, int layers = 1) {
  Vocab vocab = train_vocab(corpus, 120, 1);
  EncoderConfig cfg;
  cfg.layers = layers;
  cfg.hidden = hidden;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_len = 16;
  cfg.vocab_size = vocab.size();
  cfg.dropout_p = 0.1f;
  return SentenceEncoder{init_encoder(cfg, seed), std::move(vocab), {}};
}

}  // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("probe head separates linearly separable embeddings") {
  // class c occupies its own axis, plus small noise
  const int n = 240, classes = 3, h = 8;
  SplitRng rng(5);
  Tensor embeddings = Tensor::zeros({n, h});
  std::vector<data::LabeledDoc> docs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    docs[static_cast<size_t>(i)].text = "unused";
    docs[static_cast<size_t>(i)].labels = {c};
    for (int j = 0; j < h; ++j) {
      embeddings.mutable_data()[static_cast<size_t>(i * h + j)] =
          (j == c ? 2.0f : 0.0f) + 0.1f * (rng.next_float() - 0.5f);
    }
  }
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> train(idx.begin(), idx.begin() + 180);
  std::vector<int> test(idx.begin() + 180, idx.end());
  ProbeOptions opts;
  opts.head = "multiclass-softmax";
  opts.epochs = 60;
  opts.lr = 0.1;
  const double f1 = probe_fold_score(embeddings, docs, train, test, opts, classes);
  CHECK(f1 >= 99.0);
}

TEST_CASE("probe on shuffled labels lands at chance level") {
  const int n = 600, classes = 3, h = 12;
  SplitRng rng(6);
  Tensor embeddings = Tensor::zeros({n, h});
  for (auto& v : embeddings.mutable_data()) v = static_cast<float>(rng.next_gauss());
  std::vector<data::LabeledDoc> docs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    docs[static_cast<size_t>(i)].text = "unused";
    docs[static_cast<size_t>(i)].labels = {i % classes};  // balanced, independent of x
  }
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  SplitRng(7).shuffle(idx);
  std::vector<int> train(idx.begin(), idx.begin() + 450);
  std::vector<int> test(idx.begin() + 450, idx.end());
  ProbeOptions opts;
  opts.head = "multiclass-softmax";
  opts.epochs = 30;
  opts.lr = 0.05;
  const double f1 = probe_fold_score(embeddings, docs, train, test, opts, classes);
  CHECK(f1 > 100.0 / classes - 5.0);
  CHECK(f1 < 100.0 / classes + 5.0);
}

TEST_CASE("run_probe leaves the encoder untouched and reports fold stats") {
  data::SyntheticSizes sizes;
  sizes.sentiment_docs = 60;
  const auto suite = data::make_synthetic_suite(11, sizes);
  SentenceEncoder enc = small_encoder(3, suite.corpus);
  const std::string before = model_param_hash(enc.model);
  ProbeOptions opts;
  opts.head = "multiclass-softmax";
  opts.k_folds = 3;
  opts.epochs = 5;
  const auto metric = run_probe(enc, suite.sentiment_docs, opts);
  CHECK(model_param_hash(enc.model) == before);
  CHECK(metric.value >= 0.0);
  CHECK(metric.value <= 100.0);
  CHECK(metric.stddev.has_value());
  CHECK(metric.n == 3);
}

TEST_CASE("label outside the configured universe is a data error") {
  std::vector<data::LabeledDoc> docs = {{"x", {7}}};
  SentenceEncoder enc = small_encoder(4, {"jedna dve tri"});
  ProbeOptions opts;
  opts.head = "multiclass-softmax";
  opts.num_labels = 3;
  opts.k_folds = 2;
  CHECK_THROWS_AS(run_probe(enc, docs, opts), DataError);
}

TEST_CASE("zero-shot auto pooling never picks a constant CLS") {
  data::SyntheticSizes sizes;
  sizes.sts_train = 40;
  sizes.sts_test = 40;
  const auto suite = data::make_synthetic_suite(13, sizes);
  SentenceEncoder enc = small_encoder(5, suite.corpus);
  // zero the value projections: attention adds a constant, so the CLS state
  // depends only on its own (shared) token+position embedding
  for (auto& blk : enc.model.blocks) {
    std::fill(blk.wv.mutable_data().begin(), blk.wv.mutable_data().end(), 0.0f);
    std::fill(blk.bv.mutable_data().begin(), blk.bv.mutable_data().end(), 0.0f);
  }
  ZeroShotData zs;
  zs.sts = suite.sts;
  const auto result = run_zero_shot(enc, "auto", zs);
  CHECK(result.pooling != Pooling::CLS);

  SUBCASE("auto without a train split is a config error") {
    ZeroShotData no_train;
    for (const auto& p : suite.sts) {
      if (p.split == "test") no_train.sts.push_back(p);
    }
    CHECK_THROWS_AS(run_zero_shot(enc, "auto", no_train), ConfigError);
  }
}

TEST_CASE("zero-shot reports all three metrics and does not mutate the model") {
  data::SyntheticSizes sizes;
  sizes.sts_train = 30;
  sizes.sts_test = 40;
  sizes.costra_triplets = 40;
  sizes.ranking_test_queries = 4;
  sizes.ranking_candidates = 15;
  const auto suite = data::make_synthetic_suite(17, sizes);
  SentenceEncoder enc = small_encoder(6, suite.corpus);
  const std::string before = model_param_hash(enc.model);
  ZeroShotData zs;
  zs.sts = suite.sts;
  zs.costra = suite.costra;
  zs.ranking = suite.ranking_test;
  const auto result = run_zero_shot(enc, "mean", zs);
  CHECK(model_param_hash(enc.model) == before);
  REQUIRE(result.metrics.size() == 3);
  CHECK(result.metrics[0].name == "STS-Spearman");
  CHECK(result.metrics[1].name == "Costra");
  CHECK(result.metrics[2].name == "P@10");
  for (const auto& m : result.metrics) {
    CHECK(std::isfinite(m.value));
  }
}

TEST_CASE("ranking finetune runs and counts skipped batches") {
  data::SyntheticSizes sizes;
  sizes.ranking_train_queries = 3;
  sizes.ranking_test_queries = 2;
  sizes.ranking_candidates = 12;
  const auto suite = data::make_synthetic_suite(19, sizes);
  SentenceEncoder enc = small_encoder(7, suite.corpus);
  FinetuneOptions opts;
  opts.task = "ranking";
  opts.epochs = 1;
  opts.batch = 8;
  opts.lr = 1e-3;
  const auto result = run_finetune(enc, {}, suite.ranking_train, suite.ranking_test, opts);
  CHECK(result.metric.name == "P@10");
  CHECK(result.metric.value >= 0.0);
  CHECK(result.metric.value <= 100.0);
  CHECK(result.skipped_batches >= 0);
}

TEST_CASE("ablation validates inputs") {
  data::SyntheticSizes sizes;
  sizes.ranking_train_queries = 2;
  sizes.ranking_test_queries = 1;
  sizes.ranking_candidates = 10;
  const auto suite = data::make_synthetic_suite(23, sizes);
  SentenceEncoder enc = small_encoder(8, suite.corpus);
  std::vector<std::pair<std::string, SentenceEncoder>> inits;
  inits.emplace_back("random", enc);
  FinetuneOptions opts;
  opts.epochs = 1;
  std::vector<int> bad_order = {50, 10};
  CHECK_THROWS_AS(
      run_datasize_ablation(inits, suite.ranking_train, suite.ranking_test, bad_order, 1, opts),
      ConfigError);
  std::vector<int> too_big = {10, 100000};
  CHECK_THROWS_AS(
      run_datasize_ablation(inits, suite.ranking_train, suite.ranking_test, too_big, 1, opts),
      ConfigError);
  std::vector<int> ok = {4, 8};
  const auto points = run_datasize_ablation(inits, suite.ranking_train, suite.ranking_test, ok,
                                            2, opts);
  REQUIRE(points.size() == 2);
  CHECK(points[0].repeats.size() == 2);
  const std::string csv = ablation_csv(points);
  CHECK(csv.rfind("init,size,mean,stddev\n", 0) == 0);
}

TEST_CASE("quantize_roundtrip") {
  SUBCASE("zero rows have zero error") {
    Tensor z = Tensor::zeros({3, 8});
    const auto r = quantize_roundtrip(z);
    CHECK(r.max_abs_err == 0.0);
    CHECK(r.max_cos_dev == 0.0);
  }
  SUBCASE("unit-normalized embeddings stay within 1e-3 cosine deviation") {
    SplitRng rng(29);
    Tensor e = Tensor::zeros({50, 64});
    for (int i = 0; i < 50; ++i) {
      float sq = 0;
      std::vector<float> row(64);
      for (auto& v : row) {
        v = static_cast<float>(rng.next_gauss());
        sq += v * v;
      }
      for (int j = 0; j < 64; ++j) {
        e.mutable_data()[static_cast<size_t>(i * 64 + j)] = row[static_cast<size_t>(j)] / std::sqrt(sq);
      }
    }
    const auto r = quantize_roundtrip(e);
    CHECK(r.max_cos_dev < 1e-3);
    CHECK(r.max_abs_err < 1e-3);
  }
  SUBCASE("overflow names the offending rows") {
    Tensor e = Tensor::zeros({3, 2});
    e.mutable_data()[2] = 1e6f;  // row 1
    try {
      quantize_roundtrip(e);
      FAIL("expected NumericError");
    } catch (const NumericError& err) {
      CHECK(std::string(err.what()).find("1") != std::string::npos);
    }
  }
}

TEST_CASE("fp16 conversion spot checks") {
  CHECK(f16_to_f32(f32_to_f16(1.0f)) == 1.0f);
  CHECK(f16_to_f32(f32_to_f16(-2.5f)) == -2.5f);
  CHECK(f16_to_f32(f32_to_f16(0.0f)) == 0.0f);
  CHECK(f16_to_f32(f32_to_f16(65504.0f)) == 65504.0f);
  CHECK(std::isinf(f16_to_f32(f32_to_f16(70000.0f))));
  // round-trip error bounded by eps/2 * |x| for normals
  SplitRng rng(31);
  for (int i = 0; i < 2000; ++i) {
    const float x = static_cast<float>((rng.next_double() * 2 - 1) * 100.0);
    const float back = f16_to_f32(f32_to_f16(x));
    CHECK(std::fabs(back - x) <= std::fabs(x) * 0.000489f + 6e-8f);
  }
}

TEST_CASE("report rendering is deterministic and parses back") {
  EvalReport report;
  report.add_row("model-a", {MetricReport{"STS-Spearman", 71.2345, std::nullopt, 100},
                             MetricReport{"F1-micro", 64.5, 1.25, 5}});
  report.add_row("model-b", {MetricReport{"STS-Spearman", 55.0, std::nullopt, 100}});
  report.metadata["seed"] = "42";

  const std::string md1 = render_report(report, ReportFormat::Markdown);
  const std::string md2 = render_report(report, ReportFormat::Markdown);
  CHECK(md1 == md2);
  // row count = models + header + separator
  int lines = 0;
  for (char c : md1) lines += c == '\n';
  CHECK(md1.find("| model-a |") != std::string::npos);
  CHECK(md1.find("71.23") != std::string::npos);
  CHECK(md1.find("64.50 ± 1.25") != std::string::npos);

  const std::string csv = render_report(report, ReportFormat::Csv);
  CHECK(csv.find("model-a,STS-Spearman,71.23,,100") != std::string::npos);
  CHECK(csv.find("model-a,F1-micro,64.50,1.25,5") != std::string::npos);
}

TEST_CASE("config file loading with env overrides") {
  const auto path = (fs::temp_directory_path() / "ek_cfg.json").string();
  {
    std::ofstream out(path);
    out << R"({"task":"finetune-simcse","lr":0.001,"batch":16,"seed":9,"pooling":"cls"})";
  }
  RunConfig cfg = load_run_config(path);
  CHECK(cfg.task == "finetune-simcse");
  CHECK(cfg.lr == doctest::Approx(0.001));
  CHECK(cfg.batch == 16);
  CHECK(cfg.seed == 9);
  CHECK(cfg.pooling == "cls");

  setenv("EMBEDKIT_LR", "0.5", 1);
  setenv("EMBEDKIT_POOLING", "max", 1);
  RunConfig cfg2 = load_run_config(path);
  CHECK(cfg2.lr == doctest::Approx(0.5));
  CHECK(cfg2.pooling == "max");
  unsetenv("EMBEDKIT_LR");
  unsetenv("EMBEDKIT_POOLING");

  SUBCASE("config hash tracks content") {
    RunConfig a = load_run_config(path);
    RunConfig b = load_run_config(path);
    CHECK(a.config_hash() == b.config_hash());
    b.lr = 0.123;
    CHECK(a.config_hash() != b.config_hash());
  }
}

TEST_SUITE_END();
