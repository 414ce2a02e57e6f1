// embedkit command line: tokenizer training, pre-training recipes,
// contrastive fine-tuning, distillation, and the evaluation harness.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "embedkit/checkpoint.hpp"
#include "embedkit/datasets.hpp"
#include "embedkit/harness.hpp"
#include "embedkit/hash.hpp"
#include "embedkit/objectives.hpp"
#include "embedkit/report.hpp"
#include "embedkit/synthetic.hpp"
#include "embedkit/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace embedkit;

namespace {

constexpr const char* kRevision = "embedkit-0.1.0";

std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fingerprint(bytes);
}

std::string model_label(const std::string& path) { return fs::path(path).stem().string(); }

// config file (optional) -> env overrides -> explicit CLI flags
struct ConfigCli {
  std::string config_path;
  std::vector<std::string> overrides;  // raw key=value pairs from flags

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) {
      cfg = load_run_config(config_path);
    } else {
      apply_env_overrides(cfg);
    }
    return cfg;
  }
};

void add_common_train_flags(CLI::App* cmd, ConfigCli& cc, RunConfig& flags,
                            bool& paper_scale, std::vector<bool>& given) {
  given.assign(16, false);
  cmd->add_option("--config", cc.config_path, "JSON run config");
  cmd->add_flag("--paper-scale", paper_scale,
                "use the full-scale training profile (not CI-tested)");
  cmd->add_option("--corpus", flags.corpus, "training corpus, one sentence per line")
      ->each([&given](const std::string&) { given[0] = true; });
  cmd->add_option("--vocab", flags.vocab, "vocabulary file")
      ->each([&given](const std::string&) { given[1] = true; });
  cmd->add_option("--model", flags.model, "initial checkpoint (default: fresh init)")
      ->each([&given](const std::string&) { given[2] = true; });
  cmd->add_option("--out", flags.out, "output directory")
      ->each([&given](const std::string&) { given[3] = true; });
  cmd->add_option("--seed", flags.seed, "run seed")
      ->each([&given](const std::string&) { given[4] = true; });
  cmd->add_option("--lr", flags.lr, "peak learning rate")
      ->each([&given](const std::string&) { given[5] = true; });
  cmd->add_option("--batch", flags.batch, "batch size")
      ->each([&given](const std::string&) { given[6] = true; });
  cmd->add_option("--epochs", flags.epochs, "training epochs")
      ->each([&given](const std::string&) { given[7] = true; });
  cmd->add_option("--steps", flags.steps, "total optimizer steps (overrides epochs)")
      ->each([&given](const std::string&) { given[8] = true; });
  cmd->add_option("--temperature", flags.temperature, "contrastive temperature")
      ->each([&given](const std::string&) { given[9] = true; });
  cmd->add_option("--pooling", flags.pooling, "pooling: auto|cls|mean|max")
      ->each([&given](const std::string&) { given[10] = true; });
  cmd->add_option("--teacher-emb", flags.teacher_emb, "teacher embeddings container")
      ->each([&given](const std::string&) { given[11] = true; });
  cmd->add_option("--parallel", flags.parallel, "parallel corpus JSONL")
      ->each([&given](const std::string&) { given[12] = true; });
}

void merge_flags(RunConfig& cfg, const RunConfig& flags, const std::vector<bool>& given) {
  if (given[0]) cfg.corpus = flags.corpus;
  if (given[1]) cfg.vocab = flags.vocab;
  if (given[2]) cfg.model = flags.model;
  if (given[3]) cfg.out = flags.out;
  if (given[4]) cfg.seed = flags.seed;
  if (given[5]) cfg.lr = flags.lr;
  if (given[6]) cfg.batch = flags.batch;
  if (given[7]) cfg.epochs = flags.epochs;
  if (given[8]) cfg.steps = flags.steps;
  if (given[9]) cfg.temperature = flags.temperature;
  if (given[10]) cfg.pooling = flags.pooling;
  if (given[11]) cfg.teacher_emb = flags.teacher_emb;
  if (given[12]) cfg.parallel = flags.parallel;
}

std::string resolve_vocab_path(const std::string& model_path, const std::string& vocab_flag) {
  if (!vocab_flag.empty()) return vocab_flag;
  const auto sibling = fs::path(model_path).parent_path() / "vocab.txt";
  if (fs::exists(sibling)) return sibling.string();
  throw ConfigError("no --vocab given and no vocab.txt next to the model checkpoint");
}

int run_vocab_train(const std::string& corpus, int size, int min_freq, const std::string& out,
                    bool lowercase) {
  TokenizerOptions opts;
  opts.lowercase = lowercase;
  const auto lines = data::read_lines(corpus);
  Vocab vocab = train_vocab(lines, size, min_freq, opts);
  vocab.save(out);
  std::cout << "vocab: " << vocab.size() << " tokens -> " << out << "\n";
  return 0;
}

int run_vocab_merge(const std::string& a, const std::string& b, const std::string& out) {
  Vocab va = Vocab::load(a);
  Vocab vb = Vocab::load(b);
  Vocab merged = merge_vocab(va, vb);
  merged.save(out);
  std::cout << "vocab: " << va.size() << " + " << vb.size() << " -> " << merged.size()
            << " tokens -> " << out << "\n";
  return 0;
}

struct EvalArgs {
  std::string regime;
  std::string model;
  std::string vocab;
  std::string data;
  std::string report{"report.md"};
  std::string pooling{"auto"};
  std::string task{"ranking"};
  std::string head;
  int folds{0};
  uint64_t seed{42};
  double relevance_threshold{0.5};
  double lr{0.0};
  int epochs{0};
  int batch{0};
  bool lowercase{false};
};

void base_metadata(EvalReport& report, const EvalArgs& args) {
  report.metadata["revision"] = kRevision;
  report.metadata["seed"] = std::to_string(args.seed);
  report.metadata["model"] = args.model;
  RunConfig pseudo;
  pseudo.task = "eval-" + args.regime;
  pseudo.model = args.model;
  pseudo.data = args.data;
  pseudo.seed = args.seed;
  pseudo.pooling = args.pooling;
  pseudo.finetune_task = args.task;
  report.metadata["config_hash"] = pseudo.config_hash();
}

int run_eval(const EvalArgs& args) {
  SentenceEncoder enc =
      load_sentence_encoder(args.model, resolve_vocab_path(args.model, args.vocab), args.lowercase);
  EvalReport report;
  base_metadata(report, args);
  const fs::path dir(args.data);

  if (args.regime == "zero-shot") {
    ZeroShotData zs;
    const auto sts_path = (dir / "sts.jsonl").string();
    const auto costra_path = (dir / "costra.jsonl").string();
    const auto ranking_path = (dir / "ranking_test.jsonl").string();
    if (fs::exists(sts_path)) {
      zs.sts = data::load_sts(sts_path);
      report.metadata["data:sts"] = file_fingerprint(sts_path);
    }
    if (fs::exists(costra_path)) {
      zs.costra = data::load_costra(costra_path);
      report.metadata["data:costra"] = file_fingerprint(costra_path);
    }
    if (fs::exists(ranking_path)) {
      zs.ranking = data::load_ranking(ranking_path);
      report.metadata["data:ranking"] = file_fingerprint(ranking_path);
      report.metadata["ranking_split"] = "ranking_test";
    }
    zs.relevance_threshold = args.relevance_threshold;
    const auto result = run_zero_shot(enc, args.pooling, zs);
    report.metadata["pooling"] = pooling_to_string(result.pooling);
    report.add_row(model_label(args.model), result.metrics);
  } else if (args.regime == "probe") {
    std::vector<MetricReport> metrics;
    const auto ml_path = (dir / "docs_multilabel.jsonl").string();
    const auto se_path = (dir / "docs_sentiment.jsonl").string();
    if (fs::exists(ml_path)) {
      ProbeOptions opts;
      opts.head = "multilabel-sigmoid";
      opts.k_folds = args.folds > 0 ? args.folds : 5;
      opts.seed = args.seed;
      if (args.lr > 0) opts.lr = args.lr;
      if (args.epochs > 0) opts.epochs = args.epochs;
      if (args.batch > 0) opts.batch = args.batch;
      const auto docs = data::load_docs(ml_path);
      auto m = run_probe(enc, docs, opts);
      m.name = "CTDC-style " + m.name;
      metrics.push_back(m);
      report.metadata["data:docs_multilabel"] = file_fingerprint(ml_path);
    }
    if (fs::exists(se_path)) {
      ProbeOptions opts;
      opts.head = "multiclass-softmax";
      opts.k_folds = args.folds > 0 ? args.folds : 10;
      opts.seed = args.seed;
      if (args.lr > 0) opts.lr = args.lr;
      if (args.epochs > 0) opts.epochs = args.epochs;
      if (args.batch > 0) opts.batch = args.batch;
      const auto docs = data::load_docs(se_path);
      auto m = run_probe(enc, docs, opts);
      m.name = "CFD-style " + m.name;
      metrics.push_back(m);
      report.metadata["data:docs_sentiment"] = file_fingerprint(se_path);
    }
    if (metrics.empty()) throw DataError("probe: no docs_*.jsonl files in " + args.data);
    report.add_row(model_label(args.model), metrics);
  } else if (args.regime == "finetune") {
    FinetuneOptions opts;
    opts.task = args.task;
    opts.seed = args.seed;
    opts.relevance_threshold = args.relevance_threshold;
    if (args.folds > 0) opts.k_folds = args.folds;
    if (args.lr > 0) opts.lr = args.lr;
    if (args.epochs > 0) opts.epochs = args.epochs;
    if (args.batch > 0) opts.batch = args.batch;
    if (!args.head.empty()) opts.head = args.head;
    std::vector<MetricReport> metrics;
    if (args.task == "classification") {
      const bool multilabel = opts.head == "multilabel-sigmoid";
      const auto docs_path =
          (dir / (multilabel ? "docs_multilabel.jsonl" : "docs_sentiment.jsonl")).string();
      const auto docs = data::load_docs(docs_path);
      report.metadata["data:docs"] = file_fingerprint(docs_path);
      const auto result = run_finetune(enc, docs, {}, {}, opts);
      metrics.push_back(result.metric);
    } else {
      const auto train_path = (dir / "ranking_train.jsonl").string();
      const auto test_path = (dir / "ranking_test.jsonl").string();
      const auto train = data::load_ranking(train_path);
      const auto test = data::load_ranking(test_path);
      report.metadata["data:ranking_train"] = file_fingerprint(train_path);
      report.metadata["data:ranking_test"] = file_fingerprint(test_path);
      report.metadata["ranking_split"] = "ranking_test";
      const auto result = run_finetune(enc, {}, train, test, opts);
      metrics.push_back(result.metric);
      report.metadata["skipped_batches"] = std::to_string(result.skipped_batches);
    }
    report.add_row(model_label(args.model), metrics);
  } else {
    throw ConfigError("eval: unknown regime '" + args.regime + "'");
  }

  emit_report(report, args.report, report_format_for_path(args.report));
  std::cout << render_report(report, ReportFormat::Markdown);
  std::cout << "report written to " << args.report << "\n";
  return 0;
}

int run_ablate(const std::vector<std::string>& model_paths, const std::string& vocab_flag,
               const std::string& data_dir, const std::string& sizes_csv, int repeats,
               const std::string& out_csv, uint64_t seed, double lr, int epochs, int batch) {
  std::vector<int> sizes;
  std::stringstream ss(sizes_csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) sizes.push_back(std::stoi(item));
  }
  if (sizes.empty()) throw ConfigError("ablate: --sizes is empty");

  std::vector<std::pair<std::string, SentenceEncoder>> inits;
  for (const auto& path : model_paths) {
    inits.emplace_back(model_label(path),
                       load_sentence_encoder(path, resolve_vocab_path(path, vocab_flag)));
  }
  const fs::path dir(data_dir);
  const auto train = data::load_ranking((dir / "ranking_train.jsonl").string());
  const auto test = data::load_ranking((dir / "ranking_test.jsonl").string());

  FinetuneOptions opts;
  opts.task = "ranking";
  opts.seed = seed;
  if (lr > 0) opts.lr = lr;
  if (epochs > 0) opts.epochs = epochs;
  if (batch > 0) opts.batch = batch;
  const auto points = run_datasize_ablation(inits, train, test, sizes, repeats, opts);
  const std::string csv = ablation_csv(points);
  std::ofstream out(out_csv, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("ablate: cannot open '" + out_csv + "'");
  out << csv;
  std::cout << csv;
  std::cout << "curve written to " << out_csv << "\n";
  return 0;
}

int run_quantcheck(const std::string& emb_path) {
  Tensor emb = load_embeddings(emb_path);
  const auto report = quantize_roundtrip(emb);
  std::cout << "rows " << report.rows << " dim " << report.dim << "\n"
            << "max_abs_err " << report.max_abs_err << "\n"
            << "max_cos_dev " << report.max_cos_dev << "\n";
  return 0;
}

int run_synth(const std::string& out_dir, uint64_t seed) {
  const auto suite = data::make_synthetic_suite(seed);
  data::write_suite(suite, out_dir);
  std::cout << "synthetic suite (seed " << seed << ") -> " << out_dir << "\n"
            << "  corpus " << suite.corpus.size() << " sentences, sts " << suite.sts.size()
            << ", costra " << suite.costra.size() << ", docs " << suite.multilabel_docs.size()
            << "+" << suite.sentiment_docs.size() << ", ranking "
            << suite.ranking_train.size() << "+" << suite.ranking_test.size() << ", parallel "
            << suite.parallel.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"embedkit: desk-scale sentence embedding training and evaluation"};
  app.require_subcommand(1);

  // vocab
  auto* vocab_cmd = app.add_subcommand("vocab", "train or merge subword vocabularies");
  vocab_cmd->require_subcommand(1);
  std::string vt_corpus, vt_out{"vocab.txt"};
  int vt_size{2000}, vt_min_freq{2};
  bool vt_lower{false};
  auto* vt = vocab_cmd->add_subcommand("train", "learn a vocabulary from a corpus");
  vt->add_option("--corpus", vt_corpus)->required();
  vt->add_option("--size", vt_size);
  vt->add_option("--min-freq", vt_min_freq);
  vt->add_option("--out", vt_out);
  vt->add_flag("--lowercase", vt_lower);
  std::string vm_a, vm_b, vm_out{"merged_vocab.txt"};
  auto* vm = vocab_cmd->add_subcommand("merge", "merge two vocabularies");
  vm->add_option("a", vm_a)->required();
  vm->add_option("b", vm_b)->required();
  vm->add_option("--out", vm_out);

  // training recipes
  ConfigCli pretrain_cc;
  RunConfig pretrain_flags;
  bool pretrain_paper{false};
  std::vector<bool> pretrain_given;
  auto* pretrain = app.add_subcommand("pretrain", "masked-LM or retromae pre-training");
  std::string pretrain_mode;
  pretrain->add_option("mode", pretrain_mode, "mlm or retromae")->required();
  add_common_train_flags(pretrain, pretrain_cc, pretrain_flags, pretrain_paper, pretrain_given);

  ConfigCli simcse_cc;
  RunConfig simcse_flags;
  bool simcse_paper{false};
  std::vector<bool> simcse_given;
  auto* simcse_cmd = app.add_subcommand("simcse", "contrastive fine-tuning");
  add_common_train_flags(simcse_cmd, simcse_cc, simcse_flags, simcse_paper, simcse_given);

  ConfigCli distill_cc;
  RunConfig distill_flags;
  bool distill_paper{false};
  std::vector<bool> distill_given;
  auto* distill_cmd = app.add_subcommand("distill", "multilingual projection distillation");
  add_common_train_flags(distill_cmd, distill_cc, distill_flags, distill_paper, distill_given);

  // eval
  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "zero-shot / probe / finetune evaluation");
  eval_cmd->add_option("regime", eval_args.regime, "zero-shot|probe|finetune")->required();
  eval_cmd->add_option("--model", eval_args.model)->required();
  eval_cmd->add_option("--vocab", eval_args.vocab);
  eval_cmd->add_option("--data", eval_args.data)->required();
  eval_cmd->add_option("--report", eval_args.report);
  eval_cmd->add_option("--pooling", eval_args.pooling);
  eval_cmd->add_option("--task", eval_args.task, "finetune: ranking|classification");
  eval_cmd->add_option("--head", eval_args.head);
  eval_cmd->add_option("--folds", eval_args.folds);
  eval_cmd->add_option("--seed", eval_args.seed);
  eval_cmd->add_option("--relevance-threshold", eval_args.relevance_threshold);
  eval_cmd->add_option("--lr", eval_args.lr);
  eval_cmd->add_option("--epochs", eval_args.epochs);
  eval_cmd->add_option("--batch", eval_args.batch);
  eval_cmd->add_flag("--lowercase", eval_args.lowercase);

  // ablate
  std::vector<std::string> ab_models;
  std::string ab_vocab, ab_data, ab_sizes{"100,500,1000"}, ab_out{"ablation.csv"};
  int ab_repeats{4}, ab_epochs{0}, ab_batch{0};
  double ab_lr{0.0};
  uint64_t ab_seed{42};
  auto* ablate_cmd = app.add_subcommand("ablate", "fine-tuning data-size ablation");
  ablate_cmd->add_option("--model", ab_models, "model checkpoint (repeatable)")->required();
  ablate_cmd->add_option("--vocab", ab_vocab);
  ablate_cmd->add_option("--data", ab_data)->required();
  ablate_cmd->add_option("--sizes", ab_sizes);
  ablate_cmd->add_option("--repeats", ab_repeats);
  ablate_cmd->add_option("--out", ab_out);
  ablate_cmd->add_option("--seed", ab_seed);
  ablate_cmd->add_option("--lr", ab_lr);
  ablate_cmd->add_option("--epochs", ab_epochs);
  ablate_cmd->add_option("--batch", ab_batch);

  // quantcheck
  std::string qc_emb;
  auto* quant_cmd = app.add_subcommand("quantcheck", "fp16 round-trip check on embeddings");
  quant_cmd->add_option("--emb", qc_emb)->required();

  // synth
  std::string synth_out{"synth_data"};
  uint64_t synth_seed{42};
  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic evaluation suite");
  synth_cmd->add_option("--out", synth_out);
  synth_cmd->add_option("--seed", synth_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (vt->parsed()) return run_vocab_train(vt_corpus, vt_size, vt_min_freq, vt_out, vt_lower);
    if (vm->parsed()) return run_vocab_merge(vm_a, vm_b, vm_out);
    if (pretrain->parsed()) {
      RunConfig cfg = pretrain_cc.resolve();
      merge_flags(cfg, pretrain_flags, pretrain_given);
      if (pretrain_paper) apply_paper_scale(cfg);
      cfg.task = "pretrain-" + pretrain_mode;
      if (pretrain_mode == "mlm") {
        train_mlm(cfg);
      } else if (pretrain_mode == "retromae") {
        train_retromae(cfg);
      } else {
        throw ConfigError("pretrain: mode must be mlm or retromae");
      }
      std::cout << "checkpoint written to " << cfg.out << "/model.ekc\n";
      return 0;
    }
    if (simcse_cmd->parsed()) {
      RunConfig cfg = simcse_cc.resolve();
      merge_flags(cfg, simcse_flags, simcse_given);
      if (simcse_paper) apply_paper_scale(cfg);
      cfg.task = "finetune-simcse";
      train_simcse(cfg);
      std::cout << "checkpoint written to " << cfg.out << "/model.ekc\n";
      return 0;
    }
    if (distill_cmd->parsed()) {
      RunConfig cfg = distill_cc.resolve();
      merge_flags(cfg, distill_flags, distill_given);
      if (distill_paper) apply_paper_scale(cfg);
      cfg.task = "distill";
      train_distill(cfg);
      std::cout << "checkpoints written to " << cfg.out
                << "/model.ekc (projection stripped) and model_with_head.ekc\n";
      return 0;
    }
    if (eval_cmd->parsed()) return run_eval(eval_args);
    if (ablate_cmd->parsed()) {
      return run_ablate(ab_models, ab_vocab, ab_data, ab_sizes, ab_repeats, ab_out, ab_seed,
                        ab_lr, ab_epochs, ab_batch);
    }
    if (quant_cmd->parsed()) return run_quantcheck(qc_emb);
    if (synth_cmd->parsed()) return run_synth(synth_out, synth_seed);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
