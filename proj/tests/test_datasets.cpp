#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "embedkit/datasets.hpp"
#include "embedkit/metrics.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/synthetic.hpp"

using namespace embedkit;
namespace fs = std::filesystem;

namespace {

std::string temp_file(const std::string& name, const std::string& content) {
  const auto path = (fs::temp_directory_path() / name).string();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  return path;
}

}  // namespace

TEST_SUITE_BEGIN("datasets");

TEST_CASE("jsonl loader basics") {
  SUBCASE("empty file gives empty list") {
    const auto path = temp_file("ek_empty.jsonl", "");
    CHECK(data::load_sts(path).empty());
  }
  SUBCASE("missing field names the field and line") {
    const auto path = temp_file("ek_missing.jsonl",
                                R"({"a":"x","b":"y","score":1.0,"split":"test"})"
                                "\n"
                                R"({"a":"x","score":1.0,"split":"test"})"
                                "\n");
    try {
      data::load_sts(path);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(":2:") != std::string::npos);
      CHECK(msg.find("'b'") != std::string::npos);
    }
  }
  SUBCASE("malformed line carries its line number") {
    const auto path = temp_file("ek_bad.jsonl", "not json\n");
    try {
      data::load_costra(path);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(":1:") != std::string::npos);
    }
  }
  SUBCASE("unknown field warns but loads") {
    const auto path = temp_file(
        "ek_unknown.jsonl",
        R"({"a":"x","b":"y","score":1.0,"split":"test","extra":5})"
        "\n");
    int warnings = 0;
    const auto records = data::load_sts(path, [&warnings](const std::string&) { ++warnings; });
    CHECK(records.size() == 1);
    CHECK(warnings == 1);
  }
  SUBCASE("round-trip write then load preserves records") {
    std::vector<data::QueryDocPair> pairs = {
        {"q1", "hledat boty", "boty levne skladem", 1.0},
        {"q1", "hledat boty", "uplne jiny text", 0.0},
        {"q2", "pocasi praha", "pocasi dnes praha", 0.6},
    };
    const auto path = (fs::temp_directory_path() / "ek_rt.jsonl").string();
    data::save_ranking(path, pairs);
    const auto back = data::load_ranking(path);
    REQUIRE(back.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
      CHECK(back[i].query_id == pairs[i].query_id);
      CHECK(back[i].query == pairs[i].query);
      CHECK(back[i].doc == pairs[i].doc);
      CHECK(back[i].label == pairs[i].label);
    }
  }
  SUBCASE("ranking rejects diverging query text under one id") {
    const auto path = temp_file(
        "ek_qid.jsonl",
        R"({"query_id":"q1","query":"a","doc":"d1","label":1.0})"
        "\n"
        R"({"query_id":"q1","query":"DIFFERENT","doc":"d2","label":0.0})"
        "\n");
    CHECK_THROWS_AS(data::load_ranking(path), DataError);
  }
  SUBCASE("docs reject empty label sets") {
    const auto path = temp_file("ek_docs.jsonl", R"({"text":"x","labels":[]})"
                                                 "\n");
    CHECK_THROWS_AS(data::load_docs(path), DataError);
  }
  SUBCASE("costra parses unscored categories but rejects unknown ones") {
    const auto ok = temp_file(
        "ek_costra_ok.jsonl",
        R"({"anchor":"a","closer":"b","farther":"c","category":"basic"})"
        "\n");
    CHECK(data::load_costra(ok).size() == 1);
    const auto bad = temp_file(
        "ek_costra_bad.jsonl",
        R"({"anchor":"a","closer":"b","farther":"c","category":"mystery"})"
        "\n");
    CHECK_THROWS_AS(data::load_costra(bad), DataError);
  }
}

TEST_CASE("preprocess_corpus") {
  data::PreprocessOptions opts;
  SUBCASE("splits on sentence-final punctuation before uppercase") {
    std::vector<std::string> lines = {"Ahoj tady svete. Jak se mas dnes?"};
    const auto out = data::preprocess_corpus(lines, opts);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == "Ahoj tady svete.");
    CHECK(out[1] == "Jak se mas dnes?");
  }
  SUBCASE("no split without the uppercase continuation") {
    std::vector<std::string> lines = {"Navsteva p. novaka dnes rano dorazila"};
    const auto out = data::preprocess_corpus(lines, opts);
    CHECK(out.size() == 1);
  }
  SUBCASE("length bounds in words") {
    std::vector<std::string> lines = {"Slovo.", "Tri slova tady.",
                                      std::string("dlouhe ") + std::string(700, 'x')};
    std::string hundred;
    for (int i = 0; i < 100; ++i) hundred += "slovo" + std::to_string(i) + " ";
    lines.push_back(hundred);
    const auto out = data::preprocess_corpus(lines, opts);
    REQUIRE(out.size() == 1);
    CHECK(out[0] == "Tri slova tady.");
  }
  SUBCASE("control characters stripped, duplicates dropped") {
    std::vector<std::string> lines = {"Jedna dve tri\x01 slova", "Jedna dve tri slova"};
    const auto out = data::preprocess_corpus(lines, opts);
    CHECK(out.size() == 1);
  }
  SUBCASE("idempotent") {
    std::vector<std::string> lines = {
        "Prvni veta je tady. Druha veta nasleduje hned. Treti veta konci.",
        "Dalsi odstavec pokracuje dal bez konce"};
    const auto once = data::preprocess_corpus(lines, opts);
    const auto twice = data::preprocess_corpus(once, opts);
    CHECK(once == twice);
  }
}

TEST_CASE("subset") {
  std::vector<std::string> records;
  for (int i = 0; i < 200; ++i) records.push_back("r" + std::to_string(i));

  SUBCASE("full-size subset is a permutation") {
    const auto out = data::subset<std::string>(records, records.size(), 5);
    CHECK(out.size() == records.size());
    std::set<std::string> s(out.begin(), out.end());
    CHECK(s.size() == records.size());
  }
  SUBCASE("nested: smaller subset is a prefix of the larger") {
    const auto small = data::subset<std::string>(records, 20, 7);
    const auto large = data::subset<std::string>(records, 80, 7);
    for (size_t i = 0; i < small.size(); ++i) CHECK(small[i] == large[i]);
  }
  SUBCASE("oversized request is a parameter error") {
    CHECK_THROWS_AS(data::subset<std::string>(records, 500, 1), ConfigError);
  }
  SUBCASE("different seeds give different subsets") {
    const auto a = data::subset<std::string>(records, 10, 1);
    const auto b = data::subset<std::string>(records, 10, 2);
    CHECK(a != b);
  }
}

TEST_CASE("synthetic suite") {
  data::SyntheticSizes sizes;
  sizes.corpus_sentences = 200;
  sizes.sts_train = 30;
  sizes.sts_test = 60;
  sizes.costra_triplets = 80;
  sizes.multilabel_docs = 60;
  sizes.sentiment_docs = 60;
  sizes.ranking_train_queries = 6;
  sizes.ranking_test_queries = 4;
  sizes.ranking_candidates = 20;
  sizes.parallel_pairs = 40;
  const auto suite = data::make_synthetic_suite(7, sizes);

  SUBCASE("sizes respected") {
    CHECK(static_cast<int>(suite.corpus.size()) == sizes.corpus_sentences);
    CHECK(static_cast<int>(suite.sts.size()) == sizes.sts_train + sizes.sts_test);
    CHECK(static_cast<int>(suite.costra.size()) == sizes.costra_triplets);
    CHECK(static_cast<int>(suite.ranking_train.size()) ==
          sizes.ranking_train_queries * sizes.ranking_candidates);
  }

  SUBCASE("same seed reproduces the suite exactly") {
    const auto again = data::make_synthetic_suite(7, sizes);
    CHECK(again.corpus == suite.corpus);
    REQUIRE(again.sts.size() == suite.sts.size());
    for (size_t i = 0; i < suite.sts.size(); ++i) {
      CHECK(again.sts[i].a == suite.sts[i].a);
      CHECK(again.sts[i].score == suite.sts[i].score);
    }
  }

  SUBCASE("token-overlap scorer reaches Spearman >= 0.95 on its own pairs") {
    std::vector<double> gold, scored;
    for (const auto& p : suite.sts) {
      gold.push_back(p.score);
      scored.push_back(data::token_overlap_score(p.a, p.b, suite.fillers));
    }
    CHECK(metrics::spearman(scored, gold) >= 0.95);
  }

  SUBCASE("planted ranking: hidden-relevance oracle scores P@10 = 100") {
    std::map<std::string, std::vector<const data::QueryDocPair*>> by_query;
    for (const auto& p : suite.ranking_test) by_query[p.query_id].push_back(&p);
    std::vector<std::vector<bool>> ranked;
    for (auto& [qid, docs] : by_query) {
      std::stable_sort(docs.begin(), docs.end(),
                       [](const auto* a, const auto* b) { return a->label > b->label; });
      std::vector<bool> rel;
      for (const auto* d : docs) rel.push_back(d->label > 0.5);
      ranked.push_back(std::move(rel));
    }
    CHECK(metrics::precision_at_k(ranked, 10) == doctest::Approx(100.0));
  }

  SUBCASE("costra triplets plant closer > farther overlap") {
    int closer_wins = 0;
    for (const auto& t : suite.costra) {
      const double c = data::token_overlap_score(t.anchor, t.closer, suite.fillers);
      const double f = data::token_overlap_score(t.anchor, t.farther, suite.fillers);
      closer_wins += c > f;
    }
    CHECK(closer_wins == static_cast<int>(suite.costra.size()));
  }

  SUBCASE("write_suite emits the canonical layout") {
    const auto dir = (fs::temp_directory_path() / "ek_suite").string();
    fs::remove_all(dir);
    data::write_suite(suite, dir);
    for (const char* name :
         {"corpus.txt", "sts.jsonl", "costra.jsonl", "docs_multilabel.jsonl",
          "docs_sentiment.jsonl", "ranking_train.jsonl", "ranking_test.jsonl",
          "parallel.jsonl", "fillers.txt"}) {
      CHECK(fs::exists(fs::path(dir) / name));
    }
    const auto sts = data::load_sts((fs::path(dir) / "sts.jsonl").string());
    CHECK(sts.size() == suite.sts.size());
  }
}

TEST_SUITE_END();
