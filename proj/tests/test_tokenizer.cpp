#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "embedkit/rng.hpp"
#include "embedkit/tokenizer.hpp"

using namespace embedkit;

TEST_SUITE_BEGIN("tokenizer");

TEST_CASE("bpe merges follow pair frequency on a tiny corpus") {
  // corpus {"aaab","aaab"}: alphabet {a, b}, so specials(5) + a,b,##a,##b = 9.
  // pair counts tie at 2; lexicographic tie-break merges (##a,##a) first is
  // not possible since pairs are (a,##a),(##a,##a),(##a,##b) -> smallest is
  // (##a,##a) -> "##aa", then "a"+"##aa"? The exact order matters less than
  // the contract: "a", "b" present and a merged "aa" piece appears.
  std::vector<std::string> corpus = {"aaab", "aaab"};
  Vocab v = train_vocab(corpus, 12, 1);
  CHECK(v.size() == 12);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
  bool has_aa_piece = false;
  for (int i = 0; i < v.size(); ++i) {
    const auto& t = v.token(i);
    if (t == "aa" || t == "##aa") has_aa_piece = true;
  }
  CHECK(has_aa_piece);
}

TEST_CASE("target below alphabet + specials is a parameter error") {
  std::vector<std::string> corpus = {"abcdef"};
  // specials 5 + 6 chars * 2 forms = 17
  CHECK_THROWS_AS(train_vocab(corpus, 10, 1), ConfigError);
}

TEST_CASE("training is deterministic") {
  std::vector<std::string> corpus = {"koliko mori", "mori kolo", "koliko kolo mori"};
  Vocab a = train_vocab(corpus, 30, 1);
  Vocab b = train_vocab(corpus, 30, 1);
  REQUIRE(a.size() == b.size());
  for (int i = 0; i < a.size(); ++i) CHECK(a.token(i) == b.token(i));

  const auto path_a = std::filesystem::temp_directory_path() / "ek_vocab_a.txt";
  const auto path_b = std::filesystem::temp_directory_path() / "ek_vocab_b.txt";
  a.save(path_a.string());
  b.save(path_b.string());
  std::ifstream fa(path_a), fb(path_b);
  std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(ca == cb);
}

TEST_CASE("empty corpus is a data error") {
  std::vector<std::string> corpus = {"", "   "};
  CHECK_THROWS_AS(train_vocab(corpus, 100, 1), DataError);
}

TEST_CASE("merge_vocab") {
  std::vector<std::string> ca = {"pole mesto", "pole"};
  std::vector<std::string> cb = {"xelop xotsem", "xelop"};
  Vocab a = train_vocab(ca, 24, 1);
  Vocab b = train_vocab(cb, 24, 1);

  SUBCASE("idempotent on itself") {
    Vocab m = merge_vocab(a, a);
    CHECK(m.size() == a.size());
    for (int i = 0; i < a.size(); ++i) CHECK(m.token(i) == a.token(i));
  }
  SUBCASE("union bound") {
    Vocab m = merge_vocab(a, b);
    CHECK(m.size() <= a.size() + b.size());
  }
  SUBCASE("disjoint non-special tokens add up") {
    Vocab m = merge_vocab(a, b);
    std::set<std::string> ta(a.tokens().begin() + Vocab::kNumSpecials, a.tokens().end());
    std::set<std::string> tb(b.tokens().begin() + Vocab::kNumSpecials, b.tokens().end());
    std::set<std::string> inter;
    for (const auto& t : ta) {
      if (tb.count(t)) inter.insert(t);
    }
    CHECK(m.size() == a.size() + b.size() - Vocab::kNumSpecials -
                          static_cast<int>(inter.size()));
  }
  SUBCASE("specials keep fixed ids") {
    Vocab m = merge_vocab(a, b);
    CHECK(m.token(Vocab::kPad) == "[PAD]");
    CHECK(m.token(Vocab::kCls) == "[CLS]");
    CHECK(m.token(Vocab::kSep) == "[SEP]");
    CHECK(m.token(Vocab::kMask) == "[MASK]");
    CHECK(m.token(Vocab::kUnk) == "[UNK]");
  }
  SUBCASE("merged vocab still encodes both sides' whole tokens") {
    Vocab m = merge_vocab(a, b);
    for (const auto& v : {a, b}) {
      for (int i = Vocab::kNumSpecials; i < v.size(); ++i) {
        CHECK(m.contains(v.token(i)));
      }
    }
  }
}

TEST_CASE("encode basics") {
  Vocab v(std::vector<std::string>{"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "un",
                                   "##happy", "hello"});
  SUBCASE("empty text") {
    TokenSeq s = encode(v, "", 6);
    CHECK(s.ids == std::vector<int>{Vocab::kCls, Vocab::kSep, 0, 0, 0, 0});
    CHECK(s.attention_mask == std::vector<int>{1, 1, 0, 0, 0, 0});
  }
  SUBCASE("greedy longest match") {
    TokenSeq s = encode(v, "unhappy", 6);
    CHECK(s.ids[0] == Vocab::kCls);
    CHECK(s.ids[1] == v.id_of("un"));
    CHECK(s.ids[2] == v.id_of("##happy"));
    CHECK(s.ids[3] == Vocab::kSep);
    CHECK(s.ids[4] == Vocab::kPad);
  }
  SUBCASE("word with no tokenization becomes UNK") {
    TokenSeq s = encode(v, "zzz", 6);
    CHECK(s.ids[1] == Vocab::kUnk);
  }
  SUBCASE("truncation keeps the final SEP") {
    TokenSeq s = encode(v, "hello hello hello hello hello hello", 4);
    CHECK(static_cast<int>(s.ids.size()) == 4);
    CHECK(s.ids[0] == Vocab::kCls);
    CHECK(s.ids[3] == Vocab::kSep);
  }
  SUBCASE("max_len below 3 rejected") { CHECK_THROWS_AS(encode(v, "x", 2), ConfigError); }
}

TEST_CASE("decode round-trips whole-word vocabulary entries") {
  std::vector<std::string> corpus = {"ruka noha hlava", "ruka hlava", "noha ruka"};
  Vocab v = train_vocab(corpus, 40, 1);
  for (int i = Vocab::kNumSpecials; i < v.size(); ++i) {
    const auto& tok = v.token(i);
    if (tok.rfind("##", 0) == 0) continue;  // continuations are not words
    TokenSeq s = encode(v, tok, 16);
    CHECK(decode(v, s.ids) == tok);
  }
}

TEST_CASE("encode is total over arbitrary unicode input (property)") {
  std::vector<std::string> corpus = {"dobry den svete", "svete dobry"};
  Vocab v = train_vocab(corpus, 30, 1);
  SplitRng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const int len = 1 + static_cast<int>(rng.next_below(24));
    for (int i = 0; i < len; ++i) {
      const int pick = static_cast<int>(rng.next_below(4));
      if (pick == 0) {
        text.push_back(static_cast<char>('a' + rng.next_below(26)));
      } else if (pick == 1) {
        text += "\xc5\x99";  // r with hacek
      } else if (pick == 2) {
        text.push_back(static_cast<char>(rng.next_below(128)));
      } else {
        text.push_back(' ');
      }
    }
    TokenSeq s = encode(v, text, 16);
    CHECK(static_cast<int>(s.ids.size()) == 16);
    CHECK(static_cast<int>(s.attention_mask.size()) == 16);
    CHECK(s.ids[0] == Vocab::kCls);
    int last_real = 0;
    for (int i = 0; i < 16; ++i) {
      if (s.attention_mask[static_cast<size_t>(i)]) last_real = i;
    }
    CHECK(s.ids[static_cast<size_t>(last_real)] == Vocab::kSep);
    for (int i = 0; i < 16; ++i) {
      CHECK(s.ids[static_cast<size_t>(i)] >= 0);
      CHECK(s.ids[static_cast<size_t>(i)] < v.size());
    }
  }
}

TEST_CASE("greedy matching emits the longest vocab prefix first (property)") {
  std::vector<std::string> corpus = {"abc abcd ab a", "abcd abc ab"};
  Vocab v = train_vocab(corpus, 40, 1);
  SplitRng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::string word;
    const int len = 1 + static_cast<int>(rng.next_below(6));
    for (int i = 0; i < len; ++i) word.push_back(static_cast<char>('a' + rng.next_below(4)));
    TokenSeq s = encode(v, word, 16);
    if (s.ids[1] == Vocab::kUnk) continue;
    const std::string first = v.token(s.ids[1]);
    // no longer vocab prefix of the word may exist
    for (size_t plen = word.size(); plen > first.size(); --plen) {
      CHECK(!v.contains(word.substr(0, plen)));
    }
    CHECK(word.rfind(first, 0) == 0);
  }
}

TEST_CASE("punctuation splits off words") {
  const auto words = pre_tokenize("ahoj, svete! \xe2\x80\x9equote\xe2\x80\x9d");
  REQUIRE(words.size() == 7);
  CHECK(words[0] == "ahoj");
  CHECK(words[1] == ",");
  CHECK(words[2] == "svete");
  CHECK(words[3] == "!");
  CHECK(words[4] == "\xe2\x80\x9e");
  CHECK(words[5] == "quote");
  CHECK(words[6] == "\xe2\x80\x9d");
}

TEST_CASE("lowercase flag folds ascii and latin-ext") {
  TokenizerOptions opts;
  opts.lowercase = true;
  const auto words = pre_tokenize("Ahoj \xc5\x98" "eka", opts);  // Ř -> ř
  REQUIRE(words.size() == 2);
  CHECK(words[0] == "ahoj");
  CHECK(words[1] == "\xc5\x99" "eka");
}

TEST_SUITE_END();
