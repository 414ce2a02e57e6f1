#include "embedkit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "embedkit/rng.hpp"

namespace embedkit::data {

namespace {

constexpr int kTopics = 12;
constexpr int kWordsPerTopic = 24;
constexpr int kFillerCount = 20;
constexpr int kSentimentMarkers = 6;

struct Lexicon {
  std::vector<std::vector<std::string>> topic_words;  // [topic][word]
  std::vector<std::string> fillers;
  std::vector<std::vector<std::string>> sentiment_markers;  // [neg, neutral, pos]

  const std::string& topic_word(int topic, int i) const {
    return topic_words[static_cast<size_t>(topic)][static_cast<size_t>(i)];
  }
};

std::string make_word(SplitRng& rng, int syllables) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w.push_back(consonants[rng.next_below(14)]);
    w.push_back(vowels[rng.next_below(5)]);
  }
  return w;
}

Lexicon make_lexicon(SplitRng rng) {
  Lexicon lex;
  std::set<std::string> used;
  auto fresh_word = [&](SplitRng& r, int syllables) {
    std::string w = make_word(r, syllables);
    while (!used.insert(w).second) w = make_word(r, syllables);
    return w;
  };
  SplitRng topic_rng = rng.split(1);
  lex.topic_words.resize(kTopics);
  for (int t = 0; t < kTopics; ++t) {
    for (int i = 0; i < kWordsPerTopic; ++i) {
      lex.topic_words[static_cast<size_t>(t)].push_back(fresh_word(topic_rng, 3));
    }
  }
  SplitRng filler_rng = rng.split(2);
  for (int i = 0; i < kFillerCount; ++i) {
    lex.fillers.push_back(fresh_word(filler_rng, 1));
  }
  SplitRng senti_rng = rng.split(3);
  lex.sentiment_markers.resize(3);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < kSentimentMarkers; ++i) {
      lex.sentiment_markers[static_cast<size_t>(c)].push_back(fresh_word(senti_rng, 2));
    }
  }
  return lex;
}

// n distinct indices in [0, limit)
std::vector<int> sample_distinct(SplitRng& rng, int limit, int n) {
  std::vector<int> idx(static_cast<size_t>(limit));
  for (int i = 0; i < limit; ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(n));
  return idx;
}

std::string render_sentence(SplitRng& rng, std::span<const std::string> content,
                            std::span<const std::string> fillers, int n_fillers) {
  std::vector<std::string> words(content.begin(), content.end());
  for (int i = 0; i < n_fillers; ++i) {
    words.push_back(fillers[rng.next_below(fillers.size())]);
  }
  rng.shuffle(words);
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::vector<std::string> pick_words(SplitRng& rng, const Lexicon& lex, int topic, int n,
                                    std::span<const std::string> exclude = {}) {
  std::vector<std::string> out;
  auto pool = lex.topic_words[static_cast<size_t>(topic)];
  rng.shuffle(pool);
  for (const auto& w : pool) {
    if (static_cast<int>(out.size()) == n) break;
    if (std::find(exclude.begin(), exclude.end(), w) != exclude.end()) continue;
    out.push_back(w);
  }
  return out;
}

}  // namespace

void SyntheticSizes::validate() const {
  const int all[] = {corpus_sentences,      sts_train,          sts_test,
                     costra_triplets,       multilabel_docs,    sentiment_docs,
                     ranking_train_queries, ranking_test_queries, ranking_candidates,
                     parallel_pairs};
  for (int v : all) {
    if (v < 1) throw ConfigError("synthetic suite: all sizes must be positive");
  }
}

double token_overlap_score(const std::string& a, const std::string& b,
                           std::span<const std::string> stopwords) {
  auto tokens = [&stopwords](const std::string& s) {
    std::set<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) {
      if (std::find(stopwords.begin(), stopwords.end(), w) == stopwords.end()) out.insert(w);
    }
    return out;
  };
  const auto ta = tokens(a);
  const auto tb = tokens(b);
  if (ta.empty() && tb.empty()) return 0.0;
  int shared = 0;
  for (const auto& w : ta) {
    if (tb.count(w)) ++shared;
  }
  const int uni = static_cast<int>(ta.size() + tb.size()) - shared;
  return 5.0 * static_cast<double>(shared) / static_cast<double>(uni);
}

SyntheticSuite make_synthetic_suite(uint64_t seed, const SyntheticSizes& sizes) {
  sizes.validate();
  SplitRng root(seed);
  const Lexicon lex = make_lexicon(root.split(0));

  SyntheticSuite suite;
  suite.fillers = lex.fillers;
  suite.num_topics = kTopics;

  // pre-training corpus: topical sentences
  {
    SplitRng rng = root.split(1);
    for (int i = 0; i < sizes.corpus_sentences; ++i) {
      const int topic = static_cast<int>(rng.next_below(kTopics));
      const int n_content = 4 + static_cast<int>(rng.next_below(5));
      const auto content = pick_words(rng, lex, topic, n_content);
      const int n_fillers = 2 + static_cast<int>(rng.next_below(3));
      suite.corpus.push_back(render_sentence(rng, content, lex.fillers, n_fillers));
    }
  }

  // STS: pairs at planted overlap levels; gold = content-word Jaccard
  {
    SplitRng rng = root.split(2);
    const double levels[] = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    const int total = sizes.sts_train + sizes.sts_test;
    for (int i = 0; i < total; ++i) {
      const double level = levels[static_cast<size_t>(i) % 6];
      const int topic = static_cast<int>(rng.next_below(kTopics));
      const int n = 6;
      const auto a_words = pick_words(rng, lex, topic, n);
      std::vector<std::string> b_words;
      if (level == 0.0) {
        int other = static_cast<int>(rng.next_below(kTopics));
        if (other == topic) other = (other + 1) % kTopics;
        b_words = pick_words(rng, lex, other, n);
      } else {
        const int shared = static_cast<int>(std::lround(level * n));
        for (int k = 0; k < shared; ++k) b_words.push_back(a_words[static_cast<size_t>(k)]);
        const auto fresh = pick_words(rng, lex, topic, n - shared, a_words);
        b_words.insert(b_words.end(), fresh.begin(), fresh.end());
      }
      StsPair pair;
      const int nf_a = 2 + static_cast<int>(rng.next_below(3));
      const int nf_b = 2 + static_cast<int>(rng.next_below(3));
      pair.a = render_sentence(rng, a_words, lex.fillers, nf_a);
      pair.b = render_sentence(rng, b_words, lex.fillers, nf_b);
      pair.score = token_overlap_score(pair.a, pair.b, lex.fillers);
      pair.split = i < sizes.sts_train ? "train" : "test";
      suite.sts.push_back(std::move(pair));
    }
  }

  // Costra: closer shares more content with the anchor than farther
  {
    SplitRng rng = root.split(3);
    const auto& cats = std::vector<std::string>{"time", "style", "generalization", "opposite"};
    for (int i = 0; i < sizes.costra_triplets; ++i) {
      const std::string& cat = cats[static_cast<size_t>(i) % cats.size()];
      const int topic = static_cast<int>(rng.next_below(kTopics));
      const int n = 6;
      const auto a_words = pick_words(rng, lex, topic, n);

      std::vector<std::string> closer(a_words.begin(), a_words.begin() + 4);
      const auto closer_fresh = pick_words(rng, lex, topic, 2, a_words);
      closer.insert(closer.end(), closer_fresh.begin(), closer_fresh.end());

      std::vector<std::string> farther;
      int other = static_cast<int>(rng.next_below(kTopics));
      if (other == topic) other = (other + 1) % kTopics;
      if (cat == "time") {
        farther.assign(a_words.begin(), a_words.begin() + 2);
        const auto fresh = pick_words(rng, lex, topic, 4, a_words);
        farther.insert(farther.end(), fresh.begin(), fresh.end());
      } else if (cat == "style") {
        farther.assign(a_words.begin(), a_words.begin() + 1);
        const auto fresh = pick_words(rng, lex, topic, 5, a_words);
        farther.insert(farther.end(), fresh.begin(), fresh.end());
      } else if (cat == "generalization") {
        const auto same = pick_words(rng, lex, topic, 3, a_words);
        const auto cross = pick_words(rng, lex, other, 3);
        farther = same;
        farther.insert(farther.end(), cross.begin(), cross.end());
      } else {  // opposite
        farther = pick_words(rng, lex, other, n);
      }

      CostraTriplet triplet;
      triplet.anchor = render_sentence(rng, a_words, lex.fillers, 2);
      triplet.closer = render_sentence(rng, closer, lex.fillers, 2);
      triplet.farther = render_sentence(rng, farther, lex.fillers, 2);
      triplet.category = cat;
      suite.costra.push_back(std::move(triplet));
    }
  }

  // multi-label docs: labels are the topics whose words appear
  {
    SplitRng rng = root.split(4);
    for (int i = 0; i < sizes.multilabel_docs; ++i) {
      const int n_topics = 1 + static_cast<int>(rng.next_below(3));
      const auto topics = sample_distinct(rng, kTopics, n_topics);
      std::vector<std::string> words;
      LabeledDoc doc;
      for (int t : topics) {
        const auto tw = pick_words(rng, lex, t, 4);
        words.insert(words.end(), tw.begin(), tw.end());
        doc.labels.push_back(t);
      }
      std::sort(doc.labels.begin(), doc.labels.end());
      doc.text = render_sentence(rng, words, lex.fillers, 3);
      suite.multilabel_docs.push_back(std::move(doc));
    }
  }

  // sentiment docs: marker words decide the class
  {
    SplitRng rng = root.split(5);
    for (int i = 0; i < sizes.sentiment_docs; ++i) {
      const int cls = static_cast<int>(rng.next_below(3));
      const int topic = static_cast<int>(rng.next_below(kTopics));
      auto words = pick_words(rng, lex, topic, 4);
      const auto& markers = lex.sentiment_markers[static_cast<size_t>(cls)];
      const int n_markers = 2 + static_cast<int>(rng.next_below(2));
      for (int k = 0; k < n_markers; ++k) {
        words.push_back(markers[rng.next_below(markers.size())]);
      }
      LabeledDoc doc;
      doc.labels = {cls};
      doc.text = render_sentence(rng, words, lex.fillers, 2);
      suite.sentiment_docs.push_back(std::move(doc));
    }
  }

  // ranking: relevance = query-term containment, graded labels
  {
    SplitRng rng = root.split(6);
    auto make_split = [&](int n_queries, const char* prefix,
                          std::vector<QueryDocPair>& out) {
      for (int q = 0; q < n_queries; ++q) {
        const int topic = static_cast<int>(rng.next_below(kTopics));
        const int n_terms = 2 + static_cast<int>(rng.next_below(2));
        const auto terms = pick_words(rng, lex, topic, n_terms);
        std::string query;
        for (size_t k = 0; k < terms.size(); ++k) {
          if (k) query += ' ';
          query += terms[static_cast<size_t>(k)];
        }
        const std::string qid = std::string(prefix) + std::to_string(q);
        // 12 fully relevant, 8 partial (below threshold), rest off-topic
        const int n_cands = sizes.ranking_candidates;
        const int n_relevant = std::min(12, n_cands);
        const int n_partial = std::min(8, std::max(0, n_cands - n_relevant));
        for (int d = 0; d < n_cands; ++d) {
          QueryDocPair pair;
          pair.query_id = qid;
          pair.query = query;
          if (d < n_relevant) {
            auto words = terms;
            const auto extra = pick_words(rng, lex, topic, 3, terms);
            words.insert(words.end(), extra.begin(), extra.end());
            pair.doc = render_sentence(rng, words, lex.fillers, 2);
            pair.label = 1.0;
          } else if (d < n_relevant + n_partial) {
            std::vector<std::string> words(terms.begin(), terms.begin() + 1);
            const auto extra = pick_words(rng, lex, topic, 4, terms);
            words.insert(words.end(), extra.begin(), extra.end());
            pair.doc = render_sentence(rng, words, lex.fillers, 2);
            pair.label = 0.4;
          } else {
            int other = static_cast<int>(rng.next_below(kTopics));
            if (other == topic) other = (other + 1) % kTopics;
            const auto words = pick_words(rng, lex, other, 5);
            pair.doc = render_sentence(rng, words, lex.fillers, 2);
            pair.label = 0.0;
          }
          out.push_back(std::move(pair));
        }
      }
    };
    make_split(sizes.ranking_train_queries, "train_q", suite.ranking_train);
    make_split(sizes.ranking_test_queries, "test_q", suite.ranking_test);
  }

  // parallel pairs: target side is a deterministic word-level relabeling
  {
    SplitRng rng = root.split(7);
    auto translate_word = [](const std::string& w) {
      std::string t(w.rbegin(), w.rend());
      return "x" + t;
    };
    for (int i = 0; i < sizes.parallel_pairs; ++i) {
      const int topic = static_cast<int>(rng.next_below(kTopics));
      const int n_content = 4 + static_cast<int>(rng.next_below(4));
      const auto content = pick_words(rng, lex, topic, n_content);
      ParallelPair pair;
      pair.src = render_sentence(rng, content, lex.fillers, 2);
      std::istringstream is(pair.src);
      std::string w;
      bool first = true;
      while (is >> w) {
        if (!first) pair.tgt += ' ';
        pair.tgt += translate_word(w);
        first = false;
      }
      suite.parallel.push_back(std::move(pair));
    }
  }

  return suite;
}

void write_suite(const SyntheticSuite& suite, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto path = [&dir](const char* name) {
    return (std::filesystem::path(dir) / name).string();
  };
  write_lines(path("corpus.txt"), suite.corpus);
  save_sts(path("sts.jsonl"), suite.sts);
  save_costra(path("costra.jsonl"), suite.costra);
  save_docs(path("docs_multilabel.jsonl"), suite.multilabel_docs);
  save_docs(path("docs_sentiment.jsonl"), suite.sentiment_docs);
  save_ranking(path("ranking_train.jsonl"), suite.ranking_train);
  save_ranking(path("ranking_test.jsonl"), suite.ranking_test);
  save_parallel(path("parallel.jsonl"), suite.parallel);
  write_lines(path("fillers.txt"), suite.fillers);
}

}  // namespace embedkit::data
