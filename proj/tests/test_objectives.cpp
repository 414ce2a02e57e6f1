#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "embedkit/checkpoint.hpp"
#include "embedkit/harness.hpp"
#include "embedkit/objectives.hpp"
#include "embedkit/optimizer.hpp"
#include "testutil.hpp"

using namespace embedkit;

namespace {

EncoderConfig tiny_config(float dropout = 0.1f) {
  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.max_len = 10;
  cfg.vocab_size = 0;  // set from vocab
  cfg.dropout_p = dropout;
  return cfg;
}

struct Toy {
  Vocab vocab;
  SentenceEncoder enc;
  std::vector<std::string> sentences;
};

Toy make_toy(uint64_t seed, float dropout = 0.1f) {
  Toy toy{Vocab{}, SentenceEncoder{}, {"ruka noha oko", "noha oko hlava", "oko hlava ruka",
                                       "hlava ruka noha", "ruka oko hlava", "noha hlava oko"}};
  toy.vocab = train_vocab(toy.sentences, 40, 1);
  EncoderConfig cfg = tiny_config(dropout);
  cfg.vocab_size = toy.vocab.size();
  toy.enc = SentenceEncoder{init_encoder(cfg, seed), toy.vocab, {}};
  return toy;
}

TokenBatch batch_of(const Toy& toy, std::initializer_list<int> which) {
  std::vector<TokenSeq> seqs;
  for (int i : which) {
    seqs.push_back(encode(toy.vocab, toy.sentences[static_cast<size_t>(i)],
                          toy.enc.cfg().max_len, {}));
  }
  return pack_batch(seqs);
}

}  // namespace

TEST_SUITE_BEGIN("objectives");

TEST_CASE("masking plan never touches specials and hits the ratio") {
  Toy toy = make_toy(1);
  TokenBatch batch = batch_of(toy, {0, 1, 2, 3});
  for (uint64_t seed = 0; seed < 30; ++seed) {
    const MaskingPlan plan = make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size,
                                               SplitRng(seed));
    std::set<int> seen;
    for (const auto& slot : plan.slots) {
      CHECK(seen.insert(slot.flat_pos).second);  // no duplicates
      const int id = batch.ids[static_cast<size_t>(slot.flat_pos)];
      CHECK(id != Vocab::kPad);
      CHECK(id != Vocab::kCls);
      CHECK(id != Vocab::kSep);
      CHECK(batch.mask[static_cast<size_t>(slot.flat_pos)] == 1.0f);
      CHECK(slot.original_id == id);
    }
    // per sequence: within +-1 token of ratio * maskable
    for (int b = 0; b < batch.batch; ++b) {
      int maskable = 0, chosen = 0;
      for (int t = 0; t < batch.seq_len; ++t) {
        const int flat = b * batch.seq_len + t;
        const int id = batch.ids[static_cast<size_t>(flat)];
        if (batch.mask[static_cast<size_t>(flat)] > 0 && id != Vocab::kCls &&
            id != Vocab::kSep && id != Vocab::kPad) {
          ++maskable;
        }
      }
      for (const auto& slot : plan.slots) {
        if (slot.flat_pos / batch.seq_len == b) ++chosen;
      }
      CHECK(std::fabs(chosen - 0.3 * maskable) <= 1.0);
    }
  }
}

TEST_CASE("masking replacement policy mixes MASK, random and keep") {
  Toy toy = make_toy(2);
  TokenBatch batch = batch_of(toy, {0, 1, 2, 3, 4, 5});
  int mask_count = 0, keep_count = 0, random_count = 0, total = 0;
  for (uint64_t seed = 0; seed < 400; ++seed) {
    const MaskingPlan plan =
        make_masking_plan(batch, 0.5f, toy.enc.cfg().vocab_size, SplitRng(seed));
    for (const auto& slot : plan.slots) {
      ++total;
      if (slot.replacement_id == Vocab::kMask) ++mask_count;
      else if (slot.replacement_id == slot.original_id) ++keep_count;
      else ++random_count;
    }
  }
  const double pm = static_cast<double>(mask_count) / total;
  CHECK(pm > 0.75);
  CHECK(pm < 0.85);
  CHECK(keep_count > 0);
  CHECK(random_count > 0);
}

TEST_CASE("mlm loss near ln(V) on an untrained model") {
  Toy toy = make_toy(3);
  TokenBatch batch = batch_of(toy, {0, 1, 2, 3});
  const MaskingPlan plan = make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size, SplitRng(5));
  Tape tape;
  Tensor loss = mlm_loss(tape, toy.enc.model, batch, plan, 7);
  const double lnv = std::log(static_cast<double>(toy.enc.cfg().vocab_size));
  CHECK(loss.item() > 0.0f);
  CHECK(std::isfinite(loss.item()));
  CHECK(std::fabs(loss.item() - lnv) / lnv < 0.05);
}

TEST_CASE("mlm with zero maskable tokens is a data error") {
  Toy toy = make_toy(4);
  std::vector<TokenSeq> seqs = {encode(toy.vocab, "", toy.enc.cfg().max_len, {})};
  TokenBatch batch = pack_batch(seqs);
  const MaskingPlan plan = make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size, SplitRng(5));
  CHECK(plan.slots.empty());
  Tape tape;
  CHECK_THROWS_AS(mlm_loss(tape, toy.enc.model, batch, plan, 7), DataError);
}

TEST_CASE("mlm overfits a single repeated sentence") {
  Toy toy = make_toy(5, /*dropout=*/0.0f);
  std::vector<TokenSeq> seqs;
  for (int i = 0; i < 8; ++i) {
    seqs.push_back(encode(toy.vocab, toy.sentences[0], toy.enc.cfg().max_len, {}));
  }
  TokenBatch batch = pack_batch(seqs);
  AdamWConfig ocfg;
  ocfg.weight_decay = 0.0f;
  AdamW opt(toy.enc.model.params(), ocfg);
  double last = 0;
  for (int step = 0; step < 50; ++step) {
    const MaskingPlan plan = make_masking_plan(batch, 0.15f, toy.enc.cfg().vocab_size,
                                               SplitRng(static_cast<uint64_t>(step)));
    Tape tape;
    Tensor loss = mlm_loss(tape, toy.enc.model, batch, plan, static_cast<uint64_t>(step));
    tape.backward(loss);
    opt.step(1e-2f);
    opt.zero_grads();
    last = loss.item();
  }
  const double lnv = std::log(static_cast<double>(toy.enc.cfg().vocab_size));
  CHECK(last < 0.1 * lnv);
}

TEST_CASE("retromae asymmetry contract") {
  Toy toy = make_toy(6);
  ShallowDecoder dec = init_decoder(toy.enc.cfg(), 9);
  TokenBatch batch = batch_of(toy, {0, 1});
  Tape tape;
  CHECK_THROWS_AS(retromae_loss(tape, toy.enc.model, dec, batch, 0.5f, 0.3f, 1),
                  ContractError);
}

TEST_CASE("retromae with an empty decoder plan reduces to the encoder term") {
  Toy toy = make_toy(7);
  ShallowDecoder dec = init_decoder(toy.enc.cfg(), 10);
  TokenBatch batch = batch_of(toy, {0, 1});
  const MaskingPlan enc_plan =
      make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size, SplitRng(11));
  MaskingPlan empty;
  empty.ratio = 0.5f;

  Tape t1;
  Tensor total = retromae_loss_with_plans(t1, toy.enc.model, dec, batch, enc_plan, empty, 21);

  // encoder-only reference: mlm on the same plan and forward seed
  TokenBatch enc_batch = batch;
  enc_batch.ids = enc_plan.apply(batch.ids);
  Tape t2;
  Tensor ref = mlm_loss(t2, toy.enc.model, batch, enc_plan, SplitRng(21).split(0).next_u64());
  CHECK(total.item() == doctest::Approx(ref.item()).epsilon(1e-6));
}

TEST_CASE("cls injection feeds the decoder") {
  Toy toy = make_toy(8);
  ShallowDecoder dec = init_decoder(toy.enc.cfg(), 12);
  TokenBatch batch = batch_of(toy, {0, 1, 2});
  const MaskingPlan enc_plan =
      make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size, SplitRng(13));
  const MaskingPlan dec_plan =
      make_masking_plan(batch, 0.5f, toy.enc.cfg().vocab_size, SplitRng(14));
  Tape t1, t2;
  Tensor with = retromae_loss_with_plans(t1, toy.enc.model, dec, batch, enc_plan, dec_plan, 15,
                                         /*inject_cls=*/true);
  Tensor without = retromae_loss_with_plans(t2, toy.enc.model, dec, batch, enc_plan, dec_plan,
                                            15, /*inject_cls=*/false);
  CHECK(with.item() != without.item());
}

TEST_CASE("retromae loss trends down on a toy corpus") {
  Toy toy = make_toy(9, /*dropout=*/0.05f);
  // 100-sentence corpus built from shuffled toy sentences
  std::vector<std::string> corpus;
  SplitRng rng(19);
  for (int i = 0; i < 100; ++i) {
    corpus.push_back(toy.sentences[rng.next_below(toy.sentences.size())]);
  }
  ShallowDecoder dec = init_decoder(toy.enc.cfg(), 20);
  std::vector<Tensor> params = toy.enc.model.params();
  for (auto& p : dec.params()) params.push_back(p);
  AdamWConfig ocfg;
  ocfg.weight_decay = 0.0f;
  AdamW opt(params, ocfg);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 8; ++i) {
      seqs.push_back(encode(toy.vocab,
                            corpus[(static_cast<size_t>(step) * 8 + static_cast<size_t>(i)) % corpus.size()],
                            toy.enc.cfg().max_len, {}));
    }
    TokenBatch batch = pack_batch(seqs);
    Tape tape;
    Tensor loss = retromae_loss(tape, toy.enc.model, dec, batch, 0.3f, 0.5f,
                                static_cast<uint64_t>(step));
    tape.backward(loss);
    opt.step(5e-3f);
    opt.zero_grads();
    losses.push_back(loss.item());
  }
  // smoothed over 10-step windows: last window clearly below the first
  auto window_mean = [&](size_t start) {
    double s = 0;
    for (size_t i = start; i < start + 10; ++i) s += losses[i];
    return s / 10;
  };
  const double first = window_mean(0);
  const double last = window_mean(losses.size() - 10);
  CHECK(last < first);
}

TEST_CASE("simcse closed form: identical sentences, no dropout") {
  for (int n : {2, 4}) {
    Toy toy = make_toy(10, /*dropout=*/0.0f);
    std::vector<std::string> sentences(static_cast<size_t>(n), toy.sentences[0]);
    Tape tape;
    Tensor loss = simcse_loss(tape, toy.enc, sentences, 0.05f, {1, 2});
    CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(n))).epsilon(1e-5));
  }
}

TEST_CASE("simcse needs at least two sentences and positive temperature") {
  Toy toy = make_toy(11);
  Tape tape;
  std::vector<std::string> one = {toy.sentences[0]};
  CHECK_THROWS_AS(simcse_loss(tape, toy.enc, one, 0.05f, {1, 2}), ConfigError);
  std::vector<std::string> two = {toy.sentences[0], toy.sentences[1]};
  CHECK_THROWS_AS(simcse_loss(tape, toy.enc, two, 0.0f, {1, 2}), ConfigError);
}

TEST_CASE("infonce hand case") {
  // z1 = (1,0),(0,1); z2 = (1,0),(0,1); tau=1:
  // each row: -log(e / (e + 1)) = log(1 + e^-1)... computed directly
  Tape tape;
  Tensor z1 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor z2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor loss = infonce_diagonal(tape, z1, z2, 1.0f);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));  // 0.31326
  CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-5));
  CHECK(loss.item() == doctest::Approx(0.31326).epsilon(1e-3));
}

TEST_CASE("simcse gradient flows (loss drops on a fixed batch)") {
  Toy toy = make_toy(12, /*dropout=*/0.1f);
  std::vector<std::string> sentences(toy.sentences.begin(), toy.sentences.begin() + 4);
  AdamWConfig ocfg;
  ocfg.weight_decay = 0.0f;
  AdamW opt(toy.enc.model.params(), ocfg);
  double first = 0, last = 0;
  for (int step = 0; step < 30; ++step) {
    Tape tape;
    Tensor loss = simcse_loss(tape, toy.enc, sentences, 0.05f,
                              {static_cast<uint64_t>(step), static_cast<uint64_t>(step) + 991});
    if (step == 0) first = loss.item();
    last = loss.item();
    tape.backward(loss);
    opt.step(5e-3f);
    opt.zero_grads();
  }
  CHECK(last < first);
}

TEST_CASE("distill loss zero when projection already matches the teacher") {
  Toy toy = make_toy(13, /*dropout=*/0.0f);
  std::vector<std::string> src = {toy.sentences[0], toy.sentences[1], toy.sentences[2]};
  std::vector<std::string> tgt = src;  // same sentences on both sides
  const int ht = 6;
  ProjectionHead head = init_projection(toy.enc.cfg().hidden, ht, 3);

  // teacher := normalize(head(student(src))) so the loss must vanish
  std::vector<TokenSeq> seqs;
  for (const auto& s : src) seqs.push_back(encode(toy.vocab, s, toy.enc.cfg().max_len, {}));
  TokenBatch batch = pack_batch(seqs);
  Tape build = Tape::inference();
  Tensor states = encoder_forward(build, toy.enc.model, batch, false, 0);
  Tensor pooled = pool(build, states, batch, Pooling::MEAN);
  Tensor teacher = l2_normalize_rows(build, matmul(build, pooled, head.weight));

  Tape tape;
  Tensor loss = distill_loss(tape, toy.enc, head, teacher, src, tgt, Pooling::MEAN,
                             /*training=*/false, 5);
  CHECK(loss.item() >= 0.0f);
  CHECK(loss.item() < 1e-10f);
}

TEST_CASE("distill dimension mismatches are contract errors") {
  Toy toy = make_toy(14);
  std::vector<std::string> src = {toy.sentences[0], toy.sentences[1]};
  ProjectionHead wrong_in = init_projection(toy.enc.cfg().hidden + 2, 6, 3);
  Tensor teacher = Tensor::zeros({2, 6});
  for (int i = 0; i < 2; ++i) teacher.mutable_data()[static_cast<size_t>(i) * 6] = 1.0f;
  Tape tape;
  CHECK_THROWS_AS(
      distill_loss(tape, toy.enc, wrong_in, teacher, src, src, Pooling::MEAN, false, 1),
      ContractError);
  ProjectionHead ok = init_projection(toy.enc.cfg().hidden, 6, 3);
  Tensor unnormalized = Tensor::full({2, 6}, 2.0f);
  CHECK_THROWS_AS(
      distill_loss(tape, toy.enc, ok, unnormalized, src, src, Pooling::MEAN, false, 1),
      DataError);
}

TEST_CASE("listnet closed forms") {
  SUBCASE("student == teacher at equal temperature hits the entropy floor") {
    SplitRng rng(41);
    Tensor sims = testutil::random_tensor({4, 4}, rng, 1.0f, false);
    Tape tape;
    Tensor loss = listnet_loss(tape, sims, sims, 0.5f, 0.5f);
    // CE(p, p) = H(p); compute the row entropies directly
    double expected = 0;
    for (int i = 0; i < 4; ++i) {
      std::vector<double> row;
      for (int j = 0; j < 4; ++j) {
        if (j != i) row.push_back(sims.at(i, j) / 0.5);
      }
      double mx = *std::max_element(row.begin(), row.end());
      double denom = 0;
      for (double& v : row) {
        v = std::exp(v - mx);
        denom += v;
      }
      for (double v : row) {
        const double p = v / denom;
        expected -= p * std::log(p);
      }
    }
    expected /= 4;
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-4));
  }
  SUBCASE("adding a constant to a student row leaves the loss unchanged") {
    SplitRng rng(42);
    Tensor teacher = testutil::random_tensor({3, 3}, rng, 1.0f, false);
    Tensor student = testutil::random_tensor({3, 3}, rng, 1.0f, false);
    Tape t1, t2;
    Tensor base = listnet_loss(t1, student, teacher, 1.0f, 1.0f);
    Tensor shifted_in = student.clone();
    for (int j = 0; j < 3; ++j) {
      shifted_in.mutable_data()[3 + static_cast<size_t>(j)] += 2.5f;  // row 1
    }
    Tensor shifted = listnet_loss(t2, shifted_in, teacher, 1.0f, 1.0f);
    CHECK(base.item() == doctest::Approx(shifted.item()).epsilon(1e-4));
  }
  SUBCASE("2x2 case: single off-diagonal entry makes CE exactly zero") {
    Tape tape;
    Tensor teacher = Tensor::from_data({2, 2}, {0, 1, 0, 0});
    Tensor student = Tensor::from_data({2, 2}, {0, 0, 1, 0});
    Tensor loss = listnet_loss(tape, student, teacher, 1.0f, 1.0f);
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-7));
  }
  SUBCASE("1x1 is a parameter error") {
    Tape tape;
    Tensor one = Tensor::from_data({1, 1}, {0.5f});
    CHECK_THROWS_AS(listnet_loss(tape, one, one, 1.0f, 1.0f), ConfigError);
  }
}

TEST_CASE("strip_projection") {
  Toy toy = make_toy(15);
  ProjectionHead head = init_projection(toy.enc.cfg().hidden, 12, 3);
  auto params = toy.enc.model.named_params();
  params.emplace_back("proj.weight", head.weight);
  const auto dir = std::filesystem::temp_directory_path();
  const auto with_head = (dir / "ek_with_head.ekc").string();
  const auto stripped = (dir / "ek_stripped.ekc").string();
  save_checkpoint(with_head, toy.enc.cfg(), params);

  strip_projection(with_head, stripped);
  Checkpoint out = load_checkpoint(stripped);
  CHECK(!out.has_param("proj.weight"));
  EncoderModel restored = model_from_checkpoint(out);
  CHECK(model_param_hash(restored) == model_param_hash(toy.enc.model));
  // stripped model embeds at H_student
  SentenceEncoder enc2{restored, toy.vocab, {}};
  std::vector<std::string> texts = {toy.sentences[0]};
  Tensor e = embed_sentences(enc2, Pooling::MEAN, texts, false);
  CHECK(e.cols() == toy.enc.cfg().hidden);

  SUBCASE("stripping a headless checkpoint is a contract error") {
    CHECK_THROWS_AS(strip_projection(stripped, (dir / "ek_x.ekc").string()), ContractError);
  }
}

TEST_CASE("objective gradients pass finite differences on tiny configs") {
  Toy toy = make_toy(16, /*dropout=*/0.1f);
  TokenBatch batch = batch_of(toy, {0, 1, 2});

  SUBCASE("mlm") {
    const MaskingPlan plan =
        make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size, SplitRng(50));
    auto forward = [&]() {
      Tape t;
      return static_cast<double>(mlm_loss(t, toy.enc.model, batch, plan, 51).item());
    };
    Tape tape;
    Tensor loss = mlm_loss(tape, toy.enc.model, batch, plan, 51);
    tape.backward(loss);
    for (Tensor p : {toy.enc.model.token_emb, toy.enc.model.blocks[0].wq,
                     toy.enc.model.blocks[0].w1}) {
      CHECK(testutil::finite_diff_check(p, p.grad(), forward, 1e-3, 20, 99).worst < 1e-2);
    }
  }
  SUBCASE("retromae") {
    ShallowDecoder dec = init_decoder(toy.enc.cfg(), 52);
    const MaskingPlan enc_plan =
        make_masking_plan(batch, 0.3f, toy.enc.cfg().vocab_size, SplitRng(53));
    const MaskingPlan dec_plan =
        make_masking_plan(batch, 0.5f, toy.enc.cfg().vocab_size, SplitRng(54));
    auto forward = [&]() {
      Tape t;
      return static_cast<double>(
          retromae_loss_with_plans(t, toy.enc.model, dec, batch, enc_plan, dec_plan, 55).item());
    };
    Tape tape;
    Tensor loss =
        retromae_loss_with_plans(tape, toy.enc.model, dec, batch, enc_plan, dec_plan, 55);
    tape.backward(loss);
    for (Tensor p : {toy.enc.model.token_emb, dec.block.wv, toy.enc.model.blocks[0].wo}) {
      CHECK(testutil::finite_diff_check(p, p.grad(), forward, 1e-3, 20, 98).worst < 1e-2);
    }
  }
  SUBCASE("simcse") {
    std::vector<std::string> sentences(toy.sentences.begin(), toy.sentences.begin() + 3);
    auto forward = [&]() {
      Tape t;
      return static_cast<double>(simcse_loss(t, toy.enc, sentences, 0.1f, {61, 62}).item());
    };
    Tape tape;
    Tensor loss = simcse_loss(tape, toy.enc, sentences, 0.1f, {61, 62});
    tape.backward(loss);
    for (Tensor p : {toy.enc.model.token_emb, toy.enc.model.blocks[0].wk}) {
      CHECK(testutil::finite_diff_check(p, p.grad(), forward, 1e-3, 20, 97).worst < 1e-2);
    }
  }
  SUBCASE("distill") {
    std::vector<std::string> src = {toy.sentences[0], toy.sentences[1]};
    std::vector<std::string> tgt = {toy.sentences[2], toy.sentences[3]};
    const int ht = 6;
    ProjectionHead head = init_projection(toy.enc.cfg().hidden, ht, 63);
    Tensor teacher = Tensor::zeros({2, ht});
    SplitRng trng(64);
    for (int i = 0; i < 2; ++i) {
      float sq = 0;
      std::vector<float> row(static_cast<size_t>(ht));
      for (auto& v : row) {
        v = trng.next_float() - 0.5f;
        sq += v * v;
      }
      for (int j = 0; j < ht; ++j) {
        teacher.mutable_data()[static_cast<size_t>(i * ht + j)] = row[static_cast<size_t>(j)] / std::sqrt(sq);
      }
    }
    auto forward = [&]() {
      Tape t;
      return static_cast<double>(
          distill_loss(t, toy.enc, head, teacher, src, tgt, Pooling::MEAN, true, 65).item());
    };
    Tape tape;
    Tensor loss = distill_loss(tape, toy.enc, head, teacher, src, tgt, Pooling::MEAN, true, 65);
    tape.backward(loss);
    for (Tensor p : {head.weight, toy.enc.model.token_emb}) {
      CHECK(testutil::finite_diff_check(p, p.grad(), forward, 1e-3, 20, 96).worst < 1e-2);
    }
  }
  SUBCASE("listnet") {
    SplitRng rng(66);
    Tensor student = testutil::random_tensor({4, 4}, rng, 1.0f, true);
    Tensor teacher = testutil::random_tensor({4, 4}, rng, 1.0f, false);
    auto forward = [&]() {
      Tape t;
      return static_cast<double>(listnet_loss(t, student, teacher, 0.5f, 0.7f).item());
    };
    Tape tape;
    Tensor loss = listnet_loss(tape, student, teacher, 0.5f, 0.7f);
    tape.backward(loss);
    CHECK(testutil::finite_diff_check(student, student.grad(), forward).worst < 1e-2);
  }
}

TEST_SUITE_END();
