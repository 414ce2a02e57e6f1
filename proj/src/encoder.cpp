#include "embedkit/encoder.hpp"

#include <cmath>

#include "embedkit/rng.hpp"

namespace embedkit {

namespace {

constexpr float kInitStd = 0.02f;
constexpr float kMaskPenalty = -1e9f;

void fill_truncated_normal(Tensor& t, SplitRng rng) {
  for (auto& v : t.mutable_data()) v = rng.truncated_normal(kInitStd);
}

Tensor make_param(std::vector<int> shape, const std::string& name) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  t.set_name(name);
  return t;
}

// per-dropout-site seed stream, advanced in forward order
struct DropSites {
  uint64_t seed;
  uint64_t site{0};
  uint64_t next() { return SplitRng(seed).split(site++).next_u64(); }
};

Tensor block_forward_impl(Tape& tape, const EncoderModel::Block& blk, const Tensor& x,
                          const TokenBatch& batch, const EncoderConfig& cfg, bool training,
                          DropSites& drops) {
  const int b_count = batch.batch;
  const int seq = batch.seq_len;
  const int heads = cfg.heads;
  const int dh = cfg.head_dim();
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor q = linear(tape, x, blk.wq, blk.bq);
  Tensor k = linear(tape, x, blk.wk, blk.bk);
  Tensor v = linear(tape, x, blk.wv, blk.bv);

  std::vector<Tensor> ctx;
  ctx.reserve(static_cast<size_t>(b_count) * static_cast<size_t>(heads));
  std::vector<float> penalty(static_cast<size_t>(seq));
  for (int b = 0; b < b_count; ++b) {
    for (int t = 0; t < seq; ++t) {
      penalty[static_cast<size_t>(t)] =
          batch.mask[static_cast<size_t>(b * seq + t)] > 0.0f ? 0.0f : kMaskPenalty;
    }
    for (int h = 0; h < heads; ++h) {
      Tensor qs = block(tape, q, b * seq, seq, h * dh, dh);
      Tensor ks = block(tape, k, b * seq, seq, h * dh, dh);
      Tensor vs = block(tape, v, b * seq, seq, h * dh, dh);
      Tensor scores = scale(tape, matmul_nt(tape, qs, ks), inv_sqrt_dh);
      scores = add_row_broadcast(tape, scores, penalty);
      Tensor probs = softmax_rows(tape, scores);
      probs = dropout(tape, probs, cfg.dropout_p, drops.next(), training);
      ctx.push_back(matmul(tape, probs, vs));
    }
  }
  Tensor cat = concat_heads(tape, ctx, b_count, seq, heads, dh);
  Tensor attn = linear(tape, cat, blk.wo, blk.bo);
  attn = dropout(tape, attn, cfg.dropout_p, drops.next(), training);
  Tensor h1 = layer_norm(tape, add(tape, x, attn), blk.ln1_gamma, blk.ln1_beta);

  Tensor ff = linear(tape, h1, blk.w1, blk.b1);
  ff = gelu(tape, ff);
  ff = linear(tape, ff, blk.w2, blk.b2);
  ff = dropout(tape, ff, cfg.dropout_p, drops.next(), training);
  return layer_norm(tape, add(tape, h1, ff), blk.ln2_gamma, blk.ln2_beta);
}

}  // namespace

void EncoderConfig::validate() const {
  if (layers < 1) throw ConfigError("encoder config: layers must be >= 1");
  if (hidden < 1 || heads < 1 || hidden % heads != 0) {
    throw ConfigError("encoder config: hidden must be a positive multiple of heads");
  }
  if (ffn_mult < 1) throw ConfigError("encoder config: ffn_mult must be >= 1");
  if (max_len < 3) throw ConfigError("encoder config: max_len must be >= 3");
  if (vocab_size <= Vocab::kNumSpecials) {
    throw ConfigError("encoder config: vocab_size must exceed the special tokens");
  }
  if (dropout_p < 0.0f || dropout_p >= 1.0f) {
    throw ConfigError("encoder config: dropout_p must be in [0, 1)");
  }
}

int64_t EncoderConfig::parameter_count() const {
  const int64_t h = hidden;
  const int64_t f = ffn_mult;
  const int64_t per_block = (4 + 2 * f) * h * h + (9 + f) * h;
  return static_cast<int64_t>(vocab_size) * h + static_cast<int64_t>(max_len) * h + 2 * h +
         static_cast<int64_t>(layers) * per_block;
}

EncoderModel::Block init_block(const EncoderConfig& cfg, uint64_t seed,
                               const std::string& prefix) {
  const int h = cfg.hidden;
  const int fh = cfg.ffn_mult * h;
  SplitRng rng(seed);
  EncoderModel::Block blk;
  blk.wq = make_param({h, h}, prefix + ".attn.wq");
  blk.wk = make_param({h, h}, prefix + ".attn.wk");
  blk.wv = make_param({h, h}, prefix + ".attn.wv");
  blk.wo = make_param({h, h}, prefix + ".attn.wo");
  blk.bq = make_param({h}, prefix + ".attn.bq");
  blk.bk = make_param({h}, prefix + ".attn.bk");
  blk.bv = make_param({h}, prefix + ".attn.bv");
  blk.bo = make_param({h}, prefix + ".attn.bo");
  blk.ln1_gamma = make_param({h}, prefix + ".ln1.gamma");
  blk.ln1_beta = make_param({h}, prefix + ".ln1.beta");
  blk.w1 = make_param({h, fh}, prefix + ".ffn.w1");
  blk.b1 = make_param({fh}, prefix + ".ffn.b1");
  blk.w2 = make_param({fh, h}, prefix + ".ffn.w2");
  blk.b2 = make_param({h}, prefix + ".ffn.b2");
  blk.ln2_gamma = make_param({h}, prefix + ".ln2.gamma");
  blk.ln2_beta = make_param({h}, prefix + ".ln2.beta");

  fill_truncated_normal(blk.wq, rng.split(0));
  fill_truncated_normal(blk.wk, rng.split(1));
  fill_truncated_normal(blk.wv, rng.split(2));
  fill_truncated_normal(blk.wo, rng.split(3));
  fill_truncated_normal(blk.w1, rng.split(4));
  fill_truncated_normal(blk.w2, rng.split(5));
  for (auto& g : blk.ln1_gamma.mutable_data()) g = 1.0f;
  for (auto& g : blk.ln2_gamma.mutable_data()) g = 1.0f;
  return blk;
}

EncoderModel init_encoder(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  SplitRng rng(seed);
  EncoderModel model;
  model.cfg = cfg;
  model.token_emb = make_param({cfg.vocab_size, cfg.hidden}, "token_emb");
  model.pos_emb = make_param({cfg.max_len, cfg.hidden}, "pos_emb");
  model.emb_ln_gamma = make_param({cfg.hidden}, "emb_ln.gamma");
  model.emb_ln_beta = make_param({cfg.hidden}, "emb_ln.beta");
  fill_truncated_normal(model.token_emb, rng.split(0));
  fill_truncated_normal(model.pos_emb, rng.split(1));
  for (auto& g : model.emb_ln_gamma.mutable_data()) g = 1.0f;
  model.blocks.reserve(static_cast<size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    model.blocks.push_back(
        init_block(cfg, rng.split(100 + static_cast<uint64_t>(l)).next_u64(),
                   "block" + std::to_string(l)));
  }
  return model;
}

EncoderModel clone_encoder(const EncoderModel& model) {
  EncoderModel out;
  out.cfg = model.cfg;
  out.token_emb = model.token_emb.clone();
  out.pos_emb = model.pos_emb.clone();
  out.emb_ln_gamma = model.emb_ln_gamma.clone();
  out.emb_ln_beta = model.emb_ln_beta.clone();
  out.blocks.reserve(model.blocks.size());
  for (const auto& blk : model.blocks) {
    EncoderModel::Block b;
    b.wq = blk.wq.clone();
    b.bq = blk.bq.clone();
    b.wk = blk.wk.clone();
    b.bk = blk.bk.clone();
    b.wv = blk.wv.clone();
    b.bv = blk.bv.clone();
    b.wo = blk.wo.clone();
    b.bo = blk.bo.clone();
    b.ln1_gamma = blk.ln1_gamma.clone();
    b.ln1_beta = blk.ln1_beta.clone();
    b.w1 = blk.w1.clone();
    b.b1 = blk.b1.clone();
    b.w2 = blk.w2.clone();
    b.b2 = blk.b2.clone();
    b.ln2_gamma = blk.ln2_gamma.clone();
    b.ln2_beta = blk.ln2_beta.clone();
    out.blocks.push_back(std::move(b));
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> EncoderModel::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push = [&out](const Tensor& t) { out.emplace_back(t.name(), t); };
  push(token_emb);
  push(pos_emb);
  push(emb_ln_gamma);
  push(emb_ln_beta);
  for (const auto& blk : blocks) {
    push(blk.wq);
    push(blk.bq);
    push(blk.wk);
    push(blk.bk);
    push(blk.wv);
    push(blk.bv);
    push(blk.wo);
    push(blk.bo);
    push(blk.ln1_gamma);
    push(blk.ln1_beta);
    push(blk.w1);
    push(blk.b1);
    push(blk.w2);
    push(blk.b2);
    push(blk.ln2_gamma);
    push(blk.ln2_beta);
  }
  return out;
}

std::vector<Tensor> EncoderModel::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

TokenBatch pack_batch(std::span<const TokenSeq> seqs) {
  if (seqs.empty()) throw DataError("pack_batch: empty batch");
  TokenBatch batch;
  batch.batch = static_cast<int>(seqs.size());
  batch.seq_len = seqs[0].max_len;
  batch.ids.reserve(seqs.size() * static_cast<size_t>(batch.seq_len));
  batch.mask.reserve(batch.ids.capacity());
  for (const auto& s : seqs) {
    if (s.max_len != batch.seq_len || static_cast<int>(s.ids.size()) != batch.seq_len) {
      throw DimensionError("pack_batch: sequences must share max_len");
    }
    batch.ids.insert(batch.ids.end(), s.ids.begin(), s.ids.end());
    for (int m : s.attention_mask) batch.mask.push_back(static_cast<float>(m));
  }
  return batch;
}

Tensor block_forward(Tape& tape, const EncoderModel::Block& blk, const Tensor& x,
                     const TokenBatch& batch, const EncoderConfig& cfg, bool training,
                     uint64_t seed) {
  DropSites drops{seed};
  return block_forward_impl(tape, blk, x, batch, cfg, training, drops);
}

Tensor encoder_forward(Tape& tape, const EncoderModel& model, const TokenBatch& batch,
                       bool training, uint64_t seed) {
  const auto& cfg = model.cfg;
  if (batch.seq_len > cfg.max_len) {
    throw DimensionError("encoder_forward: sequence length exceeds max_len");
  }
  for (int id : batch.ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw DataError("encoder_forward: token id " + std::to_string(id) +
                      " outside vocabulary of size " + std::to_string(cfg.vocab_size));
    }
  }
  std::vector<int> pos_ids(batch.ids.size());
  for (int b = 0; b < batch.batch; ++b) {
    for (int t = 0; t < batch.seq_len; ++t) {
      pos_ids[static_cast<size_t>(b * batch.seq_len + t)] = t;
    }
  }
  DropSites drops{seed};
  Tensor x = add(tape, embedding_gather(tape, model.token_emb, batch.ids),
                 embedding_gather(tape, model.pos_emb, pos_ids));
  x = layer_norm(tape, x, model.emb_ln_gamma, model.emb_ln_beta);
  x = dropout(tape, x, cfg.dropout_p, drops.next(), training);
  for (const auto& blk : model.blocks) {
    x = block_forward_impl(tape, blk, x, batch, cfg, training, drops);
  }
  return x;
}

Tensor pool(Tape& tape, const Tensor& token_states, const TokenBatch& batch, Pooling kind) {
  return pool_sequences(tape, token_states, batch.mask, batch.batch, batch.seq_len, kind);
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "cls" || s == "CLS") return Pooling::CLS;
  if (s == "mean" || s == "MEAN") return Pooling::MEAN;
  if (s == "max" || s == "MAX") return Pooling::MAX;
  throw ConfigError("unknown pooling '" + s + "' (expected cls|mean|max)");
}

std::string pooling_to_string(Pooling p) {
  switch (p) {
    case Pooling::CLS: return "cls";
    case Pooling::MEAN: return "mean";
    case Pooling::MAX: return "max";
  }
  return "cls";
}

Tensor embed_sentences(const SentenceEncoder& enc, Pooling pooling,
                       std::span<const std::string> texts, bool normalize) {
  const int h = enc.cfg().hidden;
  Tensor out = Tensor::zeros({static_cast<int>(texts.size()), h});
  auto ov = out.mutable_data();
  constexpr size_t kChunk = 64;
  for (size_t start = 0; start < texts.size(); start += kChunk) {
    const size_t count = std::min(kChunk, texts.size() - start);
    std::vector<TokenSeq> seqs;
    seqs.reserve(count);
    for (size_t i = 0; i < count; ++i) {
      seqs.push_back(encode(enc.vocab, texts[start + i], enc.cfg().max_len, enc.tokenizer_opts));
    }
    TokenBatch batch = pack_batch(seqs);
    Tape tape = Tape::inference();
    Tensor states = encoder_forward(tape, enc.model, batch, /*training=*/false, /*seed=*/0);
    Tensor pooled = pool(tape, states, batch, pooling);
    if (normalize) pooled = l2_normalize_rows(tape, pooled);
    std::copy(pooled.data().begin(), pooled.data().end(),
              ov.begin() + static_cast<std::ptrdiff_t>(start * static_cast<size_t>(h)));
  }
  return out;
}

}  // namespace embedkit
