#include "embedkit/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "embedkit/checkpoint.hpp"

namespace embedkit {

namespace {

bool maskable_id(int id) {
  return id != Vocab::kPad && id != Vocab::kCls && id != Vocab::kSep;
}

Tensor cls_rows(Tape& tape, const Tensor& states, const TokenBatch& batch) {
  std::vector<int> rows(static_cast<size_t>(batch.batch));
  for (int b = 0; b < batch.batch; ++b) rows[static_cast<size_t>(b)] = b * batch.seq_len;
  return gather_rows(tape, states, rows);
}

// CE over the plan's positions with logits tied to the token embeddings
Tensor masked_ce(Tape& tape, const Tensor& states, const Tensor& token_emb,
                 const MaskingPlan& plan) {
  const auto positions = plan.positions();
  const auto originals = plan.originals();
  Tensor picked = gather_rows(tape, states, positions);
  Tensor logits = matmul_nt(tape, picked, token_emb);
  return cross_entropy_mean(tape, logits, originals);
}

}  // namespace

std::vector<int> MaskingPlan::apply(std::span<const int> ids) const {
  std::vector<int> out(ids.begin(), ids.end());
  for (const auto& slot : slots) {
    out[static_cast<size_t>(slot.flat_pos)] = slot.replacement_id;
  }
  return out;
}

std::vector<int> MaskingPlan::positions() const {
  std::vector<int> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.push_back(s.flat_pos);
  return out;
}

std::vector<int> MaskingPlan::originals() const {
  std::vector<int> out;
  out.reserve(slots.size());
  for (const auto& s : slots) out.push_back(s.original_id);
  return out;
}

MaskingPlan make_masking_plan(const TokenBatch& batch, float ratio, int vocab_size,
                              SplitRng rng) {
  if (ratio <= 0.0f || ratio >= 1.0f) throw ConfigError("masking: ratio must be in (0, 1)");
  MaskingPlan plan;
  plan.ratio = ratio;
  for (int b = 0; b < batch.batch; ++b) {
    std::vector<int> candidates;
    for (int t = 0; t < batch.seq_len; ++t) {
      const int flat = b * batch.seq_len + t;
      if (batch.mask[static_cast<size_t>(flat)] > 0.0f &&
          maskable_id(batch.ids[static_cast<size_t>(flat)])) {
        candidates.push_back(flat);
      }
    }
    if (candidates.empty()) continue;
    const int m = static_cast<int>(candidates.size());
    int count = static_cast<int>(std::lround(ratio * static_cast<float>(m)));
    count = std::clamp(count, 1, m);
    SplitRng seq_rng = rng.split(static_cast<uint64_t>(b));
    seq_rng.shuffle(candidates);
    for (int i = 0; i < count; ++i) {
      const int flat = candidates[static_cast<size_t>(i)];
      const int original = batch.ids[static_cast<size_t>(flat)];
      const double roll = seq_rng.next_double();
      int replacement;
      if (roll < 0.8) {
        replacement = Vocab::kMask;
      } else if (roll < 0.9) {
        replacement = Vocab::kNumSpecials +
                      static_cast<int>(seq_rng.next_below(
                          static_cast<uint64_t>(vocab_size - Vocab::kNumSpecials)));
      } else {
        replacement = original;
      }
      plan.slots.push_back(MaskedSlot{flat, original, replacement});
    }
  }
  return plan;
}

Tensor mlm_loss(Tape& tape, const EncoderModel& model, const TokenBatch& batch,
                const MaskingPlan& plan, uint64_t seed) {
  if (plan.slots.empty()) throw DataError("mlm_loss: batch has no maskable tokens");
  TokenBatch masked = batch;
  masked.ids = plan.apply(batch.ids);
  Tensor states = encoder_forward(tape, model, masked, /*training=*/true, seed);
  return masked_ce(tape, states, model.token_emb, plan);
}

std::vector<std::pair<std::string, Tensor>> ShallowDecoder::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push = [&out](const Tensor& t) { out.emplace_back(t.name(), t); };
  push(block.wq);
  push(block.bq);
  push(block.wk);
  push(block.bk);
  push(block.wv);
  push(block.bv);
  push(block.wo);
  push(block.bo);
  push(block.ln1_gamma);
  push(block.ln1_beta);
  push(block.w1);
  push(block.b1);
  push(block.w2);
  push(block.b2);
  push(block.ln2_gamma);
  push(block.ln2_beta);
  return out;
}

std::vector<Tensor> ShallowDecoder::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

ShallowDecoder init_decoder(const EncoderConfig& cfg, uint64_t seed) {
  return ShallowDecoder{init_block(cfg, seed, "decoder.block")};
}

namespace {

Tensor retromae_loss_impl(Tape& tape, const EncoderModel& model, const ShallowDecoder& decoder,
                          const TokenBatch& batch, const MaskingPlan& enc_plan,
                          const MaskingPlan& dec_plan, uint64_t seed, bool inject_cls) {
  if (enc_plan.slots.empty()) throw DataError("retromae_loss: batch has no maskable tokens");
  SplitRng rng(seed);

  // encoder side: lightly masked input, MLM term, CLS sentence states
  TokenBatch enc_batch = batch;
  enc_batch.ids = enc_plan.apply(batch.ids);
  Tensor enc_states =
      encoder_forward(tape, model, enc_batch, /*training=*/true, rng.split(0).next_u64());
  Tensor enc_term = masked_ce(tape, enc_states, model.token_emb, enc_plan);
  Tensor cls = cls_rows(tape, enc_states, batch);

  if (dec_plan.slots.empty()) return enc_term;  // empty decoder plan contributes zero

  // decoder side: heavily masked embeddings, CLS injected at position 0
  const std::vector<int> dec_ids = dec_plan.apply(batch.ids);
  std::vector<int> pos_ids(dec_ids.size());
  std::vector<int> cls_positions(static_cast<size_t>(batch.batch));
  for (int b = 0; b < batch.batch; ++b) {
    cls_positions[static_cast<size_t>(b)] = b * batch.seq_len;
    for (int t = 0; t < batch.seq_len; ++t) {
      pos_ids[static_cast<size_t>(b * batch.seq_len + t)] = t;
    }
  }
  Tensor dec_in = add(tape, embedding_gather(tape, model.token_emb, dec_ids),
                      embedding_gather(tape, model.pos_emb, pos_ids));
  if (inject_cls) {
    dec_in = replace_rows(tape, dec_in, cls, cls_positions);
  }
  Tensor dec_states = block_forward(tape, decoder.block, dec_in, batch, model.cfg,
                                    /*training=*/true, rng.split(1).next_u64());
  Tensor dec_term = masked_ce(tape, dec_states, model.token_emb, dec_plan);
  return add(tape, enc_term, dec_term);
}

}  // namespace

Tensor retromae_loss(Tape& tape, const EncoderModel& model, const ShallowDecoder& decoder,
                     const TokenBatch& batch, float enc_ratio, float dec_ratio,
                     uint64_t seed) {
  if (!(enc_ratio < dec_ratio)) {
    throw ContractError("retromae_loss: encoder ratio must be below decoder ratio");
  }
  SplitRng rng(seed);
  const MaskingPlan enc_plan =
      make_masking_plan(batch, enc_ratio, model.cfg.vocab_size, rng.split(100));
  const MaskingPlan dec_plan =
      make_masking_plan(batch, dec_ratio, model.cfg.vocab_size, rng.split(200));
  return retromae_loss_impl(tape, model, decoder, batch, enc_plan, dec_plan,
                            rng.split(300).next_u64(), /*inject_cls=*/true);
}

Tensor retromae_loss_with_plans(Tape& tape, const EncoderModel& model,
                                const ShallowDecoder& decoder, const TokenBatch& batch,
                                const MaskingPlan& enc_plan, const MaskingPlan& dec_plan,
                                uint64_t seed, bool inject_cls) {
  return retromae_loss_impl(tape, model, decoder, batch, enc_plan, dec_plan, seed, inject_cls);
}

Tensor infonce_diagonal(Tape& tape, const Tensor& z1, const Tensor& z2, float temperature) {
  if (temperature <= 0.0f) throw ConfigError("infonce: temperature must be > 0");
  if (z1.rank() != 2 || z1.shape() != z2.shape()) {
    throw DimensionError("infonce: views must share [N x H]");
  }
  const int n = z1.rows();
  if (n < 2) throw ConfigError("infonce: need at least 2 rows for in-batch negatives");
  Tensor a = l2_normalize_rows(tape, z1);
  Tensor b = l2_normalize_rows(tape, z2);
  Tensor logits = scale(tape, matmul_nt(tape, a, b), 1.0f / temperature);
  std::vector<int> targets(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) targets[static_cast<size_t>(i)] = i;
  return cross_entropy_mean(tape, logits, targets);
}

Tensor simcse_loss(Tape& tape, const SentenceEncoder& enc, std::span<const std::string> sentences,
                   float temperature, std::pair<uint64_t, uint64_t> seeds, Pooling pooling) {
  const int n = static_cast<int>(sentences.size());
  if (n < 2) throw ConfigError("simcse_loss: need at least 2 sentences for in-batch negatives");
  if (temperature <= 0.0f) throw ConfigError("simcse_loss: temperature must be > 0");

  std::vector<TokenSeq> seqs;
  seqs.reserve(sentences.size());
  for (const auto& s : sentences) {
    seqs.push_back(encode(enc.vocab, s, enc.cfg().max_len, enc.tokenizer_opts));
  }
  TokenBatch batch = pack_batch(seqs);

  // same sentences, two dropout masks: the only difference between views
  Tensor s1 = encoder_forward(tape, enc.model, batch, /*training=*/true, seeds.first);
  Tensor s2 = encoder_forward(tape, enc.model, batch, /*training=*/true, seeds.second);
  return infonce_diagonal(tape, pool(tape, s1, batch, pooling),
                          pool(tape, s2, batch, pooling), temperature);
}

ProjectionHead init_projection(int h_student, int h_teacher, uint64_t seed) {
  Tensor w = Tensor::zeros({h_student, h_teacher}, /*requires_grad=*/true);
  w.set_name("proj.weight");
  SplitRng rng(seed);
  for (auto& v : w.mutable_data()) v = rng.truncated_normal(0.02f);
  return ProjectionHead{w};
}

Tensor distill_loss(Tape& tape, const SentenceEncoder& student, const ProjectionHead& head,
                    const Tensor& teacher_embs, std::span<const std::string> src_texts,
                    std::span<const std::string> tgt_texts, Pooling pooling, bool training,
                    uint64_t seed) {
  if (src_texts.size() != tgt_texts.size() ||
      static_cast<int>(src_texts.size()) != teacher_embs.rows()) {
    throw DimensionError("distill_loss: src/tgt/teacher row counts must match");
  }
  if (head.weight.rows() != student.cfg().hidden) {
    throw ContractError("distill_loss: projection input dim does not match student hidden");
  }
  if (head.weight.cols() != teacher_embs.cols()) {
    throw ContractError("distill_loss: projection output dim does not match teacher dim");
  }
  // the objective regresses onto unit vectors; reject an unnormalized teacher
  const int ht = teacher_embs.cols();
  for (int i = 0; i < teacher_embs.rows(); ++i) {
    double sq = 0.0;
    for (int j = 0; j < ht; ++j) {
      const float v = teacher_embs.at(i, j);
      sq += static_cast<double>(v) * v;
    }
    if (std::fabs(std::sqrt(sq) - 1.0) > 1e-3) {
      throw DataError("distill_loss: teacher row " + std::to_string(i) + " is not L2-normalized");
    }
  }

  SplitRng rng(seed);
  auto side_loss = [&](std::span<const std::string> texts, uint64_t side_seed) {
    std::vector<TokenSeq> seqs;
    seqs.reserve(texts.size());
    for (const auto& s : texts) {
      seqs.push_back(encode(student.vocab, s, student.cfg().max_len, student.tokenizer_opts));
    }
    TokenBatch batch = pack_batch(seqs);
    Tensor states = encoder_forward(tape, student.model, batch, training, side_seed);
    Tensor pooled = pool(tape, states, batch, pooling);
    Tensor projected = l2_normalize_rows(tape, matmul(tape, pooled, head.weight));
    return mean_squared_error(tape, projected, teacher_embs);
  };
  Tensor src_term = side_loss(src_texts, rng.split(0).next_u64());
  Tensor tgt_term = side_loss(tgt_texts, rng.split(1).next_u64());
  return add(tape, src_term, tgt_term);
}

Tensor listnet_loss(Tape& tape, const Tensor& student_sims, const Tensor& teacher_sims,
                    float tau_student, float tau_teacher) {
  if (student_sims.rank() != 2 || student_sims.rows() != student_sims.cols()) {
    throw DimensionError("listnet_loss: student similarities must be square");
  }
  if (teacher_sims.rank() != 2 || teacher_sims.shape() != student_sims.shape()) {
    throw DimensionError("listnet_loss: teacher similarities must match student shape");
  }
  const int n = student_sims.rows();
  if (n < 2) throw ConfigError("listnet_loss: need at least a 2x2 similarity matrix");
  if (tau_student <= 0.0f || tau_teacher <= 0.0f) {
    throw ConfigError("listnet_loss: temperatures must be > 0");
  }

  // teacher distribution is a constant target
  Tensor teacher_probs = Tensor::zeros({n, n - 1});
  auto tp = teacher_probs.mutable_data();
  for (int i = 0; i < n; ++i) {
    std::vector<double> row;
    row.reserve(static_cast<size_t>(n) - 1);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      row.push_back(static_cast<double>(teacher_sims.at(i, j)) / tau_teacher);
    }
    const double mx = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      denom += v;
    }
    for (int j = 0; j < n - 1; ++j) {
      tp[static_cast<size_t>(i) * (n - 1) + static_cast<size_t>(j)] =
          static_cast<float>(row[static_cast<size_t>(j)] / denom);
    }
  }

  Tensor student_logits =
      scale(tape, exclude_diag(tape, student_sims), 1.0f / tau_student);
  return soft_cross_entropy_mean(tape, student_logits, teacher_probs);
}

void strip_projection(const std::string& in_path, const std::string& out_path) {
  Checkpoint ckpt = load_checkpoint(in_path);
  bool had_head = false;
  std::vector<std::pair<std::string, Tensor>> kept;
  for (const auto& [name, t] : ckpt.params) {
    if (name.rfind("proj.", 0) == 0) {
      had_head = true;
      continue;
    }
    kept.emplace_back(name, t);
  }
  if (!had_head) {
    throw ContractError("strip_projection: checkpoint has no projection head");
  }
  save_checkpoint(out_path, ckpt.config, kept);
}

}  // namespace embedkit
