#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/encoder.hpp"
#include "embedkit/rng.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

// One masked slot: where, what was there, and what the encoder sees instead
// (80% [MASK], 10% random token, 10% unchanged).
struct MaskedSlot {
  int flat_pos;        // index into the flattened batch
  int original_id;
  int replacement_id;
};

struct MaskingPlan {
  float ratio{0.0f};
  std::vector<MaskedSlot> slots;

  std::vector<int> apply(std::span<const int> ids) const;
  std::vector<int> positions() const;
  std::vector<int> originals() const;
};

// samples maskable (non-special) positions per sequence at the given ratio;
// special tokens are never masked
MaskingPlan make_masking_plan(const TokenBatch& batch, float ratio, int vocab_size,
                              SplitRng rng);

// mean cross-entropy over masked positions; logits tied to token embeddings
Tensor mlm_loss(Tape& tape, const EncoderModel& model, const TokenBatch& batch,
                const MaskingPlan& plan, uint64_t seed);

// single transformer block + output projection tied to token embeddings
struct ShallowDecoder {
  EncoderModel::Block block;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
};

ShallowDecoder init_decoder(const EncoderConfig& cfg, uint64_t seed);

// asymmetric-mask autoencoding: lightly masked encoder, heavily masked
// one-layer decoder reading the encoder's CLS state at position 0.
// Returns encoder CE + decoder CE.
Tensor retromae_loss(Tape& tape, const EncoderModel& model, const ShallowDecoder& decoder,
                     const TokenBatch& batch, float enc_ratio, float dec_ratio,
                     uint64_t seed);

// same objective with caller-supplied plans; an empty decoder plan makes the
// decoder term vanish. inject_cls=false ablates the sentence-embedding path
// (decoder keeps its own position-0 embedding).
Tensor retromae_loss_with_plans(Tape& tape, const EncoderModel& model,
                                const ShallowDecoder& decoder, const TokenBatch& batch,
                                const MaskingPlan& enc_plan, const MaskingPlan& dec_plan,
                                uint64_t seed, bool inject_cls = true);

// mean over rows i of -log( exp(cos(z1_i, z2_i)/tau) / sum_j exp(cos(z1_i, z2_j)/tau) );
// rows are L2-normalized internally
Tensor infonce_diagonal(Tape& tape, const Tensor& z1, const Tensor& z2, float temperature);

// contrastive loss over two dropout-noised encodings of the same sentences;
// in-batch negatives, cosine similarities at the given temperature
Tensor simcse_loss(Tape& tape, const SentenceEncoder& enc, std::span<const std::string> sentences,
                   float temperature, std::pair<uint64_t, uint64_t> seeds,
                   Pooling pooling = Pooling::CLS);

struct ProjectionHead {
  Tensor weight;  // [H_student x H_teacher]
};

ProjectionHead init_projection(int h_student, int h_teacher, uint64_t seed);

// MSE of normalized projected student embeddings against the teacher rows,
// summed over the source and target sides
Tensor distill_loss(Tape& tape, const SentenceEncoder& student, const ProjectionHead& head,
                    const Tensor& teacher_embs, std::span<const std::string> src_texts,
                    std::span<const std::string> tgt_texts, Pooling pooling, bool training,
                    uint64_t seed);

// per-row cross-entropy between teacher and student softmax distributions
// over off-diagonal similarities
Tensor listnet_loss(Tape& tape, const Tensor& student_sims, const Tensor& teacher_sims,
                    float tau_student, float tau_teacher);

// removes the projection head from a distillation checkpoint; encoder
// parameters pass through bit-identical
void strip_projection(const std::string& in_path, const std::string& out_path);

}  // namespace embedkit
