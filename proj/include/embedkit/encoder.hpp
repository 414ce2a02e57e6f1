#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/tensor.hpp"
#include "embedkit/tokenizer.hpp"

namespace embedkit {

struct EncoderConfig {
  int layers{4};
  int hidden{64};
  int heads{4};
  int ffn_mult{4};
  int max_len{64};
  int vocab_size{2000};
  float dropout_p{0.1f};

  void validate() const;  // throws ConfigError
  int64_t parameter_count() const;
  int head_dim() const { return hidden / heads; }
};

// BERT-style post-layer-norm encoder: learned token + absolute position
// embeddings, L blocks of masked multi-head self-attention and a GELU FFN.
struct EncoderModel {
  struct Block {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_gamma, ln1_beta;
    Tensor w1, b1, w2, b2;
    Tensor ln2_gamma, ln2_beta;
  };

  EncoderConfig cfg;
  Tensor token_emb;  // [vocab x H]
  Tensor pos_emb;    // [max_len x H]
  Tensor emb_ln_gamma, emb_ln_beta;
  std::vector<Block> blocks;

  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
};

// truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains
EncoderModel init_encoder(const EncoderConfig& cfg, uint64_t seed);

// deep copy: fine-tuning a clone leaves the source untouched
EncoderModel clone_encoder(const EncoderModel& model);

// a standalone transformer block with its own parameters (the shallow decoder
// reuses this machinery)
EncoderModel::Block init_block(const EncoderConfig& cfg, uint64_t seed,
                               const std::string& prefix);

// flattened batch: token ids and 0/1 mask laid out [b*seq_len + t]
struct TokenBatch {
  std::vector<int> ids;
  std::vector<float> mask;
  int batch{0};
  int seq_len{0};
};

TokenBatch pack_batch(std::span<const TokenSeq> seqs);

// token states [(B*T) x H]; padding never influences non-pad positions
Tensor encoder_forward(Tape& tape, const EncoderModel& model, const TokenBatch& batch,
                       bool training, uint64_t seed);

// one attention+FFN block over precomputed input states
Tensor block_forward(Tape& tape, const EncoderModel::Block& blk, const Tensor& x,
                     const TokenBatch& batch, const EncoderConfig& cfg, bool training,
                     uint64_t seed);

Tensor pool(Tape& tape, const Tensor& token_states, const TokenBatch& batch, Pooling kind);

Pooling pooling_from_string(const std::string& s);
std::string pooling_to_string(Pooling p);

// encoder + the vocabulary it was trained with
struct SentenceEncoder {
  EncoderModel model;
  Vocab vocab;
  TokenizerOptions tokenizer_opts;

  const EncoderConfig& cfg() const { return model.cfg; }
};

// eval-mode forward + pool over a list of texts -> [N x H]
Tensor embed_sentences(const SentenceEncoder& enc, Pooling pooling,
                       std::span<const std::string> texts, bool normalize);

}  // namespace embedkit
