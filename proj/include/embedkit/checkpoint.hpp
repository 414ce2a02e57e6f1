#pragma once

#include <string>
#include <utility>
#include <vector>

#include "embedkit/encoder.hpp"
#include "embedkit/tensor.hpp"

namespace embedkit {

// Container layout: 8-byte magic "EMBEDKIT", u64 little-endian JSON header
// length, UTF-8 JSON header, then a little-endian f32 blob. Checkpoints carry
// {format_version, kind:"checkpoint", config, params:[{name, shape, offset}]};
// embedding files carry {format_version, kind:"embeddings", rows, dim,
// normalized}.

struct Checkpoint {
  EncoderConfig config;
  std::vector<std::pair<std::string, Tensor>> params;  // file order
  std::string kind;

  bool has_param(const std::string& name) const;
  Tensor param(const std::string& name) const;  // throws DataError if absent
};

void save_checkpoint(const std::string& path, const EncoderConfig& cfg,
                     std::span<const std::pair<std::string, Tensor>> params);

Checkpoint load_checkpoint(const std::string& path);

// validates the manifest against config-derived shapes; params named
// "proj.*" are tolerated (projection heads ride along in distillation
// checkpoints), anything else unknown is an error
EncoderModel model_from_checkpoint(const Checkpoint& ckpt);

void save_encoder(const std::string& path, const EncoderModel& model);
EncoderModel load_encoder(const std::string& path);

void save_embeddings(const std::string& path, const Tensor& rows, bool normalized);
Tensor load_embeddings(const std::string& path, bool* normalized = nullptr);

}  // namespace embedkit
