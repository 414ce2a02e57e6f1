#include "embedkit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace embedkit {

namespace {

constexpr char kMagic[8] = {'E', 'M', 'B', 'E', 'D', 'K', 'I', 'T'};
constexpr int kFormatVersion = 1;

using nlohmann::json;

void write_header_and_blob(const std::string& path, const json& header,
                           std::span<const float> blob) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  const std::string header_str = header.dump();
  const uint64_t len = header_str.size();
  out.write(kMagic, sizeof(kMagic));
  char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<char>((len >> (8 * i)) & 0xFF);
  out.write(len_bytes, 8);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("checkpoint: '" + path + "' is not an embedkit container");
  }
  char len_bytes[8];
  in.read(len_bytes, 8);
  if (!in) throw DataError("checkpoint: truncated header in '" + path + "'");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) {
    len |= static_cast<uint64_t>(static_cast<unsigned char>(len_bytes[i])) << (8 * i);
  }
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint: truncated header in '" + path + "'");
  json header = json::parse(header_str, nullptr, /*allow_exceptions=*/false);
  if (header.is_discarded()) throw DataError("checkpoint: malformed JSON header in '" + path + "'");
  if (header.value("format_version", -1) != kFormatVersion) {
    throw DataError("checkpoint: unsupported format_version in '" + path + "'");
  }
  return header;
}

json config_to_json(const EncoderConfig& cfg) {
  return json{{"layers", cfg.layers},     {"hidden", cfg.hidden},
              {"heads", cfg.heads},       {"ffn_mult", cfg.ffn_mult},
              {"max_len", cfg.max_len},   {"vocab_size", cfg.vocab_size},
              {"dropout_p", cfg.dropout_p}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig cfg;
  cfg.layers = j.at("layers").get<int>();
  cfg.hidden = j.at("hidden").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.ffn_mult = j.at("ffn_mult").get<int>();
  cfg.max_len = j.at("max_len").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.dropout_p = j.at("dropout_p").get<float>();
  cfg.validate();
  return cfg;
}

}  // namespace

bool Checkpoint::has_param(const std::string& name) const {
  for (const auto& [n, t] : params) {
    if (n == name) return true;
  }
  return false;
}

Tensor Checkpoint::param(const std::string& name) const {
  for (const auto& [n, t] : params) {
    if (n == name) return t;
  }
  throw DataError("checkpoint: missing parameter '" + name + "'");
}

void save_checkpoint(const std::string& path, const EncoderConfig& cfg,
                     std::span<const std::pair<std::string, Tensor>> params) {
  json manifest = json::array();
  std::vector<float> blob;
  uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    manifest.push_back(entry);
    blob.insert(blob.end(), t.data().begin(), t.data().end());
    offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
  }
  json header{{"format_version", kFormatVersion},
              {"kind", "checkpoint"},
              {"config", config_to_json(cfg)},
              {"params", manifest}};
  write_header_and_blob(path, header, blob);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  json header = read_header(in, path);
  if (header.value("kind", "") != "checkpoint") {
    throw DataError("checkpoint: '" + path + "' is not a checkpoint container");
  }
  Checkpoint ckpt;
  ckpt.kind = "checkpoint";
  ckpt.config = config_from_json(header.at("config"));
  const auto blob_start = in.tellg();
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    int64_t numel = 1;
    for (int d : shape) numel *= d;
    std::vector<float> data(static_cast<size_t>(numel));
    in.seekg(blob_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw DataError("checkpoint: truncated blob reading '" + name + "' from '" + path + "'");
    Tensor t = Tensor::from_data(shape, std::move(data), /*requires_grad=*/true);
    t.set_name(name);
    ckpt.params.emplace_back(name, std::move(t));
  }
  return ckpt;
}

EncoderModel model_from_checkpoint(const Checkpoint& ckpt) {
  EncoderModel model = init_encoder(ckpt.config, /*seed=*/0);
  auto expected = model.named_params();
  size_t found = 0;
  for (const auto& [name, stored] : ckpt.params) {
    if (name.rfind("proj.", 0) == 0) continue;  // projection head rides along
    bool known = false;
    for (auto& [ename, target] : expected) {
      if (ename != name) continue;
      known = true;
      if (stored.shape() != target.shape()) {
        throw DataError("checkpoint: parameter '" + name + "' shape does not match config");
      }
      std::copy(stored.data().begin(), stored.data().end(), target.mutable_data().begin());
      ++found;
      break;
    }
    if (!known) throw DataError("checkpoint: unknown parameter '" + name + "'");
  }
  if (found != expected.size()) {
    throw DataError("checkpoint: missing parameters (expected " +
                    std::to_string(expected.size()) + ", found " + std::to_string(found) + ")");
  }
  return model;
}

void save_encoder(const std::string& path, const EncoderModel& model) {
  const auto params = model.named_params();
  save_checkpoint(path, model.cfg, params);
}

EncoderModel load_encoder(const std::string& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

void save_embeddings(const std::string& path, const Tensor& rows, bool normalized) {
  if (rows.rank() != 2) throw DimensionError("save_embeddings: expected [rows x dim]");
  json header{{"format_version", kFormatVersion},
              {"kind", "embeddings"},
              {"rows", rows.rows()},
              {"dim", rows.cols()},
              {"normalized", normalized}};
  write_header_and_blob(path, header, rows.data());
}

Tensor load_embeddings(const std::string& path, bool* normalized) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("embeddings: cannot open '" + path + "'");
  json header = read_header(in, path);
  if (header.value("kind", "") != "embeddings") {
    throw DataError("embeddings: '" + path + "' is not an embeddings container");
  }
  const int rows = header.at("rows").get<int>();
  const int dim = header.at("dim").get<int>();
  if (normalized) *normalized = header.value("normalized", false);
  std::vector<float> data(static_cast<size_t>(rows) * static_cast<size_t>(dim));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw DataError("embeddings: truncated blob in '" + path + "'");
  return Tensor::from_data({rows, dim}, std::move(data));
}

}  // namespace embedkit
