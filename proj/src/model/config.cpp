// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/model/config.hpp"

#include "clinlm/common/error.hpp"

namespace clinlm::model {

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(num_layers >= 1, "num_layers must be >= 1");
  need(hidden_size >= 1, "hidden_size must be >= 1");
  need(num_heads >= 1, "num_heads must be >= 1");
  need(vocab_size >= 1, "vocab_size must be >= 1");
  need(type_vocab >= 1, "type_vocab must be >= 1");
  need(max_seq_len >= 2, "max_seq_len must be >= 2, got " + std::to_string(max_seq_len));
  need(hidden_size % num_heads == 0, "hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " +
                                         std::to_string(num_heads));
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
}

std::vector<std::string> preset_names() { return {"tiny", "desk", "base", "medium", "large"}; }

ModelConfig preset(std::string_view name, std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  if (name == "tiny") {
    c.num_layers = 2, c.hidden_size = 64, c.num_heads = 4, c.max_seq_len = 128, c.dropout = 0.0;
  } else if (name == "desk") {
    c.num_layers = 4, c.hidden_size = 128, c.num_heads = 4, c.max_seq_len = 128;
  } else if (name == "base") {
    c.num_layers = 24, c.hidden_size = 1024, c.num_heads = 16, c.max_seq_len = 512;
  } else if (name == "medium") {
    c.num_layers = 48, c.hidden_size = 2560, c.num_heads = 40, c.max_seq_len = 512;
  } else if (name == "large") {
    c.num_layers = 56, c.hidden_size = 3584, c.num_heads = 56, c.max_seq_len = 512;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

std::uint64_t count_params(const ModelConfig& cfg, bool with_pretraining_heads) {
  cfg.validate();
  const std::uint64_t h = cfg.hidden_size, i = cfg.ffn_size(), v = cfg.vocab_size, s = cfg.max_seq_len,
                      t = cfg.type_vocab, l = cfg.num_layers;
  std::uint64_t embeddings = (v + s + t) * h + 2 * h;
  std::uint64_t attention = 4 * (h * h + h) + 2 * h;
  std::uint64_t ffn = (h * i + i) + (i * h + h) + 2 * h;
  std::uint64_t pooler = h * h + h;
  std::uint64_t total = embeddings + l * (attention + ffn) + pooler;
  if (with_pretraining_heads) total += (h * h + h) + 2 * h + (h * 2 + 2);
  return total;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},   {"hidden_size", c.hidden_size}, {"num_heads", c.num_heads},
          {"intermediate_size", c.ffn_size()}, {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"type_vocab", c.type_vocab},   {"dropout", c.dropout}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.intermediate_size = j.value("intermediate_size", std::size_t{0});
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.type_vocab = j.value("type_vocab", std::size_t{2});
    c.dropout = j.value("dropout", 0.1);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace clinlm::model
