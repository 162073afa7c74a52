// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace clinlm::model {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 128;
  std::size_t num_heads = 4;
  std::size_t intermediate_size = 0;  // 0 means 4 * hidden_size
  std::size_t vocab_size = 4096;
  std::size_t max_seq_len = 128;
  std::size_t type_vocab = 2;
  double dropout = 0.1;

  std::size_t ffn_size() const { return intermediate_size ? intermediate_size : 4 * hidden_size; }
  std::size_t head_dim() const { return hidden_size / num_heads; }

  // Throws ConfigError on H mod A != 0, zero counts or max_seq_len < 2.
  void validate() const;

  // Compares the effective FFN width, so 0 and 4H are equal.
  bool operator==(const ModelConfig& o) const {
    return num_layers == o.num_layers && hidden_size == o.hidden_size && num_heads == o.num_heads &&
           ffn_size() == o.ffn_size() && vocab_size == o.vocab_size && max_seq_len == o.max_seq_len &&
           type_vocab == o.type_vocab && dropout == o.dropout;
  }
};

// "tiny", "desk", "base", "medium", "large". Throws ConfigError otherwise.
ModelConfig preset(std::string_view name, std::size_t vocab_size = 4096);
std::vector<std::string> preset_names();

// Exact scalar count by closed form. The MLM head shares the token
// embedding, so only its transform and the SOP classifier are added when
// `with_pretraining_heads` is set.
std::uint64_t count_params(const ModelConfig& cfg, bool with_pretraining_heads = false);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace clinlm::model
