// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clinlm/model/config.hpp"
#include "clinlm/model/encoder.hpp"
#include "clinlm/tensor/tensor.hpp"

namespace clinlm::model {

inline constexpr std::string_view kCheckpointMagic = "GTRN";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little endian): "GTRN", u32 version, ModelConfig as seven u32
// counts plus the dropout rate as f64 bits, u32-length JSON metadata, u32
// tensor count, then per tensor u32 name length, name, u32 rank, u64 dims,
// f32 payload.
struct Checkpoint {
  ModelConfig cfg;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  // nullptr when absent.
  const Tensor<float>* find(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws SchemaError on bad magic, unknown version or inconsistent payloads.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint make_checkpoint(const Encoder<T>& enc, nlohmann::json metadata = nlohmann::json::object());

// Rebuilds an encoder, checking every expected tensor name and shape.
template <typename T>
Encoder<T> encoder_from_checkpoint(const Checkpoint& ckpt);

// Appends tensors (e.g. a task head) under the given names.
template <typename T>
void add_tensors(Checkpoint& ckpt, const std::vector<std::pair<std::string, Tensor<T>>>& named);

// Copy of a stored tensor in precision T, with requires_grad set.
template <typename T>
Tensor<T> checkpoint_tensor(const Checkpoint& ckpt, std::string_view name);

}  // namespace clinlm::model
