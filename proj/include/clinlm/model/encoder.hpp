// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clinlm/common/rng.hpp"
#include "clinlm/model/config.hpp"
#include "clinlm/tensor/tensor.hpp"

namespace clinlm::model {

// Weight stored [in, out] so y = x W + b.
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
struct EncoderLayer {
  Linear<T> q, k, v, o;
  LayerNormParams<T> attn_ln;
  Linear<T> ffn_in, ffn_out;
  LayerNormParams<T> ffn_ln;
};

// Post-LN BERT encoder with learned absolute positions, a tanh pooler and the
// MLM/SOP pretraining heads. The MLM decoder is the transposed token
// embedding with no bias.
//
// A tensor-parallel shard uses the same type: q/k/v and ffn_in hold a column
// slice, o and ffn_out a row slice, everything else is replicated.
template <typename T>
struct Encoder {
  ModelConfig cfg;
  Tensor<T> token_emb, position_emb, segment_emb;
  LayerNormParams<T> emb_ln;
  std::vector<EncoderLayer<T>> layers;
  Linear<T> pooler;
  Linear<T> mlm_transform;
  LayerNormParams<T> mlm_ln;
  Linear<T> sop;

  // Parameters in a fixed, documented order ("layer.0.attn.q.weight", ...).
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  // Scalars in the encoder body, excluding pretraining heads.
  std::uint64_t body_size() const;
  void zero_grad();
  Encoder clone() const;
};

// Truncated N(0, 0.02^2) weights and embeddings, zero biases, unit LN gains.
// Deterministic for a given seed.
template <typename T>
Encoder<T> build_encoder(const ModelConfig& cfg, std::uint64_t seed);

// Hooks a tensor-parallel runtime installs around the sharded regions.
// enter() is applied to a replicated activation before it feeds a column
// split; reduce() sums the partial outputs of a row split across workers.
template <typename T>
struct ParallelHooks {
  virtual ~ParallelHooks() = default;
  virtual Tensor<T> enter(Tape<T>& tape, const Tensor<T>& x, std::size_t layer) = 0;
  virtual Tensor<T> reduce(Tape<T>& tape, const Tensor<T>& x, std::size_t layer) = 0;
};

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;       // [batch * seq]
  std::vector<std::int32_t> segments;  // [batch * seq]
  std::vector<std::uint8_t> mask;      // 1 for real tokens, 0 for padding

  // Right-pads rows with `pad_id`; segments default to 0.
  static Batch pack(const std::vector<std::vector<std::int32_t>>& rows, std::int32_t pad_id,
                    const std::vector<std::vector<std::int32_t>>& segments = {});
};

struct ForwardOptions {
  bool train = false;  // enables dropout
  Rng* rng = nullptr;  // required when train and dropout > 0
};

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;  // [batch * seq, H]
  Tensor<T> pooled;  // [batch, H]
};

// Throws ShapeError when seq exceeds max_seq_len or the buffers disagree with
// batch * seq, ValueError on out-of-range token or segment ids.
template <typename T>
EncoderOutput<T> forward(const Encoder<T>& enc, Tape<T>& tape, const Batch& batch, const ForwardOptions& opts = {},
                         ParallelHooks<T>* hooks = nullptr);

// MLM logits [rows.size(), V] at the given flat positions of `hidden`.
template <typename T>
Tensor<T> mlm_logits(const Encoder<T>& enc, Tape<T>& tape, const Tensor<T>& hidden,
                     const std::vector<std::int32_t>& rows);

// SOP logits [batch, 2].
template <typename T>
Tensor<T> sop_logits(const Encoder<T>& enc, Tape<T>& tape, const Tensor<T>& pooled);

// y = x W + b on a 2-D input.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Linear<T>& l);

// Same float values in another precision; gradients are not copied.
template <typename To, typename From>
Encoder<To> cast_encoder(const Encoder<From>& enc);

extern template struct Encoder<float>;
extern template struct Encoder<double>;

}  // namespace clinlm::model
