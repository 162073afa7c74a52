// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "clinlm/common/rng.hpp"
#include "clinlm/tensor/tensor.hpp"

// Differentiable operations. Each op computes its forward result eagerly and,
// when the tape is enabled and some input requires a gradient, records the
// matching backward step. Shape violations raise ShapeError naming both shapes.
namespace clinlm::ops {

template <typename T> Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// Batched matmul: [N,m,k] x [N,k,n] -> [N,m,n].
template <typename T> Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// Swaps the last two axes.
template <typename T> Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes);

template <typename T> Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape);

// Elementwise; `b` may also match a trailing suffix of a's shape (bias broadcast).
template <typename T> Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis);

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end);

// Gathers rows of a [V,H] table; rows may repeat. Also serves as row gather
// for hidden states.
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids);

// Exact erf form, 0.5 x (1 + erf(x / sqrt 2)).
template <typename T> Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x);

// Normalizes over the last axis, then applies gain and bias of shape [last].
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-12));

// Softmax over the last axis with max subtraction. Rows that are entirely
// -inf produce zeros.
template <typename T> Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x);

// Replaces entries whose keep flag is 0 by `value` (usually -inf); those
// entries receive no gradient.
template <typename T>
Tensor<T> masked_fill(Tape<T>& tape, const Tensor<T>& x, std::span<const std::uint8_t> keep, T value);

// Inverted dropout. p = 0 returns the input handle unchanged.
template <typename T> Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Rng& rng);

template <typename T> Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);
template <typename T> Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);

// L = -sum_i t_i log(P_i) summed over rows of a [.., N] probability tensor.
// Targets must be one-hot per row. log is clamped at kLogEpsilon.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& targets);

inline constexpr double kLogEpsilon = 1e-12;

// Fused softmax + cross-entropy over rows of [n,N] logits:
//   L = sum_i w_i * (-log softmax(logits_i)[target_i]).
// Rows with target < 0 are ignored. The logit gradient is w_i (P_i - t_i).
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                std::span<const std::int32_t> targets, std::span<const T> weights);

// Mean squared error over all elements.
template <typename T> Tensor<T> mse(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target);

}  // namespace clinlm::ops
