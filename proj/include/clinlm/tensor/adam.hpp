// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "clinlm/tensor/tensor.hpp"

namespace clinlm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Linear warmup from 0 to lr over this many steps, then constant.
  std::int64_t warmup_steps = 100;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;
};

// Learning rate applied on update number `step` (1-based).
double scheduled_lr(const AdamConfig& cfg, std::int64_t step);

// One bias-corrected Adam update over `params` using their gradient buffers.
// Parameters without a gradient buffer are treated as having zero gradient.
// Throws NumericError naming the parameter index on a non-finite gradient,
// before any parameter is modified.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamConfig& cfg);

extern template void adam_step(std::vector<Tensor<float>>&, AdamState<float>&, const AdamConfig&);
extern template void adam_step(std::vector<Tensor<double>>&, AdamState<double>&, const AdamConfig&);

}  // namespace clinlm
