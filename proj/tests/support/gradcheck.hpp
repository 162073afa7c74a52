// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference oracle. Independent of the tape: it only
// evaluates the scalar function with recording disabled.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "clinlm/common/rng.hpp"
#include "clinlm/tensor/tensor.hpp"

namespace clinlm::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error of one element, measured against the larger of the two
// values or a floor tied to the tensor's gradient scale. Elements that are
// orders of magnitude below the tensor's scale do not dominate the ratio.
inline double relative_error(double analytic, double numeric, double scale) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3 * scale, 1e-10});
  return std::abs(analytic - numeric) / denom;
}

// `loss(tape)` must build the scalar from `params` (leaves with
// requires_grad). Returns the worst relative error over all elements.
inline GradCheckResult check_gradients(std::vector<Tensor<double>> params,
                                       const std::function<Tensor<double>(Tape<double>&)>& loss,
                                       double h = 1e-5) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.ensure_grad();
    p.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> l = loss(tape);
    tape.backward(l);
  }
  GradCheckResult result;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<double> numeric(p.numel());
    auto data = p.data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = data[i];
      Tape<double> off(false);
      data[i] = orig + h;
      const double fp = loss(off).item();
      data[i] = orig - h;
      const double fm = loss(off).item();
      data[i] = orig;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < p.numel(); ++i) {
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric[i], scale));
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor<double>(std::move(shape), std::move(v), true);
}

}  // namespace clinlm::testing
