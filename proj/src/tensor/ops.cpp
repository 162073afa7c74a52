// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "clinlm/common/error.hpp"

namespace clinlm::ops {

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// C[m,n] += A[m,k] B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data());
  if (tape.needs_grad({&a, &b})) {
    tape.record(out, [a, b, out, m, n, k]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(m, k, n, g, b.data().data(), a.ensure_grad().data());
      if (b.requires_grad()) gemm_tn(k, n, m, a.data().data(), g, b.ensure_grad().data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_mismatch("bmm", a.shape(), b.shape());
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(m, n, k, a.data().data() + s * m * k, b.data().data() + s * k * n,
            out.data().data() + s * m * n);
  }
  if (tape.needs_grad({&a, &b})) {
    tape.record(out, [a, b, out, batch, m, n, k]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.ensure_grad().data();
        for (std::size_t s = 0; s < batch; ++s)
          gemm_nt(m, k, n, g + s * m * n, b.data().data() + s * k * n, ga + s * m * k);
      }
      if (b.requires_grad()) {
        T* gb = b.ensure_grad().data();
        for (std::size_t s = 0; s < batch; ++s)
          gemm_tn(k, n, m, a.data().data() + s * m * k, g + s * m * n, gb + s * k * n);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(tape, x, axes);
}

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw ShapeError("permute: axis list does not match rank of " + shape_str(x.shape()));
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis list for " + shape_str(x.shape()));
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  // in_strides[axes[i]] is the input stride walked by output axis i.
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> walk(r);
  for (std::size_t i = 0; i < r; ++i) walk[i] = in_strides[axes[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t offset = 0;
    for (std::size_t o = 0; o < n; ++o) {
      src[o] = offset;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        offset += walk[d];
        if (idx[d] < out_shape[d]) break;
        offset -= walk[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  Tensor<T> out(out_shape);
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t o = 0; o < n; ++o) od[o] = xd[src[o]];
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out, src = std::move(src)]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t o = 0; o < g.size(); ++o) gx[src[o]] += g[o];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape())) shape_mismatch("add", a.shape(), b.shape());
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i % nb];
  if (tape.needs_grad({&a, &b})) {
    tape.record(out, [a, b, out, n, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape())) shape_mismatch("mul", a.shape(), b.shape());
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i % nb];
  if (tape.needs_grad({&a, &b})) {
    tape.record(out, [a, b, out, n, nb]() mutable {
      auto g = out.grad();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bd[i % nb];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * ad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] * factor;
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_mismatch("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) shape_mismatch("concat", first, p.shape());
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Tensor<T> out(out_shape);
  auto od = out.data();
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.begin() + o * w, w, od.begin() + o * out_row + col);
    col += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || tape.needs_grad({&p});
  if (any) {
    tape.record(out, [parts, out, outer, inner, out_row, axis]() mutable {
      auto g = out.grad();
      std::size_t col = 0;
      for (auto& p : parts) {
        const std::size_t w = p.dim(axis) * inner;
        if (p.requires_grad()) {
          auto gp = p.ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < w; ++j) gp[o * w + j] += g[o * out_row + col + j];
        }
        col += w;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t in_row = x.dim(axis) * inner, w = (end - begin) * inner, off = begin * inner;
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xd.begin() + o * in_row + off, w, od.begin() + o * w);
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out, outer, in_row, w, off]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < w; ++j) gx[o * in_row + off + j] += g[o * w + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be 2D, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), h = table.dim(1);
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw ValueError("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
  }
  Tensor<T> out(Shape{ids.size(), h});
  auto td = table.data();
  auto od = out.data();
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(td.begin() + static_cast<std::size_t>(ids[r]) * h, h, od.begin() + r * h);
  if (tape.needs_grad({&table})) {
    tape.record(out, [table, out, idv = std::vector<std::int32_t>(ids.begin(), ids.end()), h]() mutable {
      auto g = out.grad();
      auto gt = table.ensure_grad();
      for (std::size_t r = 0; r < idv.size(); ++r) {
        T* dst = gt.data() + static_cast<std::size_t>(idv[r]) * h;
        for (std::size_t j = 0; j < h; ++j) dst[j] += g[r * h + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double v = xd[i];
    od[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out]() mutable {
      constexpr double kInvSqrt2 = 0.70710678118654752440;
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      auto g = out.grad();
      auto xd = x.data();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xd[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += static_cast<T>(g[i] * (cdf + v * pdf));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = std::tanh(xd[i]);
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T{1} - y[i] * y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t h = last_dim(x.shape());
  if (gain.numel() != h || bias.numel() != h) shape_mismatch("layer_norm", x.shape(), gain.shape());
  const std::size_t rows = x.numel() / h;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xd = x.data();
  auto od = out.data();
  auto gd = gain.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * h;
    T mu{0};
    for (std::size_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<T>(h);
    T var{0};
    for (std::size_t j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(h);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < h; ++j) {
      const T xh = (row[j] - mu) * is;
      xhat[r * h + j] = xh;
      od[r * h + j] = xh * gd[j] + bd[j];
    }
  }
  if (tape.needs_grad({&x, &gain, &bias})) {
    tape.record(out, [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, h]() mutable {
      auto g = out.grad();
      auto gd = gain.data();
      if (gain.requires_grad()) {
        auto gg = gain.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) gg[j] += g[r * h + j] * xhat[r * h + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) gb[j] += g[r * h + j];
      }
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d{0}, mean_dx{0};
          for (std::size_t j = 0; j < h; ++j) {
            const T d = g[r * h + j] * gd[j];
            mean_d += d;
            mean_dx += d * xhat[r * h + j];
          }
          mean_d /= static_cast<T>(h);
          mean_dx /= static_cast<T>(h);
          for (std::size_t j = 0; j < h; ++j) {
            const T d = g[r * h + j] * gd[j];
            gx[r * h + j] += inv_std[r] * (d - mean_d - xhat[r * h + j] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t n = last_dim(x.shape());
  if (n == 0 || x.rank() == 0) throw ShapeError("softmax: empty class axis in " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * n;
    T* orow = od.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    if (mx == -std::numeric_limits<T>::infinity()) {
      std::fill(orow, orow + n, T{0});
      continue;
    }
    T z{0};
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= z;
  }
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out, rows, n]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_fill(Tape<T>& tape, const Tensor<T>& x, std::span<const std::uint8_t> keep, T value) {
  if (keep.size() != x.numel()) {
    throw ShapeError("masked_fill: mask of " + std::to_string(keep.size()) + " entries for tensor " +
                     shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = keep[i] ? xd[i] : value;
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out, kv = std::vector<std::uint8_t>(keep.begin(), keep.end())]() mutable {
      auto g = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (kv[i]) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(p));
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
  Tensor<T> m(x.shape(), std::move(mask));
  return mul(tape, x, m);
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape.needs_grad({&x})) {
    tape.record(out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& gx : x.ensure_grad()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(tape, sum(tape, x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& targets) {
  if (probs.shape() != targets.shape() || probs.numel() == 0) {
    shape_mismatch("cross_entropy", probs.shape(), targets.shape());
  }
  const std::size_t n = last_dim(probs.shape());
  const std::size_t rows = probs.numel() / n;
  auto pd = probs.data();
  auto td = targets.data();
  for (std::size_t r = 0; r < rows; ++r) {
    int ones = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T t = td[r * n + j];
      if (t == T{1}) {
        ++ones;
      } else if (t != T{0}) {
        throw ValueError("cross_entropy: target row " + std::to_string(r) + " is not one-hot");
      }
    }
    if (ones != 1) throw ValueError("cross_entropy: target row " + std::to_string(r) + " is not one-hot");
  }
  const T eps = static_cast<T>(kLogEpsilon);
  T loss{0};
  for (std::size_t i = 0; i < pd.size(); ++i)
    if (td[i] != T{0}) loss -= td[i] * std::log(std::max(pd[i], eps));
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (tape.needs_grad({&probs})) {
    tape.record(out, [probs, targets, out, eps]() mutable {
      const T g = out.grad()[0];
      auto pd = probs.data();
      auto td = targets.data();
      auto gp = probs.ensure_grad();
      for (std::size_t i = 0; i < pd.size(); ++i)
        if (td[i] != T{0} && pd[i] > eps) gp[i] -= g * td[i] / pd[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                std::span<const T> weights) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be 2D, got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), n = logits.dim(1);
  if (n == 0) throw ShapeError("softmax_cross_entropy: zero classes");
  if (targets.size() != rows || weights.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(weights.size()) + " weights for logits " + shape_str(logits.shape()));
  }
  auto ld = logits.data();
  std::vector<T> probs(ld.size(), T{0});
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= n) {
      throw ValueError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " >= " + std::to_string(n));
    }
    const T* row = ld.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) {
      probs[r * n + j] = std::exp(row[j] - mx);
      z += probs[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= z;
    loss += weights[r] * (mx + std::log(z) - row[targets[r]]);
  }
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (tape.needs_grad({&logits})) {
    tape.record(out, [logits, out, probs = std::move(probs), tv = std::vector<std::int32_t>(targets.begin(), targets.end()),
                      wv = std::vector<T>(weights.begin(), weights.end()), n]() mutable {
      const T g = out.grad()[0];
      auto gl = logits.ensure_grad();
      for (std::size_t r = 0; r < tv.size(); ++r) {
        if (tv[r] < 0) continue;
        const T w = g * wv[r];
        for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += w * probs[r * n + j];
        gl[r * n + static_cast<std::size_t>(tv[r])] -= w;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) shape_mismatch("mse", pred.shape(), target.shape());
  if (pred.numel() == 0) throw ShapeError("mse: empty tensors");
  auto pd = pred.data(), td = target.data();
  T acc{0};
  for (std::size_t i = 0; i < pd.size(); ++i) acc += (pd[i] - td[i]) * (pd[i] - td[i]);
  const T inv_n = T{1} / static_cast<T>(pd.size());
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  if (tape.needs_grad({&pred, &target})) {
    tape.record(out, [pred, target, out, inv_n]() mutable {
      const T g = out.grad()[0];
      auto pd = pred.data(), td = target.data();
      std::span<T> gp, gt;
      if (pred.requires_grad()) gp = pred.ensure_grad();
      if (target.requires_grad()) gt = target.ensure_grad();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        const T d = T{2} * (pd[i] - td[i]) * inv_n * g;
        if (!gp.empty()) gp[i] += d;
        if (!gt.empty()) gt[i] -= d;
      }
    });
  }
  return out;
}

#define CLINLM_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> bmm(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> permute(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                        \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                              \
  template Tensor<T> concat(Tape<T>&, const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> slice(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);          \
  template Tensor<T> embedding_lookup(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>);       \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> tanh(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                               \
  template Tensor<T> masked_fill(Tape<T>&, const Tensor<T>&, std::span<const std::uint8_t>, T);         \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, Rng&);                                 \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> softmax_cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>,   \
                                           std::span<const T>);                                         \
  template Tensor<T> mse(Tape<T>&, const Tensor<T>&, const Tensor<T>&);

CLINLM_INSTANTIATE_OPS(float)
CLINLM_INSTANTIATE_OPS(double)

#undef CLINLM_INSTANTIATE_OPS

}  // namespace clinlm::ops
