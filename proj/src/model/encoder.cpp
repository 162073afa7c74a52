// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/model/encoder.hpp"

#include <cmath>
#include <limits>

#include "clinlm/common/error.hpp"
#include "clinlm/tensor/ops.hpp"

namespace clinlm::model {
namespace {

// Calls f(name, tensor) for every parameter of `a` in checkpoint order; `b`
// (same layout, possibly another precision) is walked in lockstep.
template <typename A, typename B, typename F>
void visit2(A& a, B& b, F&& f) {
  f("embeddings.token", a.token_emb, b.token_emb);
  f("embeddings.position", a.position_emb, b.position_emb);
  f("embeddings.segment", a.segment_emb, b.segment_emb);
  f("embeddings.ln.gain", a.emb_ln.gain, b.emb_ln.gain);
  f("embeddings.ln.bias", a.emb_ln.bias, b.emb_ln.bias);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    auto& la = a.layers[i];
    auto& lb = b.layers[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    f(p + "attn.q.weight", la.q.weight, lb.q.weight);
    f(p + "attn.q.bias", la.q.bias, lb.q.bias);
    f(p + "attn.k.weight", la.k.weight, lb.k.weight);
    f(p + "attn.k.bias", la.k.bias, lb.k.bias);
    f(p + "attn.v.weight", la.v.weight, lb.v.weight);
    f(p + "attn.v.bias", la.v.bias, lb.v.bias);
    f(p + "attn.o.weight", la.o.weight, lb.o.weight);
    f(p + "attn.o.bias", la.o.bias, lb.o.bias);
    f(p + "attn.ln.gain", la.attn_ln.gain, lb.attn_ln.gain);
    f(p + "attn.ln.bias", la.attn_ln.bias, lb.attn_ln.bias);
    f(p + "ffn.in.weight", la.ffn_in.weight, lb.ffn_in.weight);
    f(p + "ffn.in.bias", la.ffn_in.bias, lb.ffn_in.bias);
    f(p + "ffn.out.weight", la.ffn_out.weight, lb.ffn_out.weight);
    f(p + "ffn.out.bias", la.ffn_out.bias, lb.ffn_out.bias);
    f(p + "ffn.ln.gain", la.ffn_ln.gain, lb.ffn_ln.gain);
    f(p + "ffn.ln.bias", la.ffn_ln.bias, lb.ffn_ln.bias);
  }
  f("pooler.weight", a.pooler.weight, b.pooler.weight);
  f("pooler.bias", a.pooler.bias, b.pooler.bias);
  f("mlm.transform.weight", a.mlm_transform.weight, b.mlm_transform.weight);
  f("mlm.transform.bias", a.mlm_transform.bias, b.mlm_transform.bias);
  f("mlm.ln.gain", a.mlm_ln.gain, b.mlm_ln.gain);
  f("mlm.ln.bias", a.mlm_ln.bias, b.mlm_ln.bias);
  f("sop.weight", a.sop.weight, b.sop.weight);
  f("sop.bias", a.sop.bias, b.sop.bias);
}

template <typename E, typename F>
void visit(E& e, F&& f) {
  visit2(e, e, [&](const std::string& name, auto& t, auto&) { f(name, t); });
}

bool is_body(const std::string& name) {
  return !name.starts_with("mlm.") && !name.starts_with("sop.");
}

template <typename T>
Tensor<T> gather(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::int32_t>& rows) {
  return ops::embedding_lookup(tape, x, std::span<const std::int32_t>(rows));
}

template <typename T>
Tensor<T> maybe_dropout(Tape<T>& tape, const Tensor<T>& x, const ModelConfig& cfg, const ForwardOptions& opts) {
  if (!opts.train || cfg.dropout == 0.0) return x;
  if (!opts.rng) throw ConfigError("training forward with dropout needs an Rng");
  return ops::dropout(tape, x, cfg.dropout, *opts.rng);
}

template <typename T>
Tensor<T> ln(Tape<T>& tape, const Tensor<T>& x, const LayerNormParams<T>& p) {
  return ops::layer_norm(tape, x, p.gain, p.bias);
}

// [B*S, h*d] -> [B*h, S, d]
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t b, std::size_t s, std::size_t h, std::size_t d) {
  auto t = ops::reshape(tape, x, Shape{b, s, h, d});
  t = ops::permute(tape, t, {0, 2, 1, 3});
  return ops::reshape(tape, t, Shape{b * h, s, d});
}

template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t b, std::size_t s, std::size_t h, std::size_t d) {
  auto t = ops::reshape(tape, x, Shape{b, h, s, d});
  t = ops::permute(tape, t, {0, 2, 1, 3});
  return ops::reshape(tape, t, Shape{b * s, h * d});
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Encoder<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  visit(*this, [&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, t); });
  return out;
}

template <typename T>
std::vector<Tensor<T>> Encoder<T>::parameters() const {
  std::vector<Tensor<T>> out;
  visit(*this, [&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
std::uint64_t Encoder<T>::body_size() const {
  std::uint64_t n = 0;
  visit(*this, [&](const std::string& name, const Tensor<T>& t) {
    if (is_body(name)) n += t.numel();
  });
  return n;
}

template <typename T>
void Encoder<T>::zero_grad() {
  visit(*this, [](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template <typename T>
Encoder<T> Encoder<T>::clone() const {
  return cast_encoder<T>(*this);
}

template <typename To, typename From>
Encoder<To> cast_encoder(const Encoder<From>& src) {
  Encoder<To> dst;
  dst.cfg = src.cfg;
  dst.layers.resize(src.layers.size());
  visit2(dst, src, [](const std::string&, Tensor<To>& d, const Tensor<From>& s) {
    std::vector<To> values(s.data().begin(), s.data().end());
    d = Tensor<To>(s.shape(), std::move(values), s.requires_grad());
  });
  return dst;
}

template <typename T>
Encoder<T> build_encoder(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t h = cfg.hidden_size, f = cfg.ffn_size();
  Encoder<T> e;
  e.cfg = cfg;
  auto mat = [](std::size_t r, std::size_t c) { return Tensor<T>::zeros(Shape{r, c}, true); };
  auto vec = [](std::size_t n) { return Tensor<T>::zeros(Shape{n}, true); };
  auto lin = [&](std::size_t in, std::size_t out) { return Linear<T>{mat(in, out), vec(out)}; };
  auto lnp = [&](std::size_t n) { return LayerNormParams<T>{vec(n), vec(n)}; };
  e.token_emb = mat(cfg.vocab_size, h);
  e.position_emb = mat(cfg.max_seq_len, h);
  e.segment_emb = mat(cfg.type_vocab, h);
  e.emb_ln = lnp(h);
  e.layers.resize(cfg.num_layers);
  for (auto& l : e.layers) {
    l.q = lin(h, h), l.k = lin(h, h), l.v = lin(h, h), l.o = lin(h, h);
    l.attn_ln = lnp(h);
    l.ffn_in = lin(h, f), l.ffn_out = lin(f, h);
    l.ffn_ln = lnp(h);
  }
  e.pooler = lin(h, h);
  e.mlm_transform = lin(h, h);
  e.mlm_ln = lnp(h);
  e.sop = lin(h, 2);

  Rng rng(seed);
  visit(e, [&](const std::string& name, Tensor<T>& t) {
    auto data = t.data();
    if (name.ends_with(".gain")) {
      std::fill(data.begin(), data.end(), T(1));
    } else if (!name.ends_with(".bias")) {
      for (auto& x : data) x = static_cast<T>(rng.truncated_normal(0.02));
    }
  });
  return e;
}

Batch Batch::pack(const std::vector<std::vector<std::int32_t>>& rows, std::int32_t pad_id,
                  const std::vector<std::vector<std::int32_t>>& segments) {
  if (!segments.empty() && segments.size() != rows.size())
    throw ShapeError("Batch::pack: " + std::to_string(rows.size()) + " rows but " + std::to_string(segments.size()) +
                     " segment rows");
  Batch b;
  b.batch = rows.size();
  for (const auto& r : rows) b.seq = std::max(b.seq, r.size());
  b.ids.assign(b.batch * b.seq, pad_id);
  b.segments.assign(b.batch * b.seq, 0);
  b.mask.assign(b.batch * b.seq, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!segments.empty() && segments[i].size() != rows[i].size())
      throw ShapeError("Batch::pack: segment row " + std::to_string(i) + " length differs from ids");
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      b.ids[i * b.seq + j] = rows[i][j];
      if (!segments.empty()) b.segments[i * b.seq + j] = segments[i][j];
      b.mask[i * b.seq + j] = 1;
    }
  }
  return b;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Linear<T>& l) {
  return ops::add(tape, ops::matmul(tape, x, l.weight), l.bias);
}

template <typename T>
EncoderOutput<T> forward(const Encoder<T>& enc, Tape<T>& tape, const Batch& batch, const ForwardOptions& opts,
                         ParallelHooks<T>* hooks) {
  const ModelConfig& c = enc.cfg;
  const std::size_t b = batch.batch, s = batch.seq, n = b * s, d = c.head_dim();
  if (s > c.max_seq_len)
    throw ShapeError("sequence length " + std::to_string(s) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  if (b == 0 || s == 0) throw ShapeError("empty batch");
  if (batch.ids.size() != n || batch.segments.size() != n || batch.mask.size() != n)
    throw ShapeError("batch buffers do not match batch * seq = " + std::to_string(n));
  for (auto seg : batch.segments)
    if (seg < 0 || static_cast<std::size_t>(seg) >= c.type_vocab)
      throw ValueError("segment id " + std::to_string(seg) + " out of range [0, " + std::to_string(c.type_vocab) + ")");

  std::vector<std::int32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(i % s);
  Tensor<T> x = ops::embedding_lookup(tape, enc.token_emb, std::span<const std::int32_t>(batch.ids));
  x = ops::add(tape, x, ops::embedding_lookup(tape, enc.position_emb, std::span<const std::int32_t>(positions)));
  x = ops::add(tape, x, ops::embedding_lookup(tape, enc.segment_emb, std::span<const std::int32_t>(batch.segments)));
  x = ln(tape, x, enc.emb_ln);
  x = maybe_dropout(tape, x, c, opts);

  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  std::vector<std::uint8_t> keep;
  std::size_t keep_heads = 0;

  for (std::size_t li = 0; li < enc.layers.size(); ++li) {
    const auto& L = enc.layers[li];
    const std::size_t heads = L.q.weight.dim(1) / d;
    if (heads != keep_heads) {
      keep.resize(b * heads * s * s);
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t hi = 0; hi < heads; ++hi)
          for (std::size_t qi = 0; qi < s; ++qi)
            for (std::size_t ki = 0; ki < s; ++ki)
              keep[((bi * heads + hi) * s + qi) * s + ki] = batch.mask[bi * s + ki];
      keep_heads = heads;
    }

    Tensor<T> xin = hooks ? hooks->enter(tape, x, li) : x;
    auto q = split_heads(tape, linear(tape, xin, L.q), b, s, heads, d);
    auto k = split_heads(tape, linear(tape, xin, L.k), b, s, heads, d);
    auto v = split_heads(tape, linear(tape, xin, L.v), b, s, heads, d);
    auto scores = ops::scale(tape, ops::bmm(tape, q, ops::transpose(tape, k)), inv_sqrt_d);
    scores = ops::masked_fill(tape, scores, std::span<const std::uint8_t>(keep), neg_inf);
    auto probs = maybe_dropout(tape, ops::softmax(tape, scores), c, opts);
    auto ctx = merge_heads(tape, ops::bmm(tape, probs, v), b, s, heads, d);
    auto attn = ops::matmul(tape, ctx, L.o.weight);
    if (hooks) attn = hooks->reduce(tape, attn, li);
    attn = maybe_dropout(tape, ops::add(tape, attn, L.o.bias), c, opts);
    x = ln(tape, ops::add(tape, x, attn), L.attn_ln);

    Tensor<T> fin = hooks ? hooks->enter(tape, x, li) : x;
    auto hmid = ops::gelu(tape, linear(tape, fin, L.ffn_in));
    auto ffn = ops::matmul(tape, hmid, L.ffn_out.weight);
    if (hooks) ffn = hooks->reduce(tape, ffn, li);
    ffn = maybe_dropout(tape, ops::add(tape, ffn, L.ffn_out.bias), c, opts);
    x = ln(tape, ops::add(tape, x, ffn), L.ffn_ln);
  }

  std::vector<std::int32_t> cls_rows(b);
  for (std::size_t i = 0; i < b; ++i) cls_rows[i] = static_cast<std::int32_t>(i * s);
  auto pooled = ops::tanh(tape, linear(tape, gather(tape, x, cls_rows), enc.pooler));
  return {x, pooled};
}

template <typename T>
Tensor<T> mlm_logits(const Encoder<T>& enc, Tape<T>& tape, const Tensor<T>& hidden,
                     const std::vector<std::int32_t>& rows) {
  auto h = gather(tape, hidden, rows);
  h = ln(tape, ops::gelu(tape, linear(tape, h, enc.mlm_transform)), enc.mlm_ln);
  return ops::matmul(tape, h, ops::transpose(tape, enc.token_emb));
}

template <typename T>
Tensor<T> sop_logits(const Encoder<T>& enc, Tape<T>& tape, const Tensor<T>& pooled) {
  return linear(tape, pooled, enc.sop);
}

#define CLINLM_INSTANTIATE_ENCODER(T)                                                                            \
  template struct Encoder<T>;                                                                                   \
  template Encoder<T> build_encoder<T>(const ModelConfig&, std::uint64_t);                                      \
  template EncoderOutput<T> forward(const Encoder<T>&, Tape<T>&, const Batch&, const ForwardOptions&,           \
                                    ParallelHooks<T>*);                                                         \
  template Tensor<T> mlm_logits(const Encoder<T>&, Tape<T>&, const Tensor<T>&, const std::vector<std::int32_t>&); \
  template Tensor<T> sop_logits(const Encoder<T>&, Tape<T>&, const Tensor<T>&);                                 \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Linear<T>&);

CLINLM_INSTANTIATE_ENCODER(float)
CLINLM_INSTANTIATE_ENCODER(double)
#undef CLINLM_INSTANTIATE_ENCODER

template Encoder<float> cast_encoder<float, double>(const Encoder<double>&);
template Encoder<double> cast_encoder<double, float>(const Encoder<float>&);
template Encoder<float> cast_encoder<float, float>(const Encoder<float>&);
template Encoder<double> cast_encoder<double, double>(const Encoder<double>&);

}  // namespace clinlm::model
