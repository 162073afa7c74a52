// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <iomanip>
#include <filesystem>

#include "clinlm/common/error.hpp"
#include "clinlm/model/checkpoint.hpp"
#include "clinlm/model/encoder.hpp"
#include "clinlm/tensor/ops.hpp"
#include "support/encoder_fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace clinlm;
using namespace clinlm::model;

namespace {

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

ModelConfig small_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 16;
  return c;
}

}  // namespace

TEST_CASE("presets match the published layer, width and head counts") {
  auto base = preset("base"), medium = preset("medium"), large = preset("large");
  CHECK(base.num_layers == 24);
  CHECK(base.hidden_size == 1024);
  CHECK(base.num_heads == 16);
  CHECK(medium.num_layers == 48);
  CHECK(medium.hidden_size == 2560);
  CHECK(medium.num_heads == 40);
  CHECK(large.num_layers == 56);
  CHECK(large.hidden_size == 3584);
  CHECK(large.num_heads == 56);
  auto desk = preset("desk");
  CHECK(desk.num_layers == 4);
  CHECK(desk.hidden_size == 128);
  CHECK(desk.num_heads == 4);
  CHECK(desk.max_seq_len == 128);
  CHECK_THROWS_AS(preset("huge"), ConfigError);
}

TEST_CASE("parameter counts land within 10 percent of the published sizes") {
  const std::pair<const char*, double> targets[] = {{"base", 345e6}, {"medium", 3.9e9}, {"large", 8.9e9}};
  for (auto [name, target] : targets) {
    double n = static_cast<double>(count_params(preset(name, 50000)));
    INFO(name << " " << n);
    CHECK(std::abs(n - target) / target <= 0.10);
  }
}

TEST_CASE("closed-form count equals the enumerated model size") {
  auto c = small_config();
  auto enc = build_encoder<float>(c, 1);
  CHECK(count_params(c) == enc.body_size());
  std::uint64_t total = 0;
  for (const auto& t : enc.parameters()) total += t.numel();
  CHECK(count_params(c, true) == total);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    ModelConfig r;
    r.num_heads = 1 + rng.uniform_int(3);
    r.hidden_size = r.num_heads * (1 + rng.uniform_int(4));
    r.num_layers = 1 + rng.uniform_int(3);
    r.intermediate_size = rng.bernoulli(0.5) ? 0 : 1 + rng.uniform_int(20);
    r.vocab_size = 1 + rng.uniform_int(30);
    r.max_seq_len = 2 + rng.uniform_int(10);
    CHECK(count_params(r) == build_encoder<float>(r, 0).body_size());
  }
}

TEST_CASE("doubling the vocabulary adds exactly dV * H") {
  auto c = small_config();
  auto d = c;
  d.vocab_size *= 2;
  CHECK(count_params(d) - count_params(c) == c.vocab_size * c.hidden_size);
  CHECK(count_params(d, true) - count_params(c, true) == c.vocab_size * c.hidden_size);
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(build_encoder<float>(c, 0), ConfigError);
  c = small_config();
  c.max_seq_len = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  auto j = to_json(c);
  CHECK(config_from_json(j) == c);
}

TEST_CASE("initialization is deterministic and follows the scheme") {
  auto c = small_config();
  auto a = build_encoder<float>(c, 7), b = build_encoder<float>(c, 7), other = build_encoder<float>(c, 8);
  auto na = a.named_parameters(), nb = b.named_parameters(), no = other.named_parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(values(na[i].second) == values(nb[i].second));
    any_diff = any_diff || values(na[i].second) != values(no[i].second);
    const auto& name = na[i].first;
    for (float v : na[i].second.data()) {
      if (name.ends_with(".gain")) CHECK(v == 1.0f);
      else if (name.ends_with(".bias")) CHECK(v == 0.0f);
      else CHECK(std::abs(v) <= 0.04f + 1e-7f);
    }
  }
  CHECK(any_diff);
  CHECK(na.front().first == "embeddings.token");
  CHECK(na[5].first == "layer.0.attn.q.weight");
}

TEST_CASE("forward shapes and input errors") {
  auto c = small_config();
  auto enc = build_encoder<float>(c, 1);
  Tape<float> tape(false);
  auto batch = Batch::pack({{1, 2, 3}, {4, 5}}, 0);
  auto out = forward(enc, tape, batch);
  CHECK(out.hidden.shape() == Shape{6, 8});
  CHECK(out.pooled.shape() == Shape{2, 8});
  auto too_long = Batch::pack({std::vector<std::int32_t>(17, 1)}, 0);
  CHECK_THROWS_AS(forward(enc, tape, too_long), ShapeError);
  auto bad_id = Batch::pack({{1, 16}}, 0);
  CHECK_THROWS_AS(forward(enc, tape, bad_id), ValueError);
  auto bad_seg = Batch::pack({{1, 2}}, 0, {{0, 2}});
  CHECK_THROWS_AS(forward(enc, tape, bad_seg), ValueError);
}

TEST_CASE("masked key positions do not influence other outputs") {
  auto c = small_config();
  auto enc = build_encoder<double>(c, 2);
  Tape<double> tape(false);
  auto a = Batch::pack({{1, 2, 3, 4}}, 0);
  a.mask[3] = 0;
  auto b = a;
  b.ids[3] = 9;
  auto oa = forward(enc, tape, a), ob = forward(enc, tape, b);
  for (std::size_t i = 0; i < 3 * c.hidden_size; ++i) CHECK(oa.hidden.data()[i] == ob.hidden.data()[i]);
  CHECK(values(oa.pooled) == values(ob.pooled));
}

TEST_CASE("batch rows are independent and permutation equivariant") {
  auto c = small_config();
  auto enc = build_encoder<float>(c, 3);
  Tape<float> tape(false);
  std::vector<std::vector<std::int32_t>> rows = {{2, 5, 7, 1}, {3, 3, 9}, {4, 8, 1, 1, 6}};
  auto all = forward(enc, tape, Batch::pack(rows, 0));
  auto one = forward(enc, tape, Batch::pack({rows[1]}, 0));
  const std::size_t s = 5, h = c.hidden_size;
  for (std::size_t j = 0; j < rows[1].size(); ++j)
    for (std::size_t k = 0; k < h; ++k)
      CHECK(std::abs(all.hidden.data()[(1 * s + j) * h + k] - one.hidden.data()[j * h + k]) <= 1e-6f);
  std::vector<std::vector<std::int32_t>> perm = {rows[2], rows[0], rows[1]};
  auto p = forward(enc, tape, Batch::pack(perm, 0));
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < s * h; ++k)
      CHECK(p.hidden.data()[r * s * h + k] == all.hidden.data()[order[r] * s * h + k]);
}

TEST_CASE("eval forward is deterministic; training dropout needs an rng") {
  auto c = small_config();
  c.dropout = 0.1;
  auto enc = build_encoder<float>(c, 4);
  Tape<float> tape(false);
  auto batch = Batch::pack({{1, 2, 3}}, 0);
  CHECK(values(forward(enc, tape, batch).hidden) == values(forward(enc, tape, batch).hidden));
  ForwardOptions train{true, nullptr};
  CHECK_THROWS_AS(forward(enc, tape, batch, train), ConfigError);
  Rng r1(5), r2(5);
  auto t1 = forward(enc, tape, batch, {true, &r1}), t2 = forward(enc, tape, batch, {true, &r2});
  CHECK(values(t1.hidden) == values(t2.hidden));
  CHECK(values(t1.hidden) != values(forward(enc, tape, batch).hidden));
}

TEST_CASE("checkpoint round trip reproduces outputs bit-exactly") {
  auto c = small_config();
  auto enc = build_encoder<float>(c, 5);
  auto dir = std::filesystem::temp_directory_path() / "clinlm_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", make_checkpoint(enc, {{"note", "x"}}));
  auto ck = load_checkpoint(dir / "m.ckpt");
  CHECK(ck.cfg == c);
  CHECK(ck.metadata["note"] == "x");
  auto back = encoder_from_checkpoint<float>(ck);
  Tape<float> tape(false);
  auto batch = Batch::pack({{1, 2, 3, 4}, {5, 6}}, 0);
  CHECK(values(forward(enc, tape, batch).hidden) == values(forward(back, tape, batch).hidden));
  CHECK(serialize_checkpoint(make_checkpoint(back, {{"note", "x"}})) == serialize_checkpoint(ck));

  auto bytes = serialize_checkpoint(ck);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(parse_checkpoint(bad_version), SchemaError);
  CHECK_THROWS_AS(parse_checkpoint("NOPE" + bytes.substr(4)), SchemaError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), SchemaError);
  Checkpoint missing = ck;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(encoder_from_checkpoint<float>(missing), SchemaError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("golden hidden-state checksum") {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.vocab_size = 32;
  c.max_seq_len = 8;
  c.dropout = 0.0;
  auto enc = build_encoder<double>(c, 2026);
  Tape<double> tape(false);
  auto out = forward(enc, tape, Batch::pack({{2, 7, 11, 3, 30}, {2, 5, 3}}, 0));
  double checksum = 0.0;
  auto h = out.hidden.data();
  for (std::size_t i = 0; i < h.size(); ++i) checksum += h[i] * static_cast<double>((i % 7) + 1);
  // Recorded from the reference build; guards against silent numeric drift.
  constexpr double kGolden = 28.555106956049531;
  CHECK(checksum == doctest::Approx(kGolden).epsilon(1e-9));
}

TEST_CASE("full tiny encoder gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto cfg = testing::check_config();
    auto enc = build_encoder<double>(cfg, seed);
    // Larger weights than the 0.02 init so every path carries signal.
    Rng rng(seed + 100);
    for (auto& p : enc.parameters())
      for (auto& v : p.data()) v += 0.3 * rng.normal();
    testing::EncoderProbe<double> probe(rng, cfg, 2, 6);
    // The key bias adds the same q.b term to every score in a softmax row, so
    // its true gradient is zero; both sides are rounding noise there.
    std::vector<Tensor<double>> checked, key_bias;
    for (auto& [name, t] : enc.named_parameters())
      (name.ends_with("attn.k.bias") ? key_bias : checked).push_back(t);
    auto res = testing::check_gradients(checked, [&](Tape<double>& tape) { return probe.loss(enc, tape); });
    for (const auto& t : key_bias)
      for (double g : t.grad()) CHECK(std::abs(g) < 1e-9);
    INFO("seed " << seed << " checked " << res.checked);
    CHECK(res.max_rel_error < 1e-4);
  }
}
