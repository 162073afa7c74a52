// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/model/checkpoint.hpp"

#include <bit>

#include "clinlm/common/error.hpp"
#include "clinlm/common/io.hpp"

namespace clinlm::model {

const Tensor<float>* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  const auto& c = ckpt.cfg;
  for (std::size_t v : {c.num_layers, c.hidden_size, c.num_heads, c.ffn_size(), c.vocab_size, c.max_seq_len, c.type_vocab})
    put_u32(out, static_cast<std::uint32_t>(v));
  put_u64(out, std::bit_cast<std::uint64_t>(c.dropout));
  std::string meta = ckpt.metadata.dump();
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, d);
    for (float v : t.data()) put_f32(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  try {
    if (r.take(4) != kCheckpointMagic) throw SchemaError("checkpoint: bad magic");
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
      throw SchemaError("checkpoint: unsupported format version " + std::to_string(version));
    Checkpoint ck;
    auto& c = ck.cfg;
    c.num_layers = r.u32();
    c.hidden_size = r.u32();
    c.num_heads = r.u32();
    c.intermediate_size = r.u32();
    c.vocab_size = r.u32();
    c.max_seq_len = r.u32();
    c.type_vocab = r.u32();
    c.dropout = std::bit_cast<double>(r.u64());
    c.validate();
    std::string_view meta = r.take(r.u32());
    try {
      ck.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception&) {
      throw SchemaError("checkpoint: metadata is not valid JSON");
    }
    std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name(r.take(r.u32()));
      std::uint32_t rank = r.u32();
      if (rank > 8) throw SchemaError("checkpoint: tensor " + name + " has rank " + std::to_string(rank));
      Shape shape(rank);
      std::size_t numel = 1;
      for (auto& d : shape) {
        d = r.u64();
        numel *= d;
      }
      if (numel > bytes.size()) throw SchemaError("checkpoint: tensor " + name + " larger than file");
      std::vector<float> values(numel);
      for (auto& v : values) v = r.f32();
      ck.tensors.emplace_back(std::move(name), Tensor<float>(shape, std::move(values)));
    }
    if (!r.done()) throw SchemaError("checkpoint: trailing bytes");
    return ck;
  } catch (const IoError&) {
    throw SchemaError("checkpoint: truncated file");
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

template <typename T>
void add_tensors(Checkpoint& ckpt, const std::vector<std::pair<std::string, Tensor<T>>>& named) {
  for (const auto& [name, t] : named) {
    std::vector<float> values(t.data().begin(), t.data().end());
    ckpt.tensors.emplace_back(name, Tensor<float>(t.shape(), std::move(values)));
  }
}

template <typename T>
Checkpoint make_checkpoint(const Encoder<T>& enc, nlohmann::json metadata) {
  Checkpoint ck;
  ck.cfg = enc.cfg;
  ck.metadata = std::move(metadata);
  add_tensors(ck, enc.named_parameters());
  return ck;
}

template <typename T>
Tensor<T> checkpoint_tensor(const Checkpoint& ckpt, std::string_view name) {
  const Tensor<float>* t = ckpt.find(name);
  if (!t) throw SchemaError("checkpoint: missing tensor " + std::string(name));
  std::vector<T> values(t->data().begin(), t->data().end());
  return Tensor<T>(t->shape(), std::move(values), true);
}

template <typename T>
Encoder<T> encoder_from_checkpoint(const Checkpoint& ckpt) {
  Encoder<T> enc = build_encoder<T>(ckpt.cfg, 0);
  for (auto& [name, t] : enc.named_parameters()) {
    const Tensor<float>* src = ckpt.find(name);
    if (!src) throw SchemaError("checkpoint: missing tensor " + name);
    if (src->shape() != t.shape())
      throw SchemaError("checkpoint: tensor " + name + " has shape " + shape_str(src->shape()) + ", expected " +
                        shape_str(t.shape()));
    auto dst = t.data();
    auto from = src->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(from[i]);
  }
  return enc;
}

template Checkpoint make_checkpoint(const Encoder<float>&, nlohmann::json);
template Checkpoint make_checkpoint(const Encoder<double>&, nlohmann::json);
template Encoder<float> encoder_from_checkpoint(const Checkpoint&);
template Encoder<double> encoder_from_checkpoint(const Checkpoint&);
template void add_tensors(Checkpoint&, const std::vector<std::pair<std::string, Tensor<float>>>&);
template void add_tensors(Checkpoint&, const std::vector<std::pair<std::string, Tensor<double>>>&);
template Tensor<float> checkpoint_tensor(const Checkpoint&, std::string_view);
template Tensor<double> checkpoint_tensor(const Checkpoint&, std::string_view);

}  // namespace clinlm::model
