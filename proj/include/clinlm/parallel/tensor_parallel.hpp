// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "clinlm/model/encoder.hpp"
#include "clinlm/parallel/fabric.hpp"
#include "clinlm/tensor/adam.hpp"

namespace clinlm::parallel {

// Column/row partition of every transformer layer across P workers. Worker r
// owns heads [r*A/P, (r+1)*A/P) and the matching hidden columns, plus FFN
// columns [r*I/P, (r+1)*I/P). Embeddings, layer norms and heads are replicated.
struct ShardPlan {
  std::size_t workers = 1;
  std::size_t heads_per_shard = 0;
  std::size_t hidden_per_shard = 0;
  std::size_t ffn_per_shard = 0;

  // ConfigError naming P and the offending dimension when P does not divide
  // the head count or the FFN width.
  static ShardPlan make(const model::ModelConfig& cfg, std::size_t workers);
};

template <typename T>
std::vector<model::Encoder<T>> shard_model(const model::Encoder<T>& full, const ShardPlan& plan);

// Inverse of shard_model; replicated tensors are taken from shard 0.
template <typename T>
model::Encoder<T> unshard(const std::vector<model::Encoder<T>>& shards, const ShardPlan& plan);

// Encoder-shaped copy whose values are the gradients (zero where absent).
template <typename T>
model::Encoder<T> gradient_view(const model::Encoder<T>& enc);

// enter(): identity forward, all_reduce of the gradient backward.
// reduce(): all_reduce forward, identity backward.
// That gives two all_reduces per layer in each direction.
template <typename T>
class TensorParallelHooks final : public model::ParallelHooks<T> {
 public:
  explicit TensorParallelHooks(Fabric& fabric) : fabric_(fabric) {}
  Tensor<T> enter(Tape<T>& tape, const Tensor<T>& x, std::size_t layer) override;
  Tensor<T> reduce(Tape<T>& tape, const Tensor<T>& x, std::size_t layer) override;

 private:
  Fabric& fabric_;
};

// FNV-1a over every parameter's bytes in named order.
template <typename T>
std::uint64_t parameter_hash(const model::Encoder<T>& enc);

// Sums gradients over `dp` in rank order and divides by its size.
template <typename T>
void average_gradients(model::Encoder<T>& enc, Fabric& dp);

// Collects a full model from the P shards of one model group; every member
// gets the same result.
template <typename T>
model::Encoder<T> gather_full_model(const model::Encoder<T>& shard, const ShardPlan& plan, Fabric& model_group);

// Compares parameter hashes across `dp`; FabricError on any mismatch.
template <typename T>
void check_replicas(const model::Encoder<T>& enc, Fabric& dp, std::int64_t step);

// One synchronous data-parallel update. `loss` builds this replica's mean
// loss on its own micro-batch. Gradients are summed over `dp` in rank order
// and divided by the replica count, then Adam runs locally. Afterwards the
// replicas compare parameter hashes and a mismatch raises FabricError.
// Returns the local loss.
template <typename T>
double data_parallel_step(model::Encoder<T>& enc, AdamState<T>& adam, const AdamConfig& cfg, Fabric& dp,
                          const std::function<Tensor<T>(model::Encoder<T>&, Tape<T>&)>& loss);

enum class Transport { threads, processes };

// World layout for P-way model and R-way data parallelism:
// world rank = replica * P + shard.
struct WorkerContext {
  std::size_t world_rank = 0;
  std::size_t shard = 0;
  std::size_t replica = 0;
  Fabric* world = nullptr;
  Fabric* model_group = nullptr;  // the P ranks of one replica
  Fabric* data_group = nullptr;   // the R ranks holding the same shard
};

struct LaunchOptions {
  std::size_t model_parallel = 1;
  std::size_t data_parallel = 1;
  Transport transport = Transport::threads;
  // processes only: rendezvous address; port 0 picks a free one.
  Endpoint hub;
  std::chrono::milliseconds timeout = std::chrono::seconds(120);
};

// Runs `body` on P*R workers and waits for all of them. With threads the
// first worker exception is rethrown; with processes each worker is a
// forked child and a non-zero exit raises FabricError. Process workers share
// nothing with the caller, so results must be written out by the body.
void launch_workers(const LaunchOptions& opts, const std::function<void(WorkerContext&)>& body);

}  // namespace clinlm::parallel
