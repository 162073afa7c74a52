// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/parallel/tensor_parallel.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <exception>
#include <thread>

#include "clinlm/common/error.hpp"
#include "clinlm/common/hash.hpp"

namespace clinlm::parallel {

using model::Encoder;
using model::Linear;

ShardPlan ShardPlan::make(const model::ModelConfig& cfg, std::size_t workers) {
  if (workers == 0) throw ConfigError("model parallel size must be positive");
  if (cfg.num_heads % workers != 0)
    throw ConfigError("model parallel size P=" + std::to_string(workers) + " does not divide num_heads A=" +
                      std::to_string(cfg.num_heads));
  if (cfg.ffn_size() % workers != 0)
    throw ConfigError("model parallel size P=" + std::to_string(workers) + " does not divide intermediate_size " +
                      std::to_string(cfg.ffn_size()));
  ShardPlan p;
  p.workers = workers;
  p.heads_per_shard = cfg.num_heads / workers;
  p.hidden_per_shard = p.heads_per_shard * cfg.head_dim();
  p.ffn_per_shard = cfg.ffn_size() / workers;
  return p;
}

namespace {

template <typename T>
Tensor<T> columns(const Tensor<T>& w, std::size_t c0, std::size_t c1) {
  const std::size_t rows = w.dim(0), cols = w.dim(1), n = c1 - c0;
  std::vector<T> out(rows * n);
  auto d = w.data();
  for (std::size_t i = 0; i < rows; ++i)
    std::copy(d.begin() + i * cols + c0, d.begin() + i * cols + c1, out.begin() + i * n);
  return Tensor<T>(Shape{rows, n}, std::move(out), w.requires_grad());
}

// Rows of a 2-D weight or elements of a 1-D bias.
template <typename T>
Tensor<T> leading(const Tensor<T>& w, std::size_t r0, std::size_t r1) {
  const std::size_t inner = w.rank() == 1 ? 1 : w.dim(1);
  Shape shape = w.shape();
  shape[0] = r1 - r0;
  auto d = w.data();
  std::vector<T> out(d.begin() + r0 * inner, d.begin() + r1 * inner);
  return Tensor<T>(std::move(shape), std::move(out), w.requires_grad());
}

template <typename T>
Tensor<T> join_columns(const std::vector<Tensor<T>>& parts) {
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) cols += p.dim(1);
  std::vector<T> out(rows * cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.dim(1);
    auto d = p.data();
    for (std::size_t i = 0; i < rows; ++i) std::copy(d.begin() + i * n, d.begin() + (i + 1) * n, out.begin() + i * cols + c0);
    c0 += n;
  }
  return Tensor<T>(Shape{rows, cols}, std::move(out), parts[0].requires_grad());
}

template <typename T>
Tensor<T> join_leading(const std::vector<Tensor<T>>& parts) {
  Shape shape = parts[0].shape();
  shape[0] = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    shape[0] += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>(std::move(shape), std::move(out), parts[0].requires_grad());
}

template <typename T>
Linear<T> column_split(const Linear<T>& l, std::size_t c0, std::size_t c1) {
  return {columns(l.weight, c0, c1), leading(l.bias, c0, c1)};
}

template <typename T>
Linear<T> row_split(const Linear<T>& l, std::size_t r0, std::size_t r1) {
  return {leading(l.weight, r0, r1), l.bias.clone()};
}

template <typename T>
void check_shards(const std::vector<Encoder<T>>& shards, const ShardPlan& plan) {
  if (shards.size() != plan.workers)
    throw ConfigError("expected " + std::to_string(plan.workers) + " shards, got " + std::to_string(shards.size()));
}

}  // namespace

template <typename T>
std::vector<Encoder<T>> shard_model(const Encoder<T>& full, const ShardPlan& plan) {
  const auto check = ShardPlan::make(full.cfg, plan.workers);
  if (check.hidden_per_shard != plan.hidden_per_shard || check.ffn_per_shard != plan.ffn_per_shard)
    throw ConfigError("shard plan does not match the model config");
  std::vector<Encoder<T>> shards;
  for (std::size_t r = 0; r < plan.workers; ++r) {
    Encoder<T> s = full.clone();
    const std::size_t h0 = r * plan.hidden_per_shard, h1 = h0 + plan.hidden_per_shard;
    const std::size_t f0 = r * plan.ffn_per_shard, f1 = f0 + plan.ffn_per_shard;
    for (std::size_t i = 0; i < full.layers.size(); ++i) {
      const auto& src = full.layers[i];
      auto& dst = s.layers[i];
      dst.q = column_split(src.q, h0, h1);
      dst.k = column_split(src.k, h0, h1);
      dst.v = column_split(src.v, h0, h1);
      dst.o = row_split(src.o, h0, h1);
      dst.ffn_in = column_split(src.ffn_in, f0, f1);
      dst.ffn_out = row_split(src.ffn_out, f0, f1);
    }
    shards.push_back(std::move(s));
  }
  return shards;
}

template <typename T>
Encoder<T> unshard(const std::vector<Encoder<T>>& shards, const ShardPlan& plan) {
  check_shards(shards, plan);
  Encoder<T> full = shards[0].clone();
  for (std::size_t i = 0; i < full.layers.size(); ++i) {
    auto gather = [&](auto pick) {
      std::vector<Tensor<T>> parts;
      for (const auto& s : shards) parts.push_back(pick(s.layers[i]));
      return parts;
    };
    auto& dst = full.layers[i];
    using L = model::EncoderLayer<T>;
    dst.q = {join_columns(gather([](const L& l) { return l.q.weight; })), join_leading(gather([](const L& l) { return l.q.bias; }))};
    dst.k = {join_columns(gather([](const L& l) { return l.k.weight; })), join_leading(gather([](const L& l) { return l.k.bias; }))};
    dst.v = {join_columns(gather([](const L& l) { return l.v.weight; })), join_leading(gather([](const L& l) { return l.v.bias; }))};
    dst.o.weight = join_leading(gather([](const L& l) { return l.o.weight; }));
    dst.ffn_in = {join_columns(gather([](const L& l) { return l.ffn_in.weight; })),
                  join_leading(gather([](const L& l) { return l.ffn_in.bias; }))};
    dst.ffn_out.weight = join_leading(gather([](const L& l) { return l.ffn_out.weight; }));
  }
  return full;
}

template <typename T>
Encoder<T> gradient_view(const Encoder<T>& enc) {
  Encoder<T> out = enc.clone();
  auto src = enc.named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].second.data();
    if (src[i].second.has_grad()) {
      auto g = src[i].second.grad();
      std::copy(g.begin(), g.end(), d.begin());
    } else {
      std::fill(d.begin(), d.end(), T(0));
    }
  }
  return out;
}

template <typename T>
Tensor<T> TensorParallelHooks<T>::enter(Tape<T>& tape, const Tensor<T>& x, std::size_t layer) {
  // A single worker is the serial model; skipping the copy keeps gradient
  // accumulation order, and so the bits, identical.
  if (fabric_.size() == 1 || !tape.needs_grad({&x})) return x;
  Tensor<T> out(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  Fabric* fabric = &fabric_;
  const int li = static_cast<int>(layer);
  tape.record(out, [x, out, fabric, li]() mutable {
    std::vector<T> g(out.grad().begin(), out.grad().end());
    fabric->all_reduce(std::span<T>(g), li, "all_reduce.backward");
    auto gx = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> TensorParallelHooks<T>::reduce(Tape<T>& tape, const Tensor<T>& x, std::size_t layer) {
  if (fabric_.size() == 1) return x;
  Tensor<T> out(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  fabric_.all_reduce(out.data(), static_cast<int>(layer), "all_reduce.forward");
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
std::uint64_t parameter_hash(const Encoder<T>& enc) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : enc.named_parameters()) {
    h = fnv1a(name, h);
    h = fnv1a_bytes(std::as_bytes(t.data()), h);
  }
  return h;
}

template <typename T>
void average_gradients(Encoder<T>& enc, Fabric& dp) {
  if (dp.size() == 1) return;
  auto params = enc.parameters();
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  std::vector<T> flat;
  flat.reserve(total);
  for (auto& p : params) {
    auto g = p.ensure_grad();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  dp.all_reduce(std::span<T>(flat), -1, "all_reduce.grad");
  const T inv = T(1) / static_cast<T>(dp.size());
  std::size_t at = 0;
  for (auto& p : params)
    for (auto& g : p.grad()) g = flat[at++] * inv;
}

template <typename T>
Encoder<T> gather_full_model(const Encoder<T>& shard, const ShardPlan& plan, Fabric& model_group) {
  if (model_group.size() != plan.workers)
    throw ConfigError("model group has " + std::to_string(model_group.size()) + " ranks, plan expects " +
                      std::to_string(plan.workers));
  std::vector<T> flat;
  for (const auto& p : shard.parameters()) flat.insert(flat.end(), p.data().begin(), p.data().end());
  auto all = model_group.all_gather(std::span<const T>(flat), -1, "all_gather.params");
  std::vector<Encoder<T>> shards;
  for (const auto& values : all) {
    Encoder<T> s = shard.clone();
    std::size_t at = 0;
    for (auto& p : s.parameters())
      for (auto& v : p.data()) v = values[at++];
    shards.push_back(std::move(s));
  }
  return unshard(shards, plan);
}

template <typename T>
void check_replicas(const Encoder<T>& enc, Fabric& dp, std::int64_t step) {
  if (dp.size() == 1) return;
  const std::uint64_t mine = parameter_hash(enc);
  auto all = dp.all_gather(std::span<const std::uint64_t>(&mine, 1), -1, "all_gather.hash");
  for (std::size_t r = 0; r < all.size(); ++r) {
    if (all[r][0] != all[0][0])
      throw FabricError("replica divergence at step " + std::to_string(step) + ": rank " + std::to_string(r) +
                        " hash " + hex64(all[r][0]) + " != rank 0 hash " + hex64(all[0][0]));
  }
}

template <typename T>
double data_parallel_step(Encoder<T>& enc, AdamState<T>& adam, const AdamConfig& cfg, Fabric& dp,
                          const std::function<Tensor<T>(Encoder<T>&, Tape<T>&)>& loss) {
  enc.zero_grad();
  double value;
  {
    Tape<T> tape;
    Tensor<T> l = loss(enc, tape);
    value = static_cast<double>(l.item());
    tape.backward(l);
  }
  average_gradients(enc, dp);
  auto params = enc.parameters();
  adam_step(params, adam, cfg);
  check_replicas(enc, dp, adam.step);
  return value;
}

namespace {

std::vector<std::size_t> model_members(std::size_t replica, std::size_t p) {
  std::vector<std::size_t> m;
  for (std::size_t s = 0; s < p; ++s) m.push_back(replica * p + s);
  return m;
}

std::vector<std::size_t> data_members(std::size_t shard, std::size_t p, std::size_t r) {
  std::vector<std::size_t> m;
  for (std::size_t i = 0; i < r; ++i) m.push_back(i * p + shard);
  return m;
}

void run_worker(Fabric& world, const LaunchOptions& opts, const std::function<void(WorkerContext&)>& body) {
  const std::size_t p = opts.model_parallel;
  WorkerContext ctx;
  ctx.world_rank = world.rank();
  ctx.shard = ctx.world_rank % p;
  ctx.replica = ctx.world_rank / p;
  SubFabric mp(world, model_members(ctx.replica, p));
  SubFabric dp(world, data_members(ctx.shard, p, opts.data_parallel));
  ctx.world = &world;
  ctx.model_group = &mp;
  ctx.data_group = &dp;
  body(ctx);
}

}  // namespace

void launch_workers(const LaunchOptions& opts, const std::function<void(WorkerContext&)>& body) {
  if (opts.model_parallel == 0 || opts.data_parallel == 0) throw ConfigError("parallel sizes must be positive");
  const std::size_t world = opts.model_parallel * opts.data_parallel;

  if (opts.transport == Transport::threads) {
    auto group = ThreadGroup::create(world, opts.timeout);
    std::vector<std::exception_ptr> errors(world);
    std::vector<std::thread> threads;
    for (std::size_t r = 0; r < world; ++r) {
      threads.emplace_back([&, r] {
        try {
          auto ep = group->endpoint(r);
          run_worker(*ep, opts, body);
        } catch (...) {
          errors[r] = std::current_exception();
          group->abort();
        }
      });
    }
    for (auto& t : threads) t.join();
    // Prefer the root cause over the "peer aborted" errors it triggered.
    std::exception_ptr first;
    for (auto& e : errors) {
      if (!e) continue;
      try {
        std::rethrow_exception(e);
      } catch (const FabricError& fe) {
        if (std::strstr(fe.what(), "peer aborted") == nullptr && !first) first = e;
      } catch (...) {
        if (!first) first = e;
      }
    }
    if (!first)
      for (auto& e : errors)
        if (e) first = e;
    if (first) std::rethrow_exception(first);
    return;
  }

  Endpoint hub = opts.hub;
  int listen_fd = listen_on(hub);
  std::fflush(nullptr);
  std::vector<pid_t> children;
  for (std::size_t r = 0; r < world; ++r) {
    pid_t pid = fork();
    if (pid < 0) {
      ::close(listen_fd);
      throw FabricError(std::string("fork failed: ") + std::strerror(errno));
    }
    if (pid == 0) {
      int code = 0;
      try {
        if (r != 0) ::close(listen_fd);
        SocketFabric fabric(r, world, hub, r == 0 ? listen_fd : -1, opts.timeout);
        if (r == 0) ::close(listen_fd);
        run_worker(fabric, opts, body);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "worker %zu: %s\n", r, e.what());
        code = 1;
      }
      std::fflush(nullptr);
      _exit(code);
    }
    children.push_back(pid);
  }
  ::close(listen_fd);
  std::string failed;
  for (std::size_t r = 0; r < children.size(); ++r) {
    int status = 0;
    waitpid(children[r], &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed += (failed.empty() ? "" : ",") + std::to_string(r);
  }
  if (!failed.empty()) throw FabricError("worker process(es) " + failed + " failed");
}

#define CLINLM_INSTANTIATE_TP(T)                                                                            \
  template std::vector<Encoder<T>> shard_model(const Encoder<T>&, const ShardPlan&);                        \
  template Encoder<T> unshard(const std::vector<Encoder<T>>&, const ShardPlan&);                            \
  template Encoder<T> gradient_view(const Encoder<T>&);                                                     \
  template class TensorParallelHooks<T>;                                                                    \
  template std::uint64_t parameter_hash(const Encoder<T>&);                                                 \
  template void average_gradients(Encoder<T>&, Fabric&);                                                    \
  template void check_replicas(const Encoder<T>&, Fabric&, std::int64_t);                                   \
  template Encoder<T> gather_full_model(const Encoder<T>&, const ShardPlan&, Fabric&);                      \
  template double data_parallel_step(Encoder<T>&, AdamState<T>&, const AdamConfig&, Fabric&,                \
                                     const std::function<Tensor<T>(Encoder<T>&, Tape<T>&)>&);

CLINLM_INSTANTIATE_TP(float)
CLINLM_INSTANTIATE_TP(double)

#undef CLINLM_INSTANTIATE_TP

}  // namespace clinlm::parallel
