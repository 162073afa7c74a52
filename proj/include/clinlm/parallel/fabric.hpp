// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace clinlm::parallel {

struct CollectiveRecord {
  std::uint64_t step = 0;
  int layer = -1;  // -1 outside any transformer layer
  std::string collective;
  std::uint64_t bytes = 0;  // payload contributed by this rank

  bool operator==(const CollectiveRecord&) const = default;
};

std::string trace_csv(std::span<const CollectiveRecord> trace);

// Sums buffers[0..n) pairwise in a fixed binary tree over rank order:
// (0+1)+(2+3), ... Every rank evaluating this on the same inputs gets the
// same bits.
template <typename T>
void tree_reduce(std::vector<std::vector<T>>& buffers);

// Collective endpoint for one rank. Transports implement exchange(); the
// typed collectives, desync detection and tracing live here.
class Fabric {
 public:
  virtual ~Fabric() = default;
  virtual std::size_t rank() const = 0;
  virtual std::size_t size() const = 0;
  // Every rank's payload, indexed by rank. All ranks call this in the same
  // sequence; throws FabricError on timeout or a broken peer.
  virtual std::vector<std::string> exchange(const std::string& payload) = 0;

  template <typename T>
  void all_reduce(std::span<T> data, int layer = -1, std::string_view label = "all_reduce");
  template <typename T>
  std::vector<std::vector<T>> all_gather(std::span<const T> data, int layer = -1,
                                         std::string_view label = "all_gather");
  void broadcast(std::string& data, std::size_t root, std::string_view label = "broadcast");

  void set_step(std::uint64_t step) { step_ = step; }
  std::uint64_t step() const { return step_; }
  const std::vector<CollectiveRecord>& trace() const { return trace_; }
  void clear_trace() { trace_.clear(); }

 private:
  std::vector<std::string> checked_exchange(std::string_view label, int layer, std::string body);

  std::uint64_t step_ = 0;
  std::vector<CollectiveRecord> trace_;
};

// A group of one; every collective is the identity.
class LocalFabric final : public Fabric {
 public:
  std::size_t rank() const override { return 0; }
  std::size_t size() const override { return 1; }
  std::vector<std::string> exchange(const std::string& payload) override { return {payload}; }
};

// In-process transport: ranks are threads sharing one rendezvous.
class ThreadGroup : public std::enable_shared_from_this<ThreadGroup> {
 public:
  static std::shared_ptr<ThreadGroup> create(std::size_t size,
                                             std::chrono::milliseconds timeout = std::chrono::seconds(60));
  std::unique_ptr<Fabric> endpoint(std::size_t rank);
  // Wakes every waiting rank with a FabricError; used when one rank fails.
  void abort();

  std::vector<std::string> exchange(std::size_t rank, const std::string& payload);
  std::size_t size() const { return size_; }

 private:
  ThreadGroup(std::size_t size, std::chrono::milliseconds timeout);

  std::size_t size_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::string> slots_;
  std::size_t arrived_ = 0;
  std::uint64_t generation_ = 0;
  std::shared_ptr<const std::vector<std::string>> last_;
  bool aborted_ = false;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

// One "host:port" per line; blank lines and '#' comments skipped.
std::vector<Endpoint> parse_hosts(std::string_view text);

// Binds and listens; a zero port is replaced by the one the kernel chose.
int listen_on(Endpoint& ep);

// Loopback TCP transport in a star around rank 0: every rank sends its
// payload to rank 0, which returns the full rank-ordered set to everyone.
class SocketFabric : public Fabric {
 public:
  // Rank 0 passes the listening descriptor from listen_on(); the others
  // connect to `hub`, retrying until the timeout.
  SocketFabric(std::size_t rank, std::size_t size, const Endpoint& hub, int listen_fd,
               std::chrono::milliseconds timeout = std::chrono::seconds(60));
  ~SocketFabric() override;
  SocketFabric(const SocketFabric&) = delete;
  SocketFabric& operator=(const SocketFabric&) = delete;

  std::size_t rank() const override { return rank_; }
  std::size_t size() const override { return size_; }
  std::vector<std::string> exchange(const std::string& payload) override;

 private:
  std::size_t rank_, size_;
  std::vector<int> peers_;  // rank 0: descriptor per rank; others: [hub]
};

// A subset of a parent fabric's ranks. Every parent rank must issue the same
// collective at the same time (each within its own group), so the parent's
// exchange carries all groups at once.
class SubFabric : public Fabric {
 public:
  SubFabric(Fabric& parent, std::vector<std::size_t> members);
  std::size_t rank() const override { return rank_; }
  std::size_t size() const override { return members_.size(); }
  std::vector<std::string> exchange(const std::string& payload) override;

 private:
  Fabric& parent_;
  std::vector<std::size_t> members_;
  std::size_t rank_ = 0;
};

}  // namespace clinlm::parallel
