// Copyright 2026 The clinlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "clinlm/parallel/fabric.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <sstream>
#include <thread>

#include "clinlm/common/error.hpp"

namespace clinlm::parallel {

std::string trace_csv(std::span<const CollectiveRecord> trace) {
  std::ostringstream out;
  out << "step,layer,collective,bytes\n";
  for (const auto& r : trace) out << r.step << ',' << r.layer << ',' << r.collective << ',' << r.bytes << '\n';
  return out.str();
}

template <typename T>
void tree_reduce(std::vector<std::vector<T>>& buffers) {
  const std::size_t n = buffers.size();
  for (std::size_t stride = 1; stride < n; stride *= 2) {
    for (std::size_t i = 0; i + stride < n; i += 2 * stride) {
      auto& dst = buffers[i];
      const auto& src = buffers[i + stride];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

template void tree_reduce(std::vector<std::vector<float>>&);
template void tree_reduce(std::vector<std::vector<double>>&);

// --- Fabric -----------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

std::string header(std::string_view label, int layer, std::size_t bytes) {
  return std::string(label) + "@" + std::to_string(layer) + "#" + std::to_string(bytes);
}

}  // namespace

std::vector<std::string> Fabric::checked_exchange(std::string_view label, int layer, std::string body) {
  const std::string head = header(label, layer, body.size());
  std::string payload;
  put_u32(payload, static_cast<std::uint32_t>(head.size()));
  payload += head;
  payload += body;
  trace_.push_back({step_, layer, std::string(label), body.size()});

  std::vector<std::string> all;
  try {
    all = exchange(payload);
  } catch (const FabricError& e) {
    throw FabricError(std::string(label) + " at layer " + std::to_string(layer) + ": " + e.what());
  }
  std::vector<std::string> bodies(all.size());
  for (std::size_t r = 0; r < all.size(); ++r) {
    const auto& p = all[r];
    const std::size_t n = p.size() >= 4 ? get_u32(p, 0) : 0;
    if (p.size() < 4 + n) throw FabricError("malformed payload from rank " + std::to_string(r));
    std::string_view their(p.data() + 4, n);
    if (their != head) {
      throw FabricError("collective desync at layer " + std::to_string(layer) + ": rank " + std::to_string(rank()) +
                        " issued " + head + ", rank " + std::to_string(r) + " issued " + std::string(their));
    }
    bodies[r] = p.substr(4 + n);
  }
  return bodies;
}

template <typename T>
void Fabric::all_reduce(std::span<T> data, int layer, std::string_view label) {
  std::string body(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  auto bodies = checked_exchange(label, layer, std::move(body));
  std::vector<std::vector<T>> buffers(bodies.size(), std::vector<T>(data.size()));
  for (std::size_t r = 0; r < bodies.size(); ++r) std::memcpy(buffers[r].data(), bodies[r].data(), data.size_bytes());
  tree_reduce(buffers);
  std::copy(buffers[0].begin(), buffers[0].end(), data.begin());
}

template <typename T>
std::vector<std::vector<T>> Fabric::all_gather(std::span<const T> data, int layer, std::string_view label) {
  std::string body(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  auto bodies = checked_exchange(label, layer, std::move(body));
  std::vector<std::vector<T>> out(bodies.size(), std::vector<T>(data.size()));
  for (std::size_t r = 0; r < bodies.size(); ++r) std::memcpy(out[r].data(), bodies[r].data(), data.size_bytes());
  return out;
}

void Fabric::broadcast(std::string& data, std::size_t root, std::string_view label) {
  if (root >= size()) throw FabricError("broadcast root " + std::to_string(root) + " out of range");
  // Sizes may differ off-root, so the header carries only the label.
  std::string head = std::string(label) + "@-1#root" + std::to_string(root);
  std::string payload;
  put_u32(payload, static_cast<std::uint32_t>(head.size()));
  payload += head;
  if (rank() == root) payload += data;
  trace_.push_back({step_, -1, std::string(label), rank() == root ? data.size() : 0});
  auto all = exchange(payload);
  for (std::size_t r = 0; r < all.size(); ++r) {
    if (std::string_view(all[r]).substr(4, head.size()) != head)
      throw FabricError("collective desync in broadcast: rank " + std::to_string(r) + " issued something else");
  }
  data = all[root].substr(4 + head.size());
}

template void Fabric::all_reduce(std::span<float>, int, std::string_view);
template void Fabric::all_reduce(std::span<double>, int, std::string_view);
template std::vector<std::vector<float>> Fabric::all_gather(std::span<const float>, int, std::string_view);
template std::vector<std::vector<double>> Fabric::all_gather(std::span<const double>, int, std::string_view);
template std::vector<std::vector<std::uint64_t>> Fabric::all_gather(std::span<const std::uint64_t>, int,
                                                                    std::string_view);

// --- threads ----------------------------------------------------------------

namespace {

class ThreadEndpoint : public Fabric {
 public:
  ThreadEndpoint(std::shared_ptr<ThreadGroup> group, std::size_t rank) : group_(std::move(group)), rank_(rank) {}
  std::size_t rank() const override { return rank_; }
  std::size_t size() const override { return group_->size(); }
  std::vector<std::string> exchange(const std::string& payload) override { return group_->exchange(rank_, payload); }

 private:
  std::shared_ptr<ThreadGroup> group_;
  std::size_t rank_;
};

}  // namespace

ThreadGroup::ThreadGroup(std::size_t size, std::chrono::milliseconds timeout)
    : size_(size), timeout_(timeout), slots_(size) {}

std::shared_ptr<ThreadGroup> ThreadGroup::create(std::size_t size, std::chrono::milliseconds timeout) {
  if (size == 0) throw ConfigError("thread fabric needs at least one rank");
  return std::shared_ptr<ThreadGroup>(new ThreadGroup(size, timeout));
}

std::unique_ptr<Fabric> ThreadGroup::endpoint(std::size_t rank) {
  if (rank >= size_) throw ConfigError("rank " + std::to_string(rank) + " out of range for " + std::to_string(size_));
  return std::make_unique<ThreadEndpoint>(shared_from_this(), rank);
}

void ThreadGroup::abort() {
  std::lock_guard lock(mu_);
  aborted_ = true;
  cv_.notify_all();
}

std::vector<std::string> ThreadGroup::exchange(std::size_t rank, const std::string& payload) {
  std::unique_lock lock(mu_);
  if (aborted_) throw FabricError("peer aborted");
  slots_[rank] = payload;
  const std::uint64_t gen = generation_;
  if (++arrived_ == size_) {
    // A rank cannot start round gen+2 before every rank has left round gen+1,
    // so last_ stays valid for the slow readers of this round.
    last_ = std::make_shared<const std::vector<std::string>>(std::move(slots_));
    slots_.assign(size_, {});
    arrived_ = 0;
    ++generation_;
    cv_.notify_all();
    return *last_;
  }
  if (!cv_.wait_for(lock, timeout_, [&] { return generation_ != gen || aborted_; }))
    throw FabricError("timeout after " + std::to_string(timeout_.count()) + " ms waiting for peers");
  if (generation_ == gen) throw FabricError("peer aborted");
  return *last_;
}

// --- sockets ----------------------------------------------------------------

std::vector<Endpoint> parse_hosts(std::string_view text) {
  std::vector<Endpoint> out;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line = line.substr(start);
    auto colon = line.rfind(':');
    if (colon == std::string::npos || colon == 0)
      throw ConfigError("hosts line " + std::to_string(line_no) + ": expected host:port");
    Endpoint ep;
    ep.host = line.substr(0, colon);
    try {
      std::size_t used = 0;
      int port = std::stoi(line.substr(colon + 1), &used);
      if (used != line.size() - colon - 1 || port < 0 || port > 65535) throw std::out_of_range("port");
      ep.port = static_cast<std::uint16_t>(port);
    } catch (const std::exception&) {
      throw ConfigError("hosts line " + std::to_string(line_no) + ": bad port in '" + line + "'");
    }
    out.push_back(ep);
  }
  return out;
}

namespace {

sockaddr_in to_sockaddr(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  const std::string host = ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw ConfigError("not an IPv4 address: " + ep.host);
  return addr;
}

void set_timeouts(int fd, std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<long>(timeout.count() / 1000);
  tv.tv_usec = static_cast<long>((timeout.count() % 1000) * 1000);
  setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

void send_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) throw FabricError(std::string("send failed: ") + std::strerror(errno));
    data += k;
    n -= static_cast<std::size_t>(k);
  }
}

void recv_all(int fd, char* data, std::size_t n) {
  while (n > 0) {
    ssize_t k = ::recv(fd, data, n, 0);
    if (k < 0 && errno == EINTR) continue;
    if (k == 0) throw FabricError("peer closed the connection");
    if (k < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK) throw FabricError("timeout waiting for peer");
      throw FabricError(std::string("recv failed: ") + std::strerror(errno));
    }
    data += k;
    n -= static_cast<std::size_t>(k);
  }
}

void send_frame(int fd, const std::string& s) {
  std::uint64_t n = s.size();
  send_all(fd, reinterpret_cast<const char*>(&n), 8);
  send_all(fd, s.data(), s.size());
}

std::string recv_frame(int fd) {
  std::uint64_t n = 0;
  recv_all(fd, reinterpret_cast<char*>(&n), 8);
  if (n > (1ULL << 34)) throw FabricError("oversized frame");
  std::string s(n, '\0');
  recv_all(fd, s.data(), n);
  return s;
}

}  // namespace

int listen_on(Endpoint& ep) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw FabricError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = to_sockaddr(ep);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 128) != 0) {
    std::string err = std::strerror(errno);
    ::close(fd);
    throw FabricError("cannot listen on " + ep.host + ":" + std::to_string(ep.port) + ": " + err);
  }
  socklen_t len = sizeof addr;
  getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ep.port = ntohs(addr.sin_port);
  return fd;
}

SocketFabric::SocketFabric(std::size_t rank, std::size_t size, const Endpoint& hub, int listen_fd,
                           std::chrono::milliseconds timeout)
    : rank_(rank), size_(size) {
  if (size == 0 || rank >= size) throw ConfigError("bad socket fabric rank " + std::to_string(rank));
  if (rank == 0) {
    peers_.assign(size, -1);
    if (size > 1 && listen_fd < 0) throw ConfigError("rank 0 needs a listening socket");
    set_timeouts(listen_fd, timeout);
    for (std::size_t i = 1; i < size; ++i) {
      int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) throw FabricError(std::string("accept: ") + std::strerror(errno));
      set_timeouts(fd, timeout);
      std::uint32_t peer = 0;
      recv_all(fd, reinterpret_cast<char*>(&peer), 4);
      if (peer == 0 || peer >= size || peers_[peer] != -1) {
        ::close(fd);
        throw FabricError("unexpected hello from rank " + std::to_string(peer));
      }
      peers_[peer] = fd;
    }
    return;
  }
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  sockaddr_in addr = to_sockaddr(hub);
  for (;;) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw FabricError(std::string("socket: ") + std::strerror(errno));
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) {
      set_timeouts(fd, timeout);
      std::uint32_t me = static_cast<std::uint32_t>(rank);
      send_all(fd, reinterpret_cast<const char*>(&me), 4);
      peers_.push_back(fd);
      return;
    }
    ::close(fd);
    if (std::chrono::steady_clock::now() > deadline)
      throw FabricError("cannot reach rank 0 at " + hub.host + ":" + std::to_string(hub.port));
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

SocketFabric::~SocketFabric() {
  for (int fd : peers_)
    if (fd >= 0) ::close(fd);
}

std::vector<std::string> SocketFabric::exchange(const std::string& payload) {
  std::vector<std::string> all(size_);
  if (rank_ == 0) {
    all[0] = payload;
    for (std::size_t r = 1; r < size_; ++r) all[r] = recv_frame(peers_[r]);
    std::string packed;
    for (const auto& p : all) {
      std::uint64_t n = p.size();
      packed.append(reinterpret_cast<const char*>(&n), 8);
      packed += p;
    }
    for (std::size_t r = 1; r < size_; ++r) send_frame(peers_[r], packed);
    return all;
  }
  send_frame(peers_[0], payload);
  std::string packed = recv_frame(peers_[0]);
  std::size_t at = 0;
  for (std::size_t r = 0; r < size_; ++r) {
    std::uint64_t n = 0;
    if (at + 8 > packed.size()) throw FabricError("truncated broadcast from rank 0");
    std::memcpy(&n, packed.data() + at, 8);
    at += 8;
    if (at + n > packed.size()) throw FabricError("truncated broadcast from rank 0");
    all[r] = packed.substr(at, n);
    at += n;
  }
  return all;
}

// --- groups -----------------------------------------------------------------

SubFabric::SubFabric(Fabric& parent, std::vector<std::size_t> members) : parent_(parent), members_(std::move(members)) {
  bool found = false;
  for (std::size_t i = 0; i < members_.size(); ++i) {
    if (members_[i] >= parent.size()) throw ConfigError("group member out of range");
    if (members_[i] == parent.rank()) {
      rank_ = i;
      found = true;
    }
  }
  if (!found) throw ConfigError("rank " + std::to_string(parent.rank()) + " is not in its own group");
}

std::vector<std::string> SubFabric::exchange(const std::string& payload) {
  auto all = parent_.exchange(payload);
  std::vector<std::string> mine;
  mine.reserve(members_.size());
  for (auto m : members_) mine.push_back(std::move(all[m]));
  return mine;
}

}  // namespace clinlm::parallel
