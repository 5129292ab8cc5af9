// Copyright 2026-present the impala-desk authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "impala/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>

namespace impala::net {
namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

sockaddr_in resolve(const Address& a) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(a.port);
  if (::inet_pton(AF_INET, a.host.c_str(), &sa.sin_addr) == 1) return sa;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(a.host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw std::invalid_argument("cannot resolve host '" + a.host + "'");
  }
  sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return sa;
}

void sleep_s(double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); }

}  // namespace

Address Address::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon + 1 == text.size()) {
    throw std::invalid_argument("address must look like host:port, got '" + std::string(text) + "'");
  }
  Address a;
  a.host = std::string(text.substr(0, colon));
  if (a.host.empty()) a.host = "127.0.0.1";
  const std::string port(text.substr(colon + 1));
  std::size_t used = 0;
  unsigned long p = 0;
  try {
    p = std::stoul(port, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != port.size() || p > 65535) throw std::invalid_argument("bad port '" + port + "'");
  a.port = static_cast<std::uint16_t>(p);
  return a;
}

std::string Address::to_string() const { return host + ":" + std::to_string(port); }

Connection::Connection(int fd) : fd_(fd) {
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

Connection::~Connection() { ::close(fd_); }

void Connection::send(wire::MessageType type, std::span<const std::uint8_t> payload) {
  const auto frame = wire::encode_frame(type, payload);
  std::lock_guard lock(send_mu_);
  std::size_t off = 0;
  while (off < frame.size()) {
    const ssize_t n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ConnectionClosed(errno_text("send"));
    }
    off += static_cast<std::size_t>(n);
  }
}

std::size_t Connection::read_fully(std::uint8_t* out, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd_, out + got, n - got, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) break;  // EOF or a dead connection
    got += static_cast<std::size_t>(r);
  }
  return got;
}

std::optional<wire::Frame> Connection::receive() {
  std::vector<std::uint8_t> buf(wire::kHeaderSize);
  const std::size_t head = read_fully(buf.data(), buf.size());
  if (head == 0) return std::nullopt;
  if (head < buf.size()) {
    ++partial_dropped_;
    return std::nullopt;
  }
  const std::size_t total = wire::frame_size_from_header(buf);
  buf.resize(total);
  const std::size_t rest = total - wire::kHeaderSize;
  if (read_fully(buf.data() + wire::kHeaderSize, rest) < rest) {
    ++partial_dropped_;
    return std::nullopt;
  }
  return wire::decode_frame(buf);
}

void Connection::shutdown() { ::shutdown(fd_, SHUT_RDWR); }

std::unique_ptr<Connection> connect(const Address& address) {
  const sockaddr_in sa = resolve(address);
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw ConnectionClosed(errno_text("socket"));
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0) {
    const std::string msg = errno_text("connect");
    ::close(fd);
    throw ConnectionClosed(msg);
  }
  return std::make_unique<Connection>(fd);
}

std::unique_ptr<Connection> connect_with_backoff(const Address& address, const BackoffOptions& backoff) {
  double wait = backoff.initial_s;
  std::string last = "no attempts";
  for (int attempt = 0; attempt < backoff.max_attempts; ++attempt) {
    try {
      return connect(address);
    } catch (const ConnectionClosed& e) {
      last = e.what();
    }
    sleep_s(wait);
    wait = std::min(wait * 2.0, backoff.max_s);
  }
  throw ConnectionClosed("could not reach " + address.to_string() + " (" + last + ")");
}

Listener::Listener(const Address& address) {
  fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw std::runtime_error(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const sockaddr_in sa = resolve(address);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0 || ::listen(fd_, 64) != 0) {
    const std::string msg = errno_text(("bind/listen " + address.to_string()).c_str());
    ::close(fd_);
    throw std::runtime_error(msg);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

Listener::~Listener() {
  close();
  ::close(fd_);
}

std::unique_ptr<Connection> Listener::accept() {
  while (!closed_.load()) {
    const int c = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (c >= 0) {
      if (closed_.load()) {
        ::close(c);
        break;
      }
      return std::make_unique<Connection>(c);
    }
    if (errno == EINTR || errno == ECONNABORTED) continue;
    break;
  }
  return nullptr;
}

void Listener::close() {
  if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
}

LearnerServer::LearnerServer(const Address& listen, TrajectoryQueue& queue, SnapshotStore& store)
    : listen_(listen), listener_(listen), queue_(queue), store_(store) {
  acceptor_ = std::thread([this] { accept_loop(); });
}

LearnerServer::~LearnerServer() { stop(0.0); }

Address LearnerServer::address() const {
  Address a = listen_;
  a.port = port();
  return a;
}

void LearnerServer::accept_loop() {
  int next_source = 0;
  while (auto conn = listener_.accept()) {
    std::shared_ptr<Connection> shared(std::move(conn));
    const int source = next_source++;
    std::lock_guard lock(mu_);
    if (stopping_) break;
    ++stats_.connections;
    ++active_;
    connections_.push_back(shared);
    threads_.emplace_back([this, source, shared] {
      serve(source, *shared);
      stats_.partial_frames_dropped += shared->partial_frames_dropped();
      --active_;
    });
  }
}

void LearnerServer::serve(int source, Connection& conn) {
  using wire::MessageType;
  try {
    while (true) {
      std::optional<wire::Frame> frame;
      try {
        frame = conn.receive();
      } catch (const wire::WireError&) {
        ++stats_.bad_frames;  // cannot resynchronize a byte stream
        return;
      }
      if (!frame) return;
      switch (frame->type) {
        case MessageType::kTrajectory: {
          Trajectory t;
          try {
            t = wire::decode_trajectory_payload(frame->payload);
            t.validate();
          } catch (const std::exception&) {
            ++stats_.bad_frames;
            return;
          }
          if (!stopping_ && queue_.push(Envelope{source, std::move(t)})) {
            ++stats_.trajectories;
          } else {
            ++stats_.discarded;
          }
          break;
        }
        case MessageType::kSnapshotRequest: {
          ParameterSnapshot snap;
          while (!stopping_ && !store_.closed() && !(snap = store_.latest())) sleep_s(1e-3);
          if (!snap || stopping_ || store_.closed()) {
            conn.send(MessageType::kShutdown, {});
          } else {
            conn.send(MessageType::kSnapshot, wire::encode_params_payload(*snap));
            ++stats_.snapshots_served;
          }
          break;
        }
        case MessageType::kShutdown:
          return;
        case MessageType::kSnapshot:
          ++stats_.bad_frames;
          return;
      }
    }
  } catch (const ConnectionClosed&) {
    // Peer vanished mid-reply; nothing left to do for this connection.
  }
}

void LearnerServer::stop(double drain_timeout_s) {
  if (stopping_.exchange(true)) return;
  listener_.close();
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::shared_ptr<Connection>> conns;
  {
    std::lock_guard lock(mu_);
    conns = connections_;
  }
  for (auto& c : conns) {
    try {
      c->send(wire::MessageType::kShutdown, {});
    } catch (const ConnectionClosed&) {
    }
  }
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(drain_timeout_s);
  while (active_.load() > 0 && std::chrono::steady_clock::now() < deadline) sleep_s(1e-3);
  for (auto& c : conns) c->shutdown();
  for (auto& t : threads_) t.join();
  threads_.clear();
}

ActorLink::ActorLink(Address address, BackoffOptions backoff)
    : address_(std::move(address)), backoff_(backoff) {}

Connection& ActorLink::ensure() {
  if (!conn_) {
    conn_ = connect_with_backoff(address_, backoff_);
    if (ever_connected_) ++reconnects_;
    ever_connected_ = true;
  }
  return *conn_;
}

void ActorLink::drop() { conn_.reset(); }

ParameterSnapshot ActorLink::fetch() {
  if (shutdown_) return nullptr;
  for (int attempt = 0; attempt < backoff_.max_attempts; ++attempt) {
    try {
      Connection& c = ensure();
      c.send(wire::MessageType::kSnapshotRequest, {});
      auto frame = c.receive();
      if (!frame) throw ConnectionClosed("learner closed the connection");
      if (frame->type == wire::MessageType::kShutdown) {
        shutdown_ = true;
        return nullptr;
      }
      if (frame->type != wire::MessageType::kSnapshot) throw wire::UnknownTypeError("expected a snapshot");
      return std::make_shared<const ModelParams>(wire::decode_params_payload(frame->payload));
    } catch (const ConnectionClosed&) {
      drop();
    }
  }
  throw SnapshotUnavailable("learner at " + address_.to_string() + " unreachable");
}

bool ActorLink::push(Trajectory trajectory) {
  if (shutdown_) return false;
  const auto payload = wire::encode_trajectory_payload(trajectory);
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      ensure().send(wire::MessageType::kTrajectory, payload);
      return true;
    } catch (const ConnectionClosed&) {
      drop();
    }
  }
  return false;
}

}  // namespace impala::net
