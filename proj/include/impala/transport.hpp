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

#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "impala/runtime.hpp"
#include "impala/wire.hpp"

// TCP transport over POSIX sockets. One connection per actor; the learner
// side feeds the same TrajectoryQueue the in-process actors use.
namespace impala::net {

struct Address {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  // "host:port"; throws std::invalid_argument.
  static Address parse(std::string_view text);
  std::string to_string() const;
};

class ConnectionClosed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Connection {
 public:
  explicit Connection(int fd);
  ~Connection();
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  // Thread-safe. Throws ConnectionClosed if the peer is gone.
  void send(wire::MessageType type, std::span<const std::uint8_t> payload);

  /// Next complete frame, or nullopt on end of stream. A frame cut short by
  /// the peer closing is dropped, never surfaced. Malformed frames throw
  /// wire::WireError.
  std::optional<wire::Frame> receive();

  // Unblocks pending reads and writes from another thread.
  void shutdown();

  std::uint64_t partial_frames_dropped() const { return partial_dropped_; }

 private:
  // Reads exactly n bytes; returns the count actually read before EOF.
  std::size_t read_fully(std::uint8_t* out, std::size_t n);

  int fd_;
  std::mutex send_mu_;
  std::uint64_t partial_dropped_ = 0;
};

std::unique_ptr<Connection> connect(const Address& address);

struct BackoffOptions {
  double initial_s = 0.01;
  double max_s = 1.0;
  int max_attempts = 12;
};

/// Connects with exponential backoff; throws ConnectionClosed when exhausted.
std::unique_ptr<Connection> connect_with_backoff(const Address& address, const BackoffOptions& backoff);

class Listener {
 public:
  explicit Listener(const Address& address);
  ~Listener();
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  std::uint16_t port() const { return port_; }
  // Blocks; returns nullptr once closed.
  std::unique_ptr<Connection> accept();
  void close();

 private:
  int fd_;
  std::uint16_t port_ = 0;
  std::atomic<bool> closed_{false};
};

struct ServerStats {
  std::atomic<std::uint64_t> connections{0};
  std::atomic<std::uint64_t> trajectories{0};  // forwarded to the queue
  std::atomic<std::uint64_t> discarded{0};     // arrived after shutdown began
  std::atomic<std::uint64_t> snapshots_served{0};
  std::atomic<std::uint64_t> partial_frames_dropped{0};
  std::atomic<std::uint64_t> bad_frames{0};
};

/// Learner endpoint: answers SnapshotRequest from `store` and forwards
/// TrajectoryMsg into `queue`, tagging each with its connection index.
class LearnerServer {
 public:
  LearnerServer(const Address& listen, TrajectoryQueue& queue, SnapshotStore& store);
  ~LearnerServer();

  std::uint16_t port() const { return listener_.port(); }
  Address address() const;

  /// Sends Shutdown to every actor, then waits up to `drain_timeout_s` for
  /// them to hang up before closing what remains.
  void stop(double drain_timeout_s = 5.0);

  const ServerStats& stats() const { return stats_; }

 private:
  void accept_loop();
  void serve(int source, Connection& conn);

  Address listen_;
  Listener listener_;
  TrajectoryQueue& queue_;
  SnapshotStore& store_;
  ServerStats stats_;
  std::atomic<bool> stopping_{false};
  std::atomic<int> active_{0};
  std::mutex mu_;
  std::vector<std::shared_ptr<Connection>> connections_;
  std::vector<std::thread> threads_;
  std::thread acceptor_;
};

/// Actor endpoint: both the snapshot source and the trajectory sink of a
/// remote actor. Reconnects with exponential backoff on connection loss.
class ActorLink final : public SnapshotSource, public TrajectorySink {
 public:
  ActorLink(Address address, BackoffOptions backoff = {});

  ParameterSnapshot fetch() override;
  bool push(Trajectory trajectory) override;

  bool shut_down() const { return shutdown_; }
  std::uint64_t reconnects() const { return reconnects_; }

 private:
  Connection& ensure();
  void drop();

  Address address_;
  BackoffOptions backoff_;
  std::unique_ptr<Connection> conn_;
  bool shutdown_ = false;
  bool ever_connected_ = false;
  std::uint64_t reconnects_ = 0;
};

}  // namespace impala::net
