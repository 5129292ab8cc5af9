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
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "impala/envs.hpp"
#include "impala/models.hpp"
#include "impala/trajectory.hpp"

namespace impala {

/// A trajectory tagged with the actor (or connection) that produced it.
struct Envelope {
  int source = 0;
  Trajectory trajectory;
};

/// Bounded multi-producer / single-consumer channel. Producers block while
/// the queue is full; nothing is ever dropped. close() wakes everyone:
/// subsequent pushes fail and pop() drains what remains before returning
/// nullopt.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw std::invalid_argument("queue capacity must be >= 1");
  }

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    ++pushed_;
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    ++popped_;
    not_full_.notify_one();
    return item;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }
  std::uint64_t pushed() const {
    std::lock_guard lock(mu_);
    return pushed_;
  }
  std::uint64_t popped() const {
    std::lock_guard lock(mu_);
    return popped_;
  }
  std::size_t capacity() const { return capacity_; }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
  std::uint64_t pushed_ = 0;
  std::uint64_t popped_ = 0;
};

using TrajectoryQueue = BoundedQueue<Envelope>;

/// Thrown by a snapshot source that has nothing to offer right now (nothing
/// published yet, connection lost). Actors retry with backoff.
class SnapshotUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Where an actor obtains its behavior policy. Returns nullptr once the
/// learner has shut down.
class SnapshotSource {
 public:
  virtual ~SnapshotSource() = default;
  virtual ParameterSnapshot fetch() = 0;
};

/// Where an actor sends finished unrolls. Returns false once closed.
class TrajectorySink {
 public:
  virtual ~TrajectorySink() = default;
  virtual bool push(Trajectory trajectory) = 0;
};

/// Latest published parameters, swapped atomically so readers never block
/// the learner. Optionally archives every published version (test mode).
class SnapshotStore final : public SnapshotSource {
 public:
  explicit SnapshotStore(bool archive = false) : archive_(archive) {}

  void publish(ParameterSnapshot snapshot);
  ParameterSnapshot latest() const;
  ParameterSnapshot fetch() override;
  void close();
  bool closed() const { return closed_.load(std::memory_order_acquire); }

  // Archived snapshot for `version`, or nullptr.
  ParameterSnapshot archived(std::uint64_t version) const;

 private:
  ParameterSnapshot current_;
  std::atomic<bool> closed_{false};
  const bool archive_;
  mutable std::mutex archive_mu_;
  std::map<std::uint64_t, ParameterSnapshot> history_;
};

/// Sink adapter that tags trajectories with a source id before queueing.
class QueueSink final : public TrajectorySink {
 public:
  QueueSink(TrajectoryQueue& queue, int source) : queue_(queue), source_(source) {}
  bool push(Trajectory trajectory) override { return queue_.push(Envelope{source_, std::move(trajectory)}); }

 private:
  TrajectoryQueue& queue_;
  int source_;
};

/// FIFO-evicting store of whole trajectories with uniform sampling (with
/// replacement). Owned by the learner alone.
class ReplayBuffer {
 public:
  static constexpr std::size_t kDefaultCapacity = 10'000;

  explicit ReplayBuffer(std::size_t capacity = kDefaultCapacity);

  void insert(Trajectory trajectory);
  // Throws std::logic_error when the buffer is empty.
  std::vector<Trajectory> sample(std::size_t count, std::mt19937_64& rng) const;
  std::vector<std::size_t> sample_indices(std::size_t count, std::mt19937_64& rng) const;

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Trajectory& at(std::size_t i) const { return items_.at(i); }
  std::uint64_t evicted() const { return evicted_; }

 private:
  std::size_t capacity_;
  std::deque<Trajectory> items_;
  std::uint64_t evicted_ = 0;
};

/// Decides which parameters actors see. In fixed(k) mode the published
/// snapshot trails the learner by exactly k updates once k updates exist.
class LagController {
 public:
  enum class Mode { kNatural, kFixed };

  static LagController natural() { return LagController(Mode::kNatural, 0); }
  static LagController fixed(std::uint64_t k) { return LagController(Mode::kFixed, k); }

  Mode mode() const { return mode_; }
  std::uint64_t k() const { return k_; }

  /// Records the learner's current parameters and returns what to publish.
  ParameterSnapshot on_update(ParameterSnapshot current);

 private:
  LagController(Mode mode, std::uint64_t k) : mode_(mode), k_(k) {}
  Mode mode_;
  std::uint64_t k_;
  std::deque<ParameterSnapshot> history_;
};

/// Draws an action from a distribution with a single uniform in [0, 1).
int sample_action(std::span<const double> probs, double u);

struct ActorOptions {
  int unroll_length = 20;
  std::uint64_t seed = 0;
  // Retry schedule while the snapshot source has nothing published yet.
  int max_fetch_retries = 1000;
  double initial_backoff_s = 1e-4;
};

struct ActorStats {
  std::atomic<std::uint64_t> trajectories{0};
  std::atomic<std::uint64_t> steps{0};
};

/// Runs one actor: at each unroll boundary fetch the latest snapshot, act for
/// exactly n steps under it, record mu(a|x) at sampling time, emit the unroll.
/// Returns when the source yields nullptr, the sink closes, or `stop` is set.
void actor_loop(envs::Environment& env, const Model& model, SnapshotSource& source, TrajectorySink& sink,
                const ActorOptions& options, const std::atomic<bool>& stop, ActorStats* stats = nullptr);

/// Generates one unroll from `env` under `params`, continuing from `observation`
/// (updated in place). Shared by the threaded, deterministic and A2C paths.
Trajectory generate_unroll(envs::Environment& env, const Model& model, const ModelParams& params,
                           std::vector<double>& observation, int unroll_length, std::mt19937_64& rng,
                           double* simulated_seconds = nullptr);

}  // namespace impala
