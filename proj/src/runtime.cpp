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

#include "impala/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <thread>

namespace impala {

void Trajectory::validate() const {
  const std::size_t n = actions.size();
  if (n == 0) throw std::invalid_argument("trajectory: empty unroll");
  if (observations.size() != n + 1) throw std::invalid_argument("trajectory: need n + 1 observations");
  if (rewards.size() != n || behavior_probs.size() != n || terminal_flags.size() != n) {
    throw std::invalid_argument("trajectory: per-step sequences differ in length");
  }
  const std::size_t dim = observations.front().size();
  for (const auto& o : observations) {
    if (o.size() != dim) throw std::invalid_argument("trajectory: ragged observations");
  }
  for (std::size_t t = 0; t < n; ++t) {
    if (actions[t] < 0) throw std::invalid_argument("trajectory: negative action at step " + std::to_string(t));
    if (!(behavior_probs[t] > 0.0 && behavior_probs[t] <= 1.0)) {
      throw std::invalid_argument("trajectory: behavior probability outside (0, 1] at step " + std::to_string(t));
    }
    if (terminal_flags[t] > 1) throw std::invalid_argument("trajectory: terminal flag must be 0 or 1");
  }
}

void SnapshotStore::publish(ParameterSnapshot snapshot) {
  if (!snapshot) throw std::invalid_argument("SnapshotStore::publish: null snapshot");
  if (archive_) {
    std::lock_guard lock(archive_mu_);
    history_.emplace(snapshot->version, snapshot);
  }
  std::atomic_store_explicit(&current_, std::move(snapshot), std::memory_order_release);
}

ParameterSnapshot SnapshotStore::latest() const {
  return std::atomic_load_explicit(&current_, std::memory_order_acquire);
}

ParameterSnapshot SnapshotStore::fetch() {
  if (closed()) return nullptr;
  auto snap = latest();
  if (!snap) throw SnapshotUnavailable("no snapshot published yet");
  return snap;
}

void SnapshotStore::close() { closed_.store(true, std::memory_order_release); }

ParameterSnapshot SnapshotStore::archived(std::uint64_t version) const {
  std::lock_guard lock(archive_mu_);
  auto it = history_.find(version);
  return it == history_.end() ? nullptr : it->second;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("replay capacity must be >= 1");
}

void ReplayBuffer::insert(Trajectory trajectory) {
  if (items_.size() == capacity_) {
    items_.pop_front();
    ++evicted_;
  }
  items_.push_back(std::move(trajectory));
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t count, std::mt19937_64& rng) const {
  if (items_.empty()) throw std::logic_error("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = pick(rng);
  return out;
}

std::vector<Trajectory> ReplayBuffer::sample(std::size_t count, std::mt19937_64& rng) const {
  std::vector<Trajectory> out;
  out.reserve(count);
  for (std::size_t i : sample_indices(count, rng)) out.push_back(items_[i]);
  return out;
}

ParameterSnapshot LagController::on_update(ParameterSnapshot current) {
  if (mode_ == Mode::kNatural) return current;
  history_.push_back(std::move(current));
  while (history_.size() > k_ + 1) history_.pop_front();
  // Before k updates exist the oldest snapshot is the best available.
  return history_.front();
}

int sample_action(std::span<const double> probs, double u) {
  if (probs.empty()) throw std::invalid_argument("sample_action: empty distribution");
  return tabular::sample_index(probs.data(), static_cast<int>(probs.size()), u);
}

Trajectory generate_unroll(envs::Environment& env, const Model& model, const ModelParams& params,
                           std::vector<double>& observation, int unroll_length, std::mt19937_64& rng,
                           double* simulated_seconds) {
  if (unroll_length < 1) throw std::invalid_argument("unroll_length must be >= 1");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Trajectory traj;
  traj.env_id = env.spec().id;
  traj.policy_version = params.version;
  const auto n = static_cast<std::size_t>(unroll_length);
  traj.observations.reserve(n + 1);
  traj.actions.reserve(n);
  traj.rewards.reserve(n);
  traj.behavior_probs.reserve(n);
  traj.terminal_flags.reserve(n);
  traj.observations.push_back(observation);
  for (std::size_t t = 0; t < n; ++t) {
    const PolicyOutput out = model.forward(params, observation);
    const int a = sample_action(out.probs, unif(rng));
    envs::StepResult step = env.step(a);
    traj.actions.push_back(a);
    traj.behavior_probs.push_back(out.probs[static_cast<std::size_t>(a)]);
    traj.rewards.push_back(step.reward);
    traj.terminal_flags.push_back(step.terminal ? 1 : 0);
    if (simulated_seconds) *simulated_seconds += step.delay_seconds;
    observation = std::move(step.observation);
    traj.observations.push_back(observation);
  }
  return traj;
}

void actor_loop(envs::Environment& env, const Model& model, SnapshotSource& source, TrajectorySink& sink,
                const ActorOptions& options, const std::atomic<bool>& stop, ActorStats* stats) {
  std::mt19937_64 rng(options.seed);
  std::vector<double> observation = env.reset();
  while (!stop.load(std::memory_order_acquire)) {
    ParameterSnapshot snap;
    double backoff = options.initial_backoff_s;
    for (int attempt = 0;; ++attempt) {
      try {
        snap = source.fetch();
        break;
      } catch (const SnapshotUnavailable&) {
        if (stop.load(std::memory_order_acquire)) return;
        if (attempt >= options.max_fetch_retries) throw;
        std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
        backoff = std::min(backoff * 2.0, 0.5);
      }
    }
    if (!snap) return;
    Trajectory traj = generate_unroll(env, model, *snap, observation, options.unroll_length, rng);
    if (!sink.push(std::move(traj))) return;
    if (stats) {
      stats->trajectories.fetch_add(1, std::memory_order_relaxed);
      stats->steps.fetch_add(static_cast<std::uint64_t>(options.unroll_length), std::memory_order_relaxed);
    }
  }
}

}  // namespace impala
