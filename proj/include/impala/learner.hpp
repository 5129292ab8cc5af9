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

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "impala/envs.hpp"
#include "impala/models.hpp"
#include "impala/optimizer.hpp"
#include "impala/runtime.hpp"
#include "impala/vtrace.hpp"

namespace impala {

struct LearnerOptions {
  VTraceConfig vtrace;
  LossWeights weights;
  CorrectionVariant variant;
  double learning_rate = 6e-4;
  double rmsprop_epsilon = 0.1;
  double rmsprop_decay = 0.99;
  std::optional<double> clip_norm = 40.0;
  std::int64_t anneal_steps = 0;
  int batch_size = 32;
  bool replay = false;
  std::size_t replay_capacity = ReplayBuffer::kDefaultCapacity;
  int action_repeat = 1;  // env frames per agent step, for frame accounting
  std::uint64_t seed = 0;

  void validate() const;
};

/// One learner update as reported in the metrics stream.
struct UpdateMetrics {
  std::uint64_t update_index = 0;
  std::uint64_t env_frames = 0;  // cumulative, fresh data only
  double wall_clock_s = 0.0;
  double mean_return = 0.0;      // episodes finished in this batch; carried forward otherwise
  double policy_lag = 0.0;       // mean over the batch, replayed items included
  double mean_rho = 0.0;         // mean min(rho_bar, pi/mu) over all steps
  double grad_norm = 0.0;        // before clipping
  std::size_t fresh = 0;
  std::size_t replayed = 0;
  std::size_t episodes = 0;
  double max_lag = 0.0;
  double min_lag = 0.0;
};

/// Per-source running episode returns; unrolls are not episode-aligned.
class EpisodeTracker {
 public:
  // Returns the returns of episodes that finished inside `t`.
  std::vector<double> consume(int source, const Trajectory& t);

 private:
  std::map<int, double> running_;
};

/// The single learner. Owns parameters, optimizer state and the replay buffer.
class Learner {
 public:
  Learner(Model model, ModelParams initial, LearnerOptions options);

  /// Fresh trajectories expected per update: m, or ceil(m/2) with replay.
  std::size_t fresh_per_update() const;
  std::size_t replay_per_update() const;

  /// One optimizer step on `fresh` plus replayed items. Fresh trajectories
  /// enter the replay buffer after the replayed half has been drawn.
  UpdateMetrics update(std::vector<Envelope> fresh);

  /// Sum over the batch and time of the per-unroll ascent directions, with
  /// the V-trace targets computed by the batched (SIMD) kernels.
  std::vector<double> batch_gradient(const std::vector<const Trajectory*>& batch,
                                     std::vector<double>* ratios_out = nullptr) const;

  const ModelParams& params() const { return params_; }
  ParameterSnapshot snapshot() const { return std::make_shared<const ModelParams>(params_); }
  const Model& model() const { return model_; }
  const ReplayBuffer& replay() const { return replay_; }
  const LearnerOptions& options() const { return options_; }
  std::uint64_t updates() const { return updates_; }

 private:
  Model model_;
  ModelParams params_;
  LearnerOptions options_;
  RmsPropState optimizer_;
  ReplayBuffer replay_;
  std::mt19937_64 replay_rng_;
  EpisodeTracker episodes_;
  std::uint64_t updates_ = 0;
  std::uint64_t frames_ = 0;
  double last_return_ = 0.0;
};

enum class Transport { kInProcess, kTcp };
Transport parse_transport(std::string_view text);
std::string_view transport_name(Transport t);

struct RunConfig {
  envs::EnvSpec env = envs::spec_from_id("chain-5");
  ModelFamily model_family = ModelFamily::kLinear;
  int hidden = 32;
  bool share_body = true;
  LearnerOptions learner;
  int num_actors = 4;
  std::size_t queue_capacity = 0;      // 0 = one slot per actor
  std::optional<std::uint64_t> fixed_lag;  // nullopt = natural lag
  std::uint64_t max_updates = 1000;
  std::uint64_t total_env_frames = 0;  // 0 = stop on max_updates only
  bool deterministic = false;          // single-threaded, simulated clock
  int eval_episodes = 200;
  std::uint64_t seed = 0;
  bool archive_snapshots = false;      // test mode: keep every published version

  ModelSpec model_spec() const;
  void validate() const;
};

struct RunResult {
  std::vector<UpdateMetrics> metrics;
  ModelParams params;
  double final_return = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t env_frames = 0;
  std::uint64_t produced = 0;  // trajectories emitted by actors
  std::uint64_t consumed = 0;  // trajectories taken by the learner
  std::uint64_t drained = 0;   // left in flight at shutdown
  double frames_per_second() const { return wall_seconds > 0 ? double(env_frames) / wall_seconds : 0.0; }
};

using MetricsCallback = std::function<void(const UpdateMetrics&)>;

/// Independent per-actor seeds shared by every run mode.
std::uint64_t env_seed(std::uint64_t seed, int actor);
std::uint64_t action_seed(std::uint64_t seed, int actor);

/// Mean undiscounted return of the stochastic policy over `episodes`
/// (spread evenly across the tasks of a suite).
double evaluate_policy(const envs::EnvSpec& spec, const Model& model, const ModelParams& params, int episodes,
                       std::uint64_t seed);

/// In-process IMPALA: actor threads, bounded queue, one learner.
RunResult run_impala(const RunConfig& config, const MetricsCallback& on_update = {},
                     SnapshotStore* store_out = nullptr);

/// Single-threaded variant with round-robin actors and a simulated clock.
/// Two runs with the same config yield identical metric streams.
RunResult run_deterministic(const RunConfig& config, const MetricsCallback& on_update = {},
                            SnapshotStore* store = nullptr);

/// Learner side of a TCP run. `spawn_actors` is called with the bound port
/// once the server is listening; actors run elsewhere. `actors_alive`, when
/// given, is polled every 50 ms; once it returns false the run throws instead
/// of waiting for trajectories that will never arrive.
RunResult run_tcp_learner(const RunConfig& config, const std::string& listen,
                          const std::function<void(std::uint16_t)>& spawn_actors,
                          const MetricsCallback& on_update = {},
                          const std::function<bool()>& actors_alive = {});

/// Actor side of a TCP run: one actor process, index `actor`.
std::uint64_t run_tcp_actor(const RunConfig& config, const std::string& connect, int actor);

enum class A2CMode { kSyncStep, kSyncTrajectory };
A2CMode parse_a2c_mode(std::string_view text);
std::string_view a2c_mode_name(A2CMode m);

/// Batched A2C: `num_actors` environments stepped in lock-step, strictly
/// on-policy with rho = c = 1. Each update consumes one unroll per env.
/// `worker_threads` 0 runs env steps inline (deterministic).
RunResult run_batched_a2c(const RunConfig& config, A2CMode mode, int worker_threads,
                          const MetricsCallback& on_update = {});

}  // namespace impala
