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
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "impala/learner.hpp"

namespace impala::experiments {

// ---------------------------------------------------------------------------
// Configuration

/// Everything one run needs. Loaded from a flat JSON object whose keys are
/// listed in docs/config.schema.json; each key can be overridden by an
/// environment variable IMPALA_<KEY> (upper case).
struct ExperimentConfig {
  RunConfig run;
  Transport transport = Transport::kInProcess;
  std::string listen = "127.0.0.1:0";
  std::string connect;
  std::string out_dir = "out";
  // tcp: executable launched once per actor ("" = this executable).
  std::string actor_command;
  // throughput: A2C worker threads (0 = one per actor).
  int a2c_workers = 0;
};

/// Keys accepted in a config file, in documentation order.
const std::vector<std::string>& config_keys();

/// Throws std::invalid_argument naming the offending key.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies IMPALA_<KEY> overrides from `environ`-style "NAME=value" entries.
/// Values are parsed as JSON when possible and as strings otherwise.
void apply_env_overrides(nlohmann::json& j, std::span<const std::string> environment);
std::vector<std::string> process_environment();

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSpec {
  double entropy_lo = 5e-5;
  double entropy_hi = 1e-2;
  double learning_rate_lo = 5e-6;
  double learning_rate_hi = 5e-3;
  std::vector<double> rmsprop_epsilons = {1e-1, 1e-3, 1e-5, 1e-7};
  int size = 24;

  void validate() const;
};

struct HyperParams {
  double entropy_weight = 0.0;
  double learning_rate = 0.0;
  double rmsprop_epsilon = 0.0;
  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

/// exp(uniform(log lo, log hi)); throws std::invalid_argument unless 0 < lo < hi.
double sample_log_uniform(double lo, double hi, std::mt19937_64& rng);

std::vector<HyperParams> sample_sweep(const SweepSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Scores

/// Mean over tasks of min(1, (s - r) / (h - r)). Throws std::invalid_argument
/// naming the task when h == r.
double capped_normalized_score(std::span<const double> scores, std::span<const double> human,
                               std::span<const double> random, std::span<const std::string> names = {});

struct ReferenceScores {
  double random = 0.0;  // uniform policy, Monte-Carlo
  double human = 0.0;   // oracle-optimal policy from value iteration
};

/// Per-task reference scores; needs environments with a tabular export.
ReferenceScores reference_scores(const envs::EnvSpec& task, double gamma, int episodes, std::uint64_t seed);

/// Mean of the `k` largest values (all values if fewer).
double best_k_mean(std::vector<double> values, std::size_t k);
double median(std::vector<double> values);
/// Inter-quartile range bounds (linear interpolation between order statistics).
std::pair<double, double> quartiles(std::vector<double> values);

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kCsvHeader =
    "update_index,env_frames,wall_clock_s,mean_return,policy_lag,mean_rho,grad_norm,variant,seed";

/// Shortest round-trip text for a double.
std::string format_double(double v);

/// Streams the metrics schema; grid experiments append extra key columns
/// after the fixed ones. Flushes every `flush_every` rows.
class CsvWriter {
 public:
  CsvWriter(std::ostream& out, std::vector<std::string> extra_columns = {}, int flush_every = 100);
  void write(const UpdateMetrics& m, std::string_view variant, std::uint64_t seed,
             const std::vector<std::string>& extra_values = {});
  void flush();

 private:
  std::ostream& out_;
  std::size_t extras_;
  int flush_every_;
  int pending_ = 0;
};

// ---------------------------------------------------------------------------
// Runs

/// Single run in the configured transport. `on_update` sees every metric row.
RunResult run_training(const ExperimentConfig& config, const MetricsCallback& on_update = {});

/// Launches `count` actor processes running `command actor --config <file>
/// --connect host:port --actor i` and returns their pids.
std::vector<int> spawn_actor_processes(const std::string& command, const std::filesystem::path& config_file,
                                       const std::string& host, std::uint16_t port, int count);
/// Waits for every pid; returns the number that exited with status 0.
int wait_for_processes(const std::vector<int>& pids);

struct GridCell {
  std::string variant;
  std::uint64_t k = 0;  // lag grid
  bool replay = false;  // replay grid
  std::uint64_t seed = 0;
  double final_return = 0.0;
  double mean_lag = 0.0;  // over the last 10% of updates
};

/// Lag robustness grid over k x variant x seed (fixed lag, deterministic
/// scheduling unless the config says otherwise). Rows go to `csv` if given.
std::vector<GridCell> run_lag_grid(const ExperimentConfig& base, std::span<const std::uint64_t> ks,
                                   std::span<const CorrectionVariant> variants, std::span<const std::uint64_t> seeds,
                                   std::ostream* csv = nullptr);

/// Replay grid over variant x {no replay, 50% replay} x seed.
std::vector<GridCell> run_replay_grid(const ExperimentConfig& base, std::span<const CorrectionVariant> variants,
                                      std::span<const std::uint64_t> seeds, std::ostream* csv = nullptr);

struct ThroughputRow {
  std::string mode;  // impala, sync_trajectory, sync_step
  double frames_per_second = 0.0;
  std::uint64_t env_frames = 0;
  double wall_seconds = 0.0;
};

/// Table-1-style comparison: the same env, actor count and frame budget in
/// the decoupled and both batched-A2C modes.
std::vector<ThroughputRow> run_throughput(const ExperimentConfig& base);

struct SweepMember {
  int index = 0;
  HyperParams hyper;
  double final_return = 0.0;
};

/// Runs every member, one CSV each under `out_dir`, plus stability.csv with
/// members sorted by final return (descending).
std::vector<SweepMember> run_sweep(const ExperimentConfig& base, const SweepSpec& spec, std::uint64_t sweep_seed,
                                   const std::filesystem::path& out_dir);

/// Summary of a finished run: final return and, where every task has a
/// tabular export, per-task returns with the capped normalized score.
nlohmann::json run_summary(const ExperimentConfig& config, const RunResult& result);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Tabular theorem suite on seeded random MDPs and chain-5.
std::vector<VerifyCheck> run_verify(std::uint64_t seed, int num_mdps = 20);

}  // namespace impala::experiments
