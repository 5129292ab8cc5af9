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
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "impala/tabular.hpp"

namespace impala::envs {

enum class RewardTransform { kNone, kClip, kOptimisticAsymmetric };

RewardTransform parse_reward_transform(std::string_view text);
std::string_view reward_transform_name(RewardTransform t);

/// clip: [-1, 1]; optimistic asymmetric: 0.3 min(tanh r, 0) + 5 max(tanh r, 0).
double transform_reward(RewardTransform t, double reward);

/// Simulated per-step cost. Log-normal delays are exp(N(log_mean, log_sigma)) seconds.
struct DelayDistribution {
  enum class Kind { kNone, kConstant, kLogNormal };
  Kind kind = Kind::kNone;
  double seconds = 0.0;     // constant
  double log_mean = 0.0;    // log-normal
  double log_sigma = 0.0;

  double sample(std::mt19937_64& rng) const;
  double mean() const;
  void validate() const;
};

struct EnvSpec {
  std::string id = "chain-5";
  int observation_dim = 0;  // filled by resolve()
  int num_actions = 0;      // filled by resolve()

  // Episodes are cut (and flagged terminal) after this many steps; 0 = no limit.
  int max_episode_steps = 200;
  DelayDistribution step_delay;
  bool sleep_on_step = false;  // actually wait out the delay on the wall clock
  RewardTransform reward_transform = RewardTransform::kNone;
  int action_repeat = 1;

  // Family knobs.
  int chain_length = 5;
  double slip_probability = 0.1;
  int grid_width = 5;
  int grid_height = 5;
  int corridor_length = 4;  // delayed-effect
  int reveal_delay = 3;     // delayed-effect: steps between a choice and its reward
  double safe_reward = 0.5; // delayed-effect
  std::vector<EnvSpec> tasks;  // multitask-suite

  /// Validates the id and fills observation_dim / num_actions.
  void resolve();
};

/// Parses `chain-N`, `gridworld[-W]`, `delayed-effect`, `variable-cost`,
/// `multitask-suite` into a resolved spec with default knobs.
EnvSpec spec_from_id(std::string_view id);

struct StepResult {
  std::vector<double> observation;
  double reward = 0.0;
  bool terminal = false;
  double delay_seconds = 0.0;
};

class Environment {
 public:
  virtual ~Environment() = default;

  const EnvSpec& spec() const { return spec_; }
  int observation_dim() const { return spec_.observation_dim; }
  int num_actions() const { return spec_.num_actions; }

  /// Starts a new episode and returns its first observation.
  std::vector<double> reset();

  /// Advances one (possibly repeated) action. After a terminal step the next
  /// call to step() begins a fresh episode; its observation is the reset one.
  StepResult step(int action);

  std::int64_t steps_in_episode() const { return episode_steps_; }

  /// Exact MDP with an absorbing zero-reward terminal state, when the
  /// environment has one. Time limits are not part of the export.
  virtual std::optional<tabular::TabularMDP> export_tabular(double gamma) const { (void)gamma; return std::nullopt; }

  // Index of the current underlying state (tabular environments only).
  virtual int state_index() const { return -1; }
  // Maps a tabular state index to its observation (tabular environments only).
  virtual std::vector<double> observation_for_state(int state) const;
  // Start-state distribution over tabular states.
  virtual int start_state() const { return 0; }

 protected:
  Environment(EnvSpec spec, std::uint64_t seed);

  virtual std::vector<double> do_reset() = 0;
  // Returns raw (untransformed) reward and terminal flag; fills the observation.
  virtual StepResult do_step(int action) = 0;

  std::mt19937_64& rng() { return rng_; }

 private:
  EnvSpec spec_;
  std::mt19937_64 rng_;
  std::mt19937_64 delay_rng_;
  std::int64_t episode_steps_ = 0;
  bool needs_reset_ = true;
};

std::unique_ptr<Environment> make_env(const EnvSpec& spec, std::uint64_t seed);

/// Fixed allocation of actors to tasks: equal shares, remainder to the first tasks.
std::vector<int> allocate_actors(int num_tasks, int num_actors);

/// Task index served by `actor` under allocate_actors.
int task_for_actor(int num_tasks, int num_actors, int actor);

/// Environment for one actor: multitask suites resolve to the allocated task,
/// wrapped so every task shares the suite's observation and action shapes.
std::unique_ptr<Environment> make_actor_env(const EnvSpec& spec, int actor, int num_actors,
                                            std::uint64_t seed);

}  // namespace impala::envs
