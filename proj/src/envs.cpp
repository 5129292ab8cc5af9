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

#include "impala/envs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace impala::envs {

namespace {

std::vector<double> one_hot(int dim, int index) {
  std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
  if (index >= 0 && index < dim) v[static_cast<std::size_t>(index)] = 1.0;
  return v;
}

tabular::TabularMDP empty_mdp(int states, int actions, double gamma) {
  tabular::TabularMDP m;
  m.num_states = states;
  m.num_actions = actions;
  m.gamma = gamma;
  m.transition.assign(static_cast<std::size_t>(states) * actions * states, 0.0);
  m.reward.assign(static_cast<std::size_t>(states) * actions, 0.0);
  return m;
}

void add_transition(tabular::TabularMDP& m, int x, int a, int y, double p, double reward_on_arrival) {
  m.transition[(static_cast<std::size_t>(x) * m.num_actions + a) * m.num_states + y] += p;
  m.reward[static_cast<std::size_t>(x) * m.num_actions + a] += p * reward_on_arrival;
}

// N-state chain; action 1 moves right, 0 left, reversed with the slip
// probability. Entering the last state pays 1 and ends the episode.
class ChainEnv final : public Environment {
 public:
  ChainEnv(EnvSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) {}

  std::optional<tabular::TabularMDP> export_tabular(double gamma) const override {
    const int n = spec().chain_length;
    auto m = empty_mdp(n, 2, gamma);
    const double slip = spec().slip_probability;
    for (int x = 0; x < n; ++x) {
      for (int a = 0; a < 2; ++a) {
        if (x == n - 1) {
          add_transition(m, x, a, x, 1.0, 0.0);
          continue;
        }
        const int dir = a == 1 ? 1 : -1;
        const int intended = std::clamp(x + dir, 0, n - 1);
        const int slipped = std::clamp(x - dir, 0, n - 1);
        add_transition(m, x, a, intended, 1.0 - slip, intended == n - 1 ? 1.0 : 0.0);
        if (slip > 0.0) add_transition(m, x, a, slipped, slip, slipped == n - 1 ? 1.0 : 0.0);
      }
    }
    return m;
  }

  int state_index() const override { return state_; }
  std::vector<double> observation_for_state(int s) const override {
    return one_hot(spec().chain_length, s);
  }

 protected:
  std::vector<double> do_reset() override {
    state_ = 0;
    return one_hot(spec().chain_length, state_);
  }

  StepResult do_step(int action) override {
    const int n = spec().chain_length;
    int dir = action == 1 ? 1 : -1;
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng()) < spec().slip_probability) dir = -dir;
    state_ = std::clamp(state_ + dir, 0, n - 1);
    StepResult r;
    r.terminal = state_ == n - 1;
    r.reward = r.terminal ? 1.0 : 0.0;
    r.observation = one_hot(n, state_);
    return r;
  }

 private:
  int state_ = 0;
};

// W x H grid, actions up/down/left/right, start top-left, goal bottom-right
// paying 1 on arrival.
class GridworldEnv final : public Environment {
 public:
  GridworldEnv(EnvSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) {}

  std::optional<tabular::TabularMDP> export_tabular(double gamma) const override {
    const int cells = spec().grid_width * spec().grid_height;
    auto m = empty_mdp(cells, 4, gamma);
    for (int x = 0; x < cells; ++x) {
      for (int a = 0; a < 4; ++a) {
        if (x == cells - 1) {
          add_transition(m, x, a, x, 1.0, 0.0);
          continue;
        }
        const int y = move(x, a);
        add_transition(m, x, a, y, 1.0, y == cells - 1 ? 1.0 : 0.0);
      }
    }
    return m;
  }

  int state_index() const override { return cell_; }
  std::vector<double> observation_for_state(int s) const override {
    return one_hot(spec().grid_width * spec().grid_height, s);
  }

 protected:
  std::vector<double> do_reset() override {
    cell_ = 0;
    return one_hot(spec().grid_width * spec().grid_height, cell_);
  }

  StepResult do_step(int action) override {
    const int cells = spec().grid_width * spec().grid_height;
    cell_ = move(cell_, action);
    StepResult r;
    r.terminal = cell_ == cells - 1;
    r.reward = r.terminal ? 1.0 : 0.0;
    r.observation = one_hot(cells, cell_);
    return r;
  }

 private:
  int move(int cell, int action) const {
    const int w = spec().grid_width;
    const int h = spec().grid_height;
    int row = cell / w;
    int col = cell % w;
    switch (action) {
      case 0: row = std::max(0, row - 1); break;
      case 1: row = std::min(h - 1, row + 1); break;
      case 2: col = std::max(0, col - 1); break;
      default: col = std::min(w - 1, col + 1); break;
    }
    return row * w + col;
  }

  int cell_ = 0;
};

// A choice state, a corridor and a reveal queue.
//   state 0           : choice. action 0 = safe, action 1 = enter the corridor
//   states 1..L       : corridor; at position j the correct action is j % 2,
//                       a wrong action fails the attempt
//   wait states       : (outcome, steps remaining); the outcome's reward is
//                       paid `reveal_delay` steps after the deciding action
// Outcomes pay safe_reward, 1 (corridor cleared) or 0 (failed).
// Episodes start at the choice state, or with probability 1/2 at a uniformly
// drawn corridor position.
class DelayedEffectEnv final : public Environment {
 public:
  DelayedEffectEnv(EnvSpec spec, std::uint64_t seed) : Environment(std::move(spec), seed) {}

  static int observation_dim(const EnvSpec& s) { return 1 + s.corridor_length + 3 * s.reveal_delay; }

  std::optional<tabular::TabularMDP> export_tabular(double gamma) const override {
    const int obs = observation_dim(spec());
    const int terminal = obs;
    auto m = empty_mdp(obs + 1, 2, gamma);
    for (int x = 0; x <= obs; ++x) {
      for (int a = 0; a < 2; ++a) {
        if (x == terminal) {
          add_transition(m, x, a, x, 1.0, 0.0);
          continue;
        }
        const auto [y, reward] = transition(x, a);
        add_transition(m, x, a, y < 0 ? terminal : y, 1.0, reward);
      }
    }
    return m;
  }

  int state_index() const override { return state_; }
  std::vector<double> observation_for_state(int s) const override {
    return one_hot(observation_dim(spec()), s);
  }

 protected:
  std::vector<double> do_reset() override {
    const int L = spec().corridor_length;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (L > 0 && u(rng()) < 0.5) {
      state_ = 1 + std::uniform_int_distribution<int>(0, L - 1)(rng());
    } else {
      state_ = 0;
    }
    return one_hot(observation_dim(spec()), state_);
  }

  StepResult do_step(int action) override {
    const auto [next, reward] = transition(state_, action);
    StepResult r;
    r.reward = reward;
    r.terminal = next < 0;
    state_ = r.terminal ? 0 : next;
    r.observation = one_hot(observation_dim(spec()), state_);
    return r;
  }

 private:
  enum Outcome { kSafe = 0, kSuccess = 1, kFail = 2 };

  int wait_state(int outcome, int remaining) const {
    return 1 + spec().corridor_length + outcome * spec().reveal_delay + (remaining - 1);
  }
  double outcome_reward(int outcome) const {
    return outcome == kSafe ? spec().safe_reward : (outcome == kSuccess ? 1.0 : 0.0);
  }
  // Enters the reveal queue for `outcome`; with no delay the reward is paid now.
  std::pair<int, double> decide(int outcome) const {
    if (spec().reveal_delay == 0) return {-1, outcome_reward(outcome)};
    return {wait_state(outcome, spec().reveal_delay), 0.0};
  }

  // Returns (next state or -1 for terminal, reward).
  std::pair<int, double> transition(int x, int a) const {
    const int L = spec().corridor_length;
    if (x == 0) return a == 1 ? (L > 0 ? std::pair<int, double>{1, 0.0} : decide(kSuccess)) : decide(kSafe);
    if (x <= L) {
      if (a != x % 2) return decide(kFail);
      return x == L ? decide(kSuccess) : std::pair<int, double>{x + 1, 0.0};
    }
    const int k = spec().reveal_delay;
    const int offset = x - 1 - L;
    const int outcome = offset / k;
    const int remaining = offset % k + 1;
    if (remaining == 1) return {-1, outcome_reward(outcome)};
    return {wait_state(outcome, remaining - 1), 0.0};
  }

  int state_ = 0;
};

// One task of a suite, padded to the suite's shared observation and action
// shapes. The observation is [task one-hot | task observation | zero padding].
class TaskWrapperEnv final : public Environment {
 public:
  TaskWrapperEnv(EnvSpec suite, int task, std::unique_ptr<Environment> inner, std::uint64_t seed)
      : Environment(std::move(suite), seed), task_(task), inner_(std::move(inner)) {}

 protected:
  std::vector<double> do_reset() override { return wrap(inner_->reset()); }

  StepResult do_step(int action) override {
    StepResult r = inner_->step(action % inner_->num_actions());
    r.observation = wrap(r.observation);
    return r;
  }

 private:
  std::vector<double> wrap(const std::vector<double>& obs) const {
    std::vector<double> out(static_cast<std::size_t>(observation_dim()), 0.0);
    out[static_cast<std::size_t>(task_)] = 1.0;
    std::copy(obs.begin(), obs.end(), out.begin() + static_cast<std::ptrdiff_t>(spec().tasks.size()));
    return out;
  }

  int task_;
  std::unique_ptr<Environment> inner_;
};

}  // namespace

RewardTransform parse_reward_transform(std::string_view text) {
  if (text == "none") return RewardTransform::kNone;
  if (text == "clip") return RewardTransform::kClip;
  if (text == "optimistic_asymmetric" || text == "asymmetric") return RewardTransform::kOptimisticAsymmetric;
  throw std::invalid_argument("unknown reward transform: " + std::string(text));
}

std::string_view reward_transform_name(RewardTransform t) {
  switch (t) {
    case RewardTransform::kNone: return "none";
    case RewardTransform::kClip: return "clip";
    case RewardTransform::kOptimisticAsymmetric: return "optimistic_asymmetric";
  }
  return "unknown";
}

double transform_reward(RewardTransform t, double reward) {
  switch (t) {
    case RewardTransform::kNone:
      return reward;
    case RewardTransform::kClip:
      return std::clamp(reward, -1.0, 1.0);
    case RewardTransform::kOptimisticAsymmetric: {
      const double s = std::tanh(reward);
      return 0.3 * std::min(s, 0.0) + 5.0 * std::max(s, 0.0);
    }
  }
  return reward;
}

double DelayDistribution::sample(std::mt19937_64& rng) const {
  switch (kind) {
    case Kind::kNone:
      return 0.0;
    case Kind::kConstant:
      return seconds;
    case Kind::kLogNormal:
      return std::lognormal_distribution<double>(log_mean, log_sigma)(rng);
  }
  return 0.0;
}

double DelayDistribution::mean() const {
  switch (kind) {
    case Kind::kNone: return 0.0;
    case Kind::kConstant: return seconds;
    case Kind::kLogNormal: return std::exp(log_mean + 0.5 * log_sigma * log_sigma);
  }
  return 0.0;
}

void DelayDistribution::validate() const {
  if (kind == Kind::kConstant && !(seconds >= 0.0)) throw std::invalid_argument("delay must be >= 0");
  if (kind == Kind::kLogNormal && !(log_sigma >= 0.0)) throw std::invalid_argument("log_sigma must be >= 0");
}

void EnvSpec::resolve() {
  step_delay.validate();
  if (action_repeat < 1) throw std::invalid_argument("action_repeat must be >= 1");
  if (max_episode_steps < 0) throw std::invalid_argument("max_episode_steps must be >= 0");
  if (id.rfind("chain", 0) == 0) {
    if (id.size() > 6 && id[5] == '-') chain_length = std::stoi(id.substr(6));
    if (chain_length < 2) throw std::invalid_argument("chain needs at least 2 states");
    if (!(slip_probability >= 0.0 && slip_probability < 0.5)) {
      throw std::invalid_argument("slip probability must lie in [0, 0.5)");
    }
    observation_dim = chain_length;
    num_actions = 2;
  } else if (id.rfind("gridworld", 0) == 0 || id == "variable-cost") {
    if (id.size() > 10 && id[9] == '-') grid_width = grid_height = std::stoi(id.substr(10));
    if (grid_width < 1 || grid_height < 1 || grid_width * grid_height < 2) {
      throw std::invalid_argument("gridworld needs at least two cells");
    }
    observation_dim = grid_width * grid_height;
    num_actions = 4;
  } else if (id == "delayed-effect") {
    if (corridor_length < 0 || reveal_delay < 0) throw std::invalid_argument("delayed-effect knobs must be >= 0");
    observation_dim = DelayedEffectEnv::observation_dim(*this);
    num_actions = 2;
  } else if (id == "multitask-suite") {
    if (tasks.empty()) throw std::invalid_argument("multitask-suite needs at least one task");
    int max_obs = 0;
    int max_actions = 0;
    for (EnvSpec& t : tasks) {
      if (t.id == "multitask-suite") throw std::invalid_argument("multitask suites cannot nest");
      t.resolve();
      max_obs = std::max(max_obs, t.observation_dim);
      max_actions = std::max(max_actions, t.num_actions);
    }
    observation_dim = static_cast<int>(tasks.size()) + max_obs;
    num_actions = max_actions;
  } else {
    throw std::invalid_argument("unknown environment id: " + id);
  }
}

EnvSpec spec_from_id(std::string_view id) {
  EnvSpec s;
  s.id = std::string(id);
  if (id == "variable-cost") {
    s.step_delay.kind = DelayDistribution::Kind::kLogNormal;
    s.step_delay.log_mean = std::log(5e-4);
    s.step_delay.log_sigma = 1.0;
    s.sleep_on_step = true;
    s.max_episode_steps = 100;
  }
  if (id == "multitask-suite") {
    s.tasks = {spec_from_id("chain-5"), spec_from_id("gridworld"), spec_from_id("delayed-effect")};
  }
  s.resolve();
  return s;
}

Environment::Environment(EnvSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), rng_(seed), delay_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {}

std::vector<double> Environment::observation_for_state(int state) const {
  (void)state;
  throw std::logic_error("environment " + spec_.id + " has no tabular states");
}

std::vector<double> Environment::reset() {
  episode_steps_ = 0;
  needs_reset_ = false;
  return do_reset();
}

StepResult Environment::step(int action) {
  if (action < 0 || action >= spec_.num_actions) {
    throw std::out_of_range("action " + std::to_string(action) + " out of range for " + spec_.id);
  }
  if (needs_reset_) reset();
  StepResult total;
  double raw_reward = 0.0;
  for (int i = 0; i < spec_.action_repeat; ++i) {
    StepResult r = do_step(action);
    raw_reward += r.reward;
    total.delay_seconds += spec_.step_delay.sample(delay_rng_);
    total.observation = std::move(r.observation);
    total.terminal = r.terminal;
    if (r.terminal) break;
  }
  ++episode_steps_;
  if (spec_.max_episode_steps > 0 && episode_steps_ >= spec_.max_episode_steps) total.terminal = true;
  total.reward = transform_reward(spec_.reward_transform, raw_reward);
  if (spec_.sleep_on_step && total.delay_seconds > 0.0) {
    std::this_thread::sleep_for(std::chrono::duration<double>(total.delay_seconds));
  }
  if (total.terminal) total.observation = reset();
  return total;
}

std::unique_ptr<Environment> make_env(const EnvSpec& spec, std::uint64_t seed) {
  EnvSpec s = spec;
  s.resolve();
  if (s.id.rfind("chain", 0) == 0) return std::make_unique<ChainEnv>(s, seed);
  if (s.id.rfind("gridworld", 0) == 0 || s.id == "variable-cost") return std::make_unique<GridworldEnv>(s, seed);
  if (s.id == "delayed-effect") return std::make_unique<DelayedEffectEnv>(s, seed);
  if (s.id == "multitask-suite") return make_actor_env(s, 0, 1, seed);
  throw std::invalid_argument("unknown environment id: " + s.id);
}

std::vector<int> allocate_actors(int num_tasks, int num_actors) {
  if (num_tasks < 1 || num_actors < 0) throw std::invalid_argument("allocate_actors: bad counts");
  std::vector<int> counts(static_cast<std::size_t>(num_tasks), num_actors / num_tasks);
  for (int i = 0; i < num_actors % num_tasks; ++i) ++counts[static_cast<std::size_t>(i)];
  return counts;
}

int task_for_actor(int num_tasks, int num_actors, int actor) {
  if (actor < 0 || actor >= std::max(num_actors, 1)) throw std::out_of_range("actor index out of range");
  const std::vector<int> counts = allocate_actors(num_tasks, std::max(num_actors, 1));
  int upto = 0;
  for (int t = 0; t < num_tasks; ++t) {
    upto += counts[static_cast<std::size_t>(t)];
    if (actor < upto) return t;
  }
  return num_tasks - 1;
}

std::unique_ptr<Environment> make_actor_env(const EnvSpec& spec, int actor, int num_actors,
                                            std::uint64_t seed) {
  EnvSpec s = spec;
  s.resolve();
  if (s.id != "multitask-suite") return make_env(s, seed);
  const int task = task_for_actor(static_cast<int>(s.tasks.size()), num_actors, actor);
  auto inner = make_env(s.tasks[static_cast<std::size_t>(task)], seed);
  // Delays, repeats and reward transforms are applied by the inner task.
  EnvSpec outer = s;
  outer.step_delay = {};
  outer.sleep_on_step = false;
  outer.action_repeat = 1;
  outer.max_episode_steps = 0;
  outer.reward_transform = RewardTransform::kNone;
  return std::make_unique<TaskWrapperEnv>(outer, task, std::move(inner), seed);
}

}  // namespace impala::envs
