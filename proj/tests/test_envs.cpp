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


#include <doctest.h>

#include <cmath>
#include <numeric>

#include "impala/envs.hpp"
#include "impala/tabular.hpp"

using namespace impala;
using namespace impala::envs;

namespace {

std::vector<double> episode_stream(const EnvSpec& spec, std::uint64_t seed, int steps) {
  auto env = make_env(spec, seed);
  std::vector<double> out;
  auto obs = env->reset();
  for (int s = 0; s < steps; ++s) {
    const auto r = env->step(s % env->num_actions());
    out.push_back(r.reward);
    out.push_back(r.terminal);
    out.insert(out.end(), r.observation.begin(), r.observation.end());
    if (r.terminal) env->reset();
  }
  return out;
}

}  // namespace

TEST_CASE("reward transforms") {
  CHECK(transform_reward(RewardTransform::kClip, 3.0) == 1.0);
  CHECK(transform_reward(RewardTransform::kClip, -3.0) == -1.0);
  CHECK(transform_reward(RewardTransform::kClip, 0.25) == 0.25);
  CHECK(transform_reward(RewardTransform::kOptimisticAsymmetric, -2.0) == doctest::Approx(-0.2892).epsilon(1e-4));
  CHECK(transform_reward(RewardTransform::kOptimisticAsymmetric, 2.0) == doctest::Approx(4.8201).epsilon(1e-4));
  CHECK(transform_reward(RewardTransform::kNone, 7.0) == 7.0);
  CHECK(parse_reward_transform(reward_transform_name(RewardTransform::kOptimisticAsymmetric)) ==
        RewardTransform::kOptimisticAsymmetric);
  CHECK_THROWS_AS(parse_reward_transform("sqrt"), std::invalid_argument);
}

TEST_CASE("seeded determinism") {
  for (const char* id : {"chain-5", "gridworld", "delayed-effect", "variable-cost"}) {
    auto spec = spec_from_id(id);
    spec.sleep_on_step = false;
    CAPTURE(id);
    CHECK(episode_stream(spec, 5, 300) == episode_stream(spec, 5, 300));
  }
}

TEST_CASE("tabular exports are stochastic matrices") {
  for (const char* id : {"chain-5", "gridworld", "delayed-effect"}) {
    auto env = make_env(spec_from_id(id), 0);
    const auto m = env->export_tabular(0.9);
    REQUIRE(m.has_value());
    CHECK_NOTHROW(m->validate());
    for (int x = 0; x < m->num_states; ++x) {
      for (int a = 0; a < m->num_actions; ++a) {
        const double* row = m->row(x, a);
        CHECK(std::accumulate(row, row + m->num_states, 0.0) == doctest::Approx(1.0));
      }
    }
  }
}

TEST_CASE("chain export matches sampled dynamics") {
  auto spec = spec_from_id("chain-5");
  auto env = make_env(spec, 3);
  const auto m = *env->export_tabular(0.9);
  std::vector<double> counts(5, 0.0);
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) {
    env->reset();
    env->step(1);  // from state 0, move right
    counts[static_cast<std::size_t>(env->state_index())] += 1.0;
  }
  for (int y = 0; y < 5; ++y) CHECK(counts[y] / trials == doctest::Approx(m.p(0, 1, y)).epsilon(0.03).scale(1));
}

TEST_CASE("delayed effect reveals rewards late") {
  auto spec = spec_from_id("delayed-effect");
  spec.corridor_length = 2;
  spec.reveal_delay = 3;
  spec.resolve();
  auto env = make_env(spec, 0);
  for (int attempt = 0; attempt < 50; ++attempt) {
    env->reset();
    if (env->state_index() == 0) break;
  }
  REQUIRE(env->state_index() == 0);
  auto r = env->step(0);  // safe arm
  double paid = r.reward;
  int steps = 1;
  while (!r.terminal) {
    CHECK(paid == 0.0);
    r = env->step(0);
    paid += r.reward;
    ++steps;
  }
  CHECK(paid == spec.safe_reward);
  CHECK(steps == 1 + spec.reveal_delay);
}

TEST_CASE("multitask allocation") {
  CHECK(allocate_actors(3, 6) == std::vector<int>{2, 2, 2});
  CHECK(allocate_actors(3, 7) == std::vector<int>{3, 2, 2});
  CHECK(task_for_actor(3, 6, 0) == 0);
  CHECK(task_for_actor(3, 6, 5) == 2);
  auto suite = spec_from_id("multitask-suite");
  suite.resolve();
  for (int a = 0; a < 6; ++a) {
    auto env = make_actor_env(suite, a, 6, 1);
    CHECK(env->observation_dim() == suite.observation_dim);
    CHECK(env->num_actions() == suite.num_actions);
    CHECK(env->reset().size() == static_cast<std::size_t>(suite.observation_dim));
  }
}

TEST_CASE("variable-cost delays are log-normal") {
  auto spec = spec_from_id("variable-cost");
  spec.sleep_on_step = false;
  auto env = make_env(spec, 2);
  env->reset();
  std::vector<double> logs;
  for (int i = 0; i < 20000; ++i) {
    const auto r = env->step(i % 4);
    REQUIRE(r.delay_seconds > 0.0);
    logs.push_back(std::log(r.delay_seconds));
    if (r.terminal) env->reset();
  }
  const double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / logs.size();
  double var = 0.0;
  for (double x : logs) var += (x - mean) * (x - mean);
  var /= logs.size() - 1;
  CHECK(mean == doctest::Approx(spec.step_delay.log_mean).epsilon(0.01));
  CHECK(std::sqrt(var) == doctest::Approx(spec.step_delay.log_sigma).epsilon(0.03));
}

TEST_CASE("action repeat and validation") {
  auto spec = spec_from_id("chain-5");
  spec.action_repeat = 0;
  CHECK_THROWS_AS(spec.resolve(), std::invalid_argument);
  CHECK_THROWS_AS(spec_from_id("pong"), std::invalid_argument);
  auto env = make_env(spec_from_id("gridworld"), 0);
  env->reset();
  CHECK_THROWS_AS(env->step(17), std::out_of_range);
}
