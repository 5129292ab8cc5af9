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

#include <random>
#include <string>

#include "impala/trajectory.hpp"

namespace fixtures {

// Arbitrary but well-formed trajectory; doubles span the full bit range
// (negative zero, subnormals, huge magnitudes) so round trips are bit-exact tests.
inline impala::Trajectory random_trajectory(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(1, 25), dim(1, 6), byte(0, 255), action(-3, 1000);
  std::uniform_real_distribution<double> unit(1e-9, 1.0);
  auto weird = [&]() {
    switch (rng() % 6) {
      case 0: return -0.0;
      case 1: return 4.9e-324;
      case 2: return -1.7e308;
      default: return std::uniform_real_distribution<double>(-1e6, 1e6)(rng);
    }
  };
  impala::Trajectory t;
  const int n = len(rng), d = dim(rng);
  const int id_len = static_cast<int>(rng() % 20);
  for (int i = 0; i < id_len; ++i) t.env_id.push_back(static_cast<char>('a' + rng() % 26));
  for (int s = 0; s <= n; ++s) {
    std::vector<double> o(static_cast<std::size_t>(d));
    for (auto& x : o) x = weird();
    t.observations.push_back(std::move(o));
  }
  for (int s = 0; s < n; ++s) {
    t.actions.push_back(action(rng));
    t.rewards.push_back(weird());
    t.behavior_probs.push_back(unit(rng));
    t.terminal_flags.push_back(static_cast<std::uint8_t>(rng() % 2));
  }
  const int state = static_cast<int>(rng() % 4);
  for (int i = 0; i < state; ++i) t.initial_agent_state.push_back(static_cast<std::uint8_t>(byte(rng)));
  t.policy_version = rng();
  return t;
}

}  // namespace fixtures
