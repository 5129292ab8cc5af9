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
#include <string>
#include <vector>

#include "impala/models.hpp"

namespace impala {

/// An n-step unroll shipped from an actor to the learner. Unrolls are not
/// aligned to episodes: terminal_flags[t] marks that step t ended an episode
/// and observations[t + 1] is then the first observation of the next one.
struct Trajectory {
  std::string env_id;
  std::vector<std::vector<double>> observations;  // n + 1
  std::vector<std::int32_t> actions;              // n
  std::vector<double> rewards;                    // n
  std::vector<double> behavior_probs;             // n, mu(a_t | x_t) in (0, 1]
  std::vector<std::uint8_t> terminal_flags;       // n
  std::vector<std::uint8_t> initial_agent_state;  // carried but unused
  std::uint64_t policy_version = 0;

  std::size_t steps() const { return actions.size(); }
  void validate() const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Immutable published parameters; the version doubles as the snapshot id.
using ParameterSnapshot = std::shared_ptr<const ModelParams>;

}  // namespace impala
