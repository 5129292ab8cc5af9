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

#include <chrono>
#include <cstdint>

#include "impala/learner.hpp"

// Helpers shared by the IMPALA and batched A2C run loops so that both start
// from identical seeds and parameters.
namespace impala::detail {

std::uint64_t splitmix(std::uint64_t x);
double seconds_since(std::chrono::steady_clock::time_point start);
bool finished(const RunConfig& c, std::uint64_t updates, std::uint64_t frames);
LearnerOptions learner_options(const RunConfig& c);
ModelParams initial_params(const Model& model, std::uint64_t seed);

}  // namespace impala::detail
