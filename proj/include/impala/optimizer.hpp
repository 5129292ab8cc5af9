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
#include <optional>
#include <span>
#include <vector>

#include "impala/models.hpp"

namespace impala {

/// Non-centered RMSProp, epsilon inside the square root, no momentum.
struct RmsPropState {
  std::vector<double> mean_square;
  double learning_rate = 6e-4;
  double decay = 0.99;
  double epsilon = 0.1;
  double momentum = 0.0;  // only 0 is supported
  // Linear anneal to zero over this many steps; 0 keeps the rate constant.
  std::int64_t anneal_steps = 0;
  std::int64_t step = 0;

  static RmsPropState for_params(const ModelParams& params, double learning_rate, double epsilon,
                                 double decay = 0.99);
  double current_learning_rate() const;
};

struct StepInfo {
  double grad_norm = 0.0;  // before clipping
  double scale = 1.0;      // clipping factor applied
};

/// params += lr * g / sqrt(ms + eps) along the ascent gradient (flattened order
/// shared_body, theta, omega). Global-norm clipping, when set, is applied
/// before the accumulator update. Bumps params.version.
StepInfo rmsprop_step(RmsPropState& state, ModelParams& params, std::span<const double> ascent_gradient,
                      std::optional<double> clip_norm = std::nullopt);

}  // namespace impala
