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

#include "impala/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "impala/kernels.hpp"

namespace impala {

RmsPropState RmsPropState::for_params(const ModelParams& params, double learning_rate, double epsilon,
                                      double decay) {
  RmsPropState s;
  s.mean_square.assign(params.size(), 0.0);
  s.learning_rate = learning_rate;
  s.epsilon = epsilon;
  s.decay = decay;
  return s;
}

double RmsPropState::current_learning_rate() const {
  if (anneal_steps <= 0) return learning_rate;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(anneal_steps);
  return learning_rate * std::max(0.0, frac);
}

StepInfo rmsprop_step(RmsPropState& state, ModelParams& params, std::span<const double> ascent_gradient,
                      std::optional<double> clip_norm) {
  if (ascent_gradient.size() != params.size() || state.mean_square.size() != params.size()) {
    throw std::invalid_argument("rmsprop_step: gradient, accumulator and parameters differ in size");
  }
  if (state.momentum != 0.0) throw std::invalid_argument("rmsprop_step: momentum must be 0");
  if (!(state.epsilon > 0.0) || !(state.decay >= 0.0 && state.decay < 1.0)) {
    throw std::invalid_argument("rmsprop_step: need epsilon > 0 and decay in [0,1)");
  }
  const auto& k = kernels::active();
  StepInfo info;
  info.grad_norm = std::sqrt(k.sum_squares(ascent_gradient));
  if (clip_norm && info.grad_norm > *clip_norm) info.scale = *clip_norm / info.grad_norm;

  const kernels::RmsPropArgs args{state.current_learning_rate(), state.decay, state.epsilon, info.scale};
  std::span<double> ms(state.mean_square);
  std::size_t off = 0;
  for (std::vector<double>* block : {&params.shared_body, &params.theta, &params.omega}) {
    const std::size_t n = block->size();
    k.rmsprop_update(*block, ascent_gradient.subspan(off, n), ms.subspan(off, n), args);
    off += n;
  }
  ++state.step;
  ++params.version;
  return info;
}

}  // namespace impala
