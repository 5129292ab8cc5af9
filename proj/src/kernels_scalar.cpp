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

#include "kernels_impl.hpp"

#include <algorithm>
#include <cmath>

namespace impala::kernels::scalar {

void vtrace_batch(const VTraceBatchIn& in, const VTraceBatchOut& out, const VTraceClip& clip) {
  const std::size_t T = in.steps;
  const std::size_t B = in.lanes;
  for (std::size_t b = 0; b < B; ++b) {
    // acc carries v_{t+1} - V(x_{t+1}); zero at the bootstrap row.
    double acc = 0.0;
    for (std::size_t t = T; t-- > 0;) {
      const std::size_t i = t * B + b;
      const double ratio = in.ratios[i];
      const double rho = std::min(clip.rho_bar, ratio);
      const double c = clip.lambda * std::min(clip.c_bar, ratio);
      const double v_t = in.values[i];
      const double v_next = in.values[i + B];
      const double disc = in.discounts[i];
      const double delta = rho * (in.rewards[i] + disc * v_next - v_t);
      const double q_next = clip.q_from_values ? v_next : v_next + acc;
      acc = delta + disc * c * acc;
      out.vs[i] = v_t + acc;
      out.rho[i] = rho;
      out.cs[i] = c;
      const double q = in.rewards[i] + disc * q_next;
      out.qs[i] = q;
      out.pg_advantages[i] = rho * (q - v_t);
    }
  }
}

void rmsprop_update(std::span<double> params, std::span<const double> grad,
                    std::span<double> mean_square, const RmsPropArgs& args) {
  const double one_minus_decay = 1.0 - args.decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i] * args.grad_scale;
    const double ms = args.decay * mean_square[i] + one_minus_decay * (g * g);
    mean_square[i] = ms;
    params[i] += args.learning_rate * g / std::sqrt(ms + args.epsilon);
  }
}

double sum_squares(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

double dot(std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace impala::kernels::scalar
