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

// Compiled with -mavx2 only; never called unless the CPU reports AVX2.

#include <immintrin.h>

#include <algorithm>
#include <cmath>

#include "kernels_impl.hpp"

namespace impala::kernels::avx2 {

namespace {

constexpr std::size_t kWidth = 4;

// Same operation order as the scalar reference so both round identically.
void vtrace_lane(const VTraceBatchIn& in, const VTraceBatchOut& out, const VTraceClip& clip,
                 std::size_t b) {
  const std::size_t B = in.lanes;
  double acc = 0.0;
  for (std::size_t t = in.steps; t-- > 0;) {
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

double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

}  // namespace

void vtrace_batch(const VTraceBatchIn& in, const VTraceBatchOut& out, const VTraceClip& clip) {
  const std::size_t T = in.steps;
  const std::size_t B = in.lanes;
  const __m256d rho_bar = _mm256_set1_pd(clip.rho_bar);
  const __m256d c_bar = _mm256_set1_pd(clip.c_bar);
  const __m256d lambda = _mm256_set1_pd(clip.lambda);

  std::size_t b = 0;
  for (; b + kWidth <= B; b += kWidth) {
    __m256d acc = _mm256_setzero_pd();
    for (std::size_t t = T; t-- > 0;) {
      const std::size_t i = t * B + b;
      const __m256d ratio = _mm256_loadu_pd(&in.ratios[i]);
      // min_pd(x, bar) returns x when x < bar, matching std::min(bar, x).
      const __m256d rho = _mm256_min_pd(ratio, rho_bar);
      const __m256d c = _mm256_mul_pd(lambda, _mm256_min_pd(ratio, c_bar));
      const __m256d v_t = _mm256_loadu_pd(&in.values[i]);
      const __m256d v_next = _mm256_loadu_pd(&in.values[i + B]);
      const __m256d disc = _mm256_loadu_pd(&in.discounts[i]);
      const __m256d r = _mm256_loadu_pd(&in.rewards[i]);
      const __m256d delta =
          _mm256_mul_pd(rho, _mm256_sub_pd(_mm256_add_pd(r, _mm256_mul_pd(disc, v_next)), v_t));
      const __m256d q_next = clip.q_from_values ? v_next : _mm256_add_pd(v_next, acc);
      acc = _mm256_add_pd(delta, _mm256_mul_pd(_mm256_mul_pd(disc, c), acc));
      _mm256_storeu_pd(&out.vs[i], _mm256_add_pd(v_t, acc));
      _mm256_storeu_pd(&out.rho[i], rho);
      _mm256_storeu_pd(&out.cs[i], c);
      const __m256d q = _mm256_add_pd(r, _mm256_mul_pd(disc, q_next));
      _mm256_storeu_pd(&out.qs[i], q);
      _mm256_storeu_pd(&out.pg_advantages[i], _mm256_mul_pd(rho, _mm256_sub_pd(q, v_t)));
    }
  }
  for (; b < B; ++b) vtrace_lane(in, out, clip, b);
}

void rmsprop_update(std::span<double> params, std::span<const double> grad,
                    std::span<double> mean_square, const RmsPropArgs& args) {
  const std::size_t n = params.size();
  const __m256d decay = _mm256_set1_pd(args.decay);
  const __m256d one_minus_decay = _mm256_set1_pd(1.0 - args.decay);
  const __m256d lr = _mm256_set1_pd(args.learning_rate);
  const __m256d eps = _mm256_set1_pd(args.epsilon);
  const __m256d scale = _mm256_set1_pd(args.grad_scale);
  std::size_t i = 0;
  for (; i + kWidth <= n; i += kWidth) {
    const __m256d g = _mm256_mul_pd(_mm256_loadu_pd(&grad[i]), scale);
    const __m256d ms = _mm256_add_pd(_mm256_mul_pd(decay, _mm256_loadu_pd(&mean_square[i])),
                                     _mm256_mul_pd(one_minus_decay, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(&mean_square[i], ms);
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(lr, g), _mm256_sqrt_pd(_mm256_add_pd(ms, eps)));
    _mm256_storeu_pd(&params[i], _mm256_add_pd(_mm256_loadu_pd(&params[i]), step));
  }
  const double omd = 1.0 - args.decay;
  for (; i < n; ++i) {
    const double g = grad[i] * args.grad_scale;
    const double ms = args.decay * mean_square[i] + omd * (g * g);
    mean_square[i] = ms;
    params[i] += args.learning_rate * g / std::sqrt(ms + args.epsilon);
  }
}

double sum_squares(std::span<const double> x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kWidth <= x.size(); i += kWidth) {
    const __m256d v = _mm256_loadu_pd(&x[i]);
    acc = _mm256_add_pd(acc, _mm256_mul_pd(v, v));
  }
  double s = hsum(acc);
  for (; i < x.size(); ++i) s += x[i] * x[i];
  return s;
}

double dot(std::span<const double> x, std::span<const double> y) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kWidth <= x.size(); i += kWidth) {
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(&x[i]), _mm256_loadu_pd(&y[i])));
  }
  double s = hsum(acc);
  for (; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  const __m256d a = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + kWidth <= x.size(); i += kWidth) {
    const __m256d r = _mm256_add_pd(_mm256_loadu_pd(&y[i]), _mm256_mul_pd(a, _mm256_loadu_pd(&x[i])));
    _mm256_storeu_pd(&y[i], r);
  }
  for (; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace impala::kernels::avx2
