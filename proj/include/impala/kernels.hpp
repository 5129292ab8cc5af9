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

#include <cstddef>
#include <span>
#include <string_view>

namespace impala::kernels {

// Time-major batch of unrolls: element (t, b) lives at index t * lanes + b.
// `values` holds steps + 1 rows; the last row is the bootstrap value.
struct VTraceBatchIn {
  std::size_t steps = 0;
  std::size_t lanes = 0;
  std::span<const double> ratios;     // pi / mu, untruncated
  std::span<const double> discounts;  // gamma * (1 - terminal)
  std::span<const double> rewards;
  std::span<const double> values;
};

struct VTraceBatchOut {
  std::span<double> vs;
  std::span<double> rho;
  std::span<double> cs;
  std::span<double> qs;
  std::span<double> pg_advantages;
};

struct VTraceClip {
  double rho_bar = 1.0;
  double c_bar = 1.0;
  double lambda = 1.0;
  // q_s = r_s + gamma * V(x_{s+1}) instead of r_s + gamma * v_{s+1}.
  bool q_from_values = false;
};

struct RmsPropArgs {
  double learning_rate = 0.0;
  double decay = 0.99;
  double epsilon = 0.1;
  double grad_scale = 1.0;  // applied to the gradient before accumulation (norm clipping)
};

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

/// Function table for one instruction set. Every variant must agree with the
/// scalar table bit-for-bit on the elementwise kernels and to rounding on the
/// reductions.
struct KernelTable {
  Isa isa;
  void (*vtrace_batch)(const VTraceBatchIn&, const VTraceBatchOut&, const VTraceClip&);
  void (*rmsprop_update)(std::span<double> params, std::span<const double> grad,
                         std::span<double> mean_square, const RmsPropArgs&);
  double (*sum_squares)(std::span<const double>);
  double (*dot)(std::span<const double>, std::span<const double>);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, std::span<const double> x, std::span<double> y);
};

const KernelTable& scalar_table();

// nullptr when the binary or the CPU lacks AVX2.
const KernelTable* avx2_table();

/// Table chosen at first use: AVX2 when available, overridable with
/// IMPALA_SIMD=scalar|avx2|auto.
const KernelTable& active();

// Forces a table for the rest of the process (tests, benchmarks).
void select(Isa isa);

}  // namespace impala::kernels
