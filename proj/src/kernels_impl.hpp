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

#include "impala/kernels.hpp"

namespace impala::kernels {

namespace scalar {
void vtrace_batch(const VTraceBatchIn&, const VTraceBatchOut&, const VTraceClip&);
void rmsprop_update(std::span<double>, std::span<const double>, std::span<double>, const RmsPropArgs&);
double sum_squares(std::span<const double>);
double dot(std::span<const double>, std::span<const double>);
void axpy(double, std::span<const double>, std::span<double>);
}  // namespace scalar

#ifdef IMPALA_HAVE_AVX2
namespace avx2 {
void vtrace_batch(const VTraceBatchIn&, const VTraceBatchOut&, const VTraceClip&);
void rmsprop_update(std::span<double>, std::span<const double>, std::span<double>, const RmsPropArgs&);
double sum_squares(std::span<const double>);
double dot(std::span<const double>, std::span<const double>);
void axpy(double, std::span<const double>, std::span<double>);
}  // namespace avx2
#endif

}  // namespace impala::kernels
