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

#include <atomic>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"

namespace impala::kernels {

namespace {

const KernelTable kScalar{Isa::kScalar, &scalar::vtrace_batch, &scalar::rmsprop_update,
                          &scalar::sum_squares, &scalar::dot, &scalar::axpy};

#ifdef IMPALA_HAVE_AVX2
const KernelTable kAvx2{Isa::kAvx2, &avx2::vtrace_batch, &avx2::rmsprop_update,
                        &avx2::sum_squares, &avx2::dot, &avx2::axpy};
#endif

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const KernelTable* pick_default() {
  const char* env = std::getenv("IMPALA_SIMD");
  const std::string_view want = env ? env : "auto";
  if (want == "scalar") return &kScalar;
  if (const KernelTable* t = avx2_table()) return t;
  return &kScalar;
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return "scalar";
    case Isa::kAvx2:
      return "avx2";
  }
  return "unknown";
}

const KernelTable& scalar_table() { return kScalar; }

const KernelTable* avx2_table() {
#ifdef IMPALA_HAVE_AVX2
  static const bool ok = cpu_has_avx2();
  return ok ? &kAvx2 : nullptr;
#else
  (void)cpu_has_avx2;
  return nullptr;
#endif
}

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void select(Isa isa) {
  const KernelTable* t = isa == Isa::kAvx2 ? avx2_table() : &kScalar;
  current().store(t ? t : &kScalar, std::memory_order_release);
}

}  // namespace impala::kernels
