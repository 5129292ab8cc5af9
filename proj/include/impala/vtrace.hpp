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
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace impala {

/// How q_s is built for the policy-gradient advantage.
enum class QEstimate {
  kNextTarget,  // q_s = r_s + gamma * v_{s+1}
  kNextValue,   // q_s = r_s + gamma * V(x_{s+1})
};

struct VTraceConfig {
  double gamma = 0.99;
  double rho_bar = 1.0;
  double c_bar = 1.0;
  double lambda = 1.0;
  int unroll_length = 20;
  QEstimate q_estimate = QEstimate::kNextTarget;

  // Throws std::invalid_argument on a violated invariant (rho_bar >= c_bar included).
  void validate() const;
};

/// One n-step unroll as seen by the learner. `terminals` is either empty or
/// has one flag per step; a set flag cuts the discount after that step.
struct UnrollInputs {
  std::vector<double> rewards;         // n
  std::vector<double> values;          // n + 1, last entry is the bootstrap
  std::vector<double> target_probs;    // pi(a_t | x_t)
  std::vector<double> behavior_probs;  // mu(a_t | x_t), strictly positive
  std::vector<std::uint8_t> terminals;
  bool bootstrap_is_terminal = false;

  std::size_t steps() const { return rewards.size(); }
  void validate() const;
};

struct VTraceOutput {
  std::vector<double> vs;
  std::vector<double> rho;
  std::vector<double> cs;
  std::vector<double> qs;
  std::vector<double> pg_advantages;
  // Nonzero only for the epsilon-correction variant; models use log(pi + eps).
  double log_epsilon = 0.0;
};

struct TruncatedWeights {
  std::vector<double> rho;
  std::vector<double> cs;
};

class CorrectionVariant {
 public:
  enum class Kind { kVTrace, kNoCorrection, kEpsilonCorrection, kOneStepIS };

  static constexpr double kDefaultEpsilon = 1e-6;

  constexpr CorrectionVariant() = default;
  static constexpr CorrectionVariant vtrace() { return CorrectionVariant(Kind::kVTrace, 0.0); }
  static constexpr CorrectionVariant none() { return CorrectionVariant(Kind::kNoCorrection, 0.0); }
  static CorrectionVariant epsilon(double eps = kDefaultEpsilon);
  static constexpr CorrectionVariant one_step_is() { return CorrectionVariant(Kind::kOneStepIS, 0.0); }

  // Accepts vtrace, none, eps, onestep (and the long names printed by name()).
  static CorrectionVariant parse(std::string_view text);

  constexpr Kind kind() const { return kind_; }
  constexpr double eps() const { return eps_; }
  std::string_view name() const;

  friend constexpr bool operator==(const CorrectionVariant&, const CorrectionVariant&) = default;

 private:
  constexpr CorrectionVariant(Kind k, double e) : kind_(k), eps_(e) {}
  Kind kind_ = Kind::kVTrace;
  double eps_ = 0.0;
};

struct LossWeights {
  double baseline_weight = 0.5;
  double entropy_weight = 0.01;
  double policy_weight = 1.0;

  void validate() const;
};

/// rho_t = min(rho_bar, pi/mu), c_t = lambda * min(c_bar, pi/mu).
TruncatedWeights compute_weights(const UnrollInputs& inputs, const VTraceConfig& config);

/// V-trace targets by a single reverse pass:
///   v_s = V(x_s) + delta_s V + gamma_s c_s (v_{s+1} - V(x_{s+1})),  v_{s+n} = V(x_{s+n}).
VTraceOutput vtrace_targets(const UnrollInputs& inputs, const VTraceConfig& config);

VTraceOutput apply_variant(const UnrollInputs& inputs, const VTraceConfig& config,
                           const CorrectionVariant& variant);

/// Ascent direction summed over time:
///   sum_s bw (v_s - V(x_s)) dV_s + pw A_s dlogpi_s + ew dH_s.
/// `values` holds V(x_s) for the n steps (the bootstrap entry is optional).
std::vector<double> update_directions(const VTraceOutput& output, std::span<const double> values,
                                      std::span<const std::vector<double>> log_policy_grads,
                                      std::span<const std::vector<double>> value_grads,
                                      std::span<const std::vector<double>> entropy_grads,
                                      const LossWeights& weights);

/// Many unrolls of equal length laid out time-major (index t * lanes + b),
/// with per-step discounts already folded in from the terminal flags.
struct UnrollBatch {
  std::size_t steps = 0;
  std::size_t lanes = 0;
  std::vector<double> rewards;         // steps * lanes
  std::vector<double> discounts;       // steps * lanes
  std::vector<double> values;          // (steps + 1) * lanes
  std::vector<double> target_probs;    // steps * lanes
  std::vector<double> behavior_probs;  // steps * lanes

  void validate() const;
};

/// Batched counterpart of apply_variant; outputs are time-major like the input.
/// Runs on the active SIMD kernel table.
VTraceOutput apply_variant_batch(const UnrollBatch& batch, const VTraceConfig& config,
                                 const CorrectionVariant& variant);

}  // namespace impala
