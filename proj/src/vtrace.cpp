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

#include "impala/vtrace.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "impala/kernels.hpp"

namespace impala {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

void check_probs(std::span<const double> target, std::span<const double> behavior) {
  for (std::size_t t = 0; t < behavior.size(); ++t) {
    if (!(behavior[t] > 0.0) || !std::isfinite(behavior[t])) {
      throw std::invalid_argument("behavior probability must be > 0 at step " + std::to_string(t));
    }
    if (!(target[t] >= 0.0 && target[t] <= 1.0)) {
      throw std::invalid_argument("target probability outside [0,1] at step " + std::to_string(t));
    }
  }
}

kernels::VTraceClip clip_for(const VTraceConfig& config, const CorrectionVariant& variant) {
  kernels::VTraceClip clip{config.rho_bar, config.c_bar, config.lambda,
                           config.q_estimate == QEstimate::kNextValue};
  if (variant.kind() != CorrectionVariant::Kind::kVTrace) {
    // Uncorrected targets: rho = c = 1 on unit ratios.
    clip.rho_bar = 1.0;
    clip.c_bar = 1.0;
    clip.lambda = 1.0;
  }
  return clip;
}

// Shared tail of the single and batched paths. `ratios` is overwritten for
// the uncorrected variants.
VTraceOutput run_kernel(std::size_t steps, std::size_t lanes, std::vector<double> ratios,
                        std::span<const double> discounts, std::span<const double> rewards,
                        std::span<const double> values, const VTraceConfig& config,
                        const CorrectionVariant& variant, const kernels::KernelTable& table) {
  const std::size_t count = steps * lanes;
  std::vector<double> truncated;
  if (variant.kind() != CorrectionVariant::Kind::kVTrace) {
    if (variant.kind() == CorrectionVariant::Kind::kOneStepIS) {
      truncated.resize(count);
      for (std::size_t i = 0; i < count; ++i) truncated[i] = std::min(config.rho_bar, ratios[i]);
    }
    std::fill(ratios.begin(), ratios.end(), 1.0);
  }

  VTraceOutput out;
  out.vs.resize(count);
  out.rho.resize(count);
  out.cs.resize(count);
  out.qs.resize(count);
  out.pg_advantages.resize(count);
  const kernels::VTraceBatchIn in{steps, lanes, ratios, discounts, rewards, values};
  const kernels::VTraceBatchOut dst{out.vs, out.rho, out.cs, out.qs, out.pg_advantages};
  table.vtrace_batch(in, dst, clip_for(config, variant));

  if (!truncated.empty()) {
    for (std::size_t i = 0; i < count; ++i) {
      // pg_advantages currently holds 1 * (q - V).
      out.pg_advantages[i] *= truncated[i];
      out.rho[i] = truncated[i];
    }
  }
  if (variant.kind() == CorrectionVariant::Kind::kEpsilonCorrection) out.log_epsilon = variant.eps();
  return out;
}

}  // namespace

void VTraceConfig::validate() const {
  require(gamma >= 0.0 && gamma < 1.0, "gamma must lie in [0,1)");
  require(rho_bar > 0.0, "rho_bar must be > 0");
  require(c_bar > 0.0, "c_bar must be > 0");
  require(rho_bar >= c_bar, "rho_bar must be >= c_bar");
  require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0,1]");
  require(unroll_length >= 1, "unroll_length must be >= 1");
}

void UnrollInputs::validate() const {
  const std::size_t n = rewards.size();
  require(n >= 1, "unroll must contain at least one step");
  require(values.size() == n + 1, "values must hold n + 1 entries");
  require(target_probs.size() == n, "target_probs length mismatch");
  require(behavior_probs.size() == n, "behavior_probs length mismatch");
  require(terminals.empty() || terminals.size() == n, "terminals length mismatch");
  require(all_finite(rewards) && all_finite(values) && all_finite(target_probs),
          "non-finite unroll input");
  check_probs(target_probs, behavior_probs);
}

void UnrollBatch::validate() const {
  const std::size_t count = steps * lanes;
  require(steps >= 1 && lanes >= 1, "batch must be non-empty");
  require(rewards.size() == count && discounts.size() == count, "batch rewards/discounts size");
  require(target_probs.size() == count && behavior_probs.size() == count, "batch probs size");
  require(values.size() == count + lanes, "batch values must hold (steps + 1) * lanes");
  require(all_finite(rewards) && all_finite(values) && all_finite(discounts) &&
              all_finite(target_probs),
          "non-finite batch input");
  check_probs(target_probs, behavior_probs);
}

void LossWeights::validate() const {
  require(baseline_weight >= 0.0 && entropy_weight >= 0.0 && policy_weight >= 0.0,
          "loss weights must be >= 0");
}

CorrectionVariant CorrectionVariant::epsilon(double eps) {
  require(eps > 0.0, "epsilon correction needs eps > 0");
  return CorrectionVariant(Kind::kEpsilonCorrection, eps);
}

CorrectionVariant CorrectionVariant::parse(std::string_view text) {
  if (text == "vtrace" || text == "v-trace") return vtrace();
  if (text == "none" || text == "no-correction") return none();
  if (text == "eps" || text == "epsilon" || text == "eps-correction") return epsilon();
  if (text == "onestep" || text == "one-step-is" || text == "1step") return one_step_is();
  throw std::invalid_argument("unknown correction variant: " + std::string(text));
}

std::string_view CorrectionVariant::name() const {
  switch (kind_) {
    case Kind::kVTrace:
      return "vtrace";
    case Kind::kNoCorrection:
      return "none";
    case Kind::kEpsilonCorrection:
      return "eps";
    case Kind::kOneStepIS:
      return "onestep";
  }
  return "unknown";
}

TruncatedWeights compute_weights(const UnrollInputs& inputs, const VTraceConfig& config) {
  config.validate();
  inputs.validate();
  TruncatedWeights w;
  w.rho.resize(inputs.steps());
  w.cs.resize(inputs.steps());
  for (std::size_t t = 0; t < inputs.steps(); ++t) {
    const double ratio = inputs.target_probs[t] / inputs.behavior_probs[t];
    w.rho[t] = std::min(config.rho_bar, ratio);
    w.cs[t] = config.lambda * std::min(config.c_bar, ratio);
  }
  return w;
}

VTraceOutput vtrace_targets(const UnrollInputs& inputs, const VTraceConfig& config) {
  return apply_variant(inputs, config, CorrectionVariant::vtrace());
}

VTraceOutput apply_variant(const UnrollInputs& inputs, const VTraceConfig& config,
                           const CorrectionVariant& variant) {
  config.validate();
  inputs.validate();
  const std::size_t n = inputs.steps();
  std::vector<double> ratios(n);
  std::vector<double> discounts(n);
  for (std::size_t t = 0; t < n; ++t) {
    ratios[t] = inputs.target_probs[t] / inputs.behavior_probs[t];
    const bool done = !inputs.terminals.empty() && inputs.terminals[t] != 0;
    discounts[t] = done ? 0.0 : config.gamma;
  }
  std::vector<double> values = inputs.values;
  if (inputs.bootstrap_is_terminal) values.back() = 0.0;
  // The single-unroll path always uses the scalar reference kernel.
  return run_kernel(n, 1, std::move(ratios), discounts, inputs.rewards, values, config, variant,
                    kernels::scalar_table());
}

VTraceOutput apply_variant_batch(const UnrollBatch& batch, const VTraceConfig& config,
                                 const CorrectionVariant& variant) {
  config.validate();
  batch.validate();
  std::vector<double> ratios(batch.target_probs.size());
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    ratios[i] = batch.target_probs[i] / batch.behavior_probs[i];
  }
  return run_kernel(batch.steps, batch.lanes, std::move(ratios), batch.discounts, batch.rewards,
                    batch.values, config, variant, kernels::active());
}

std::vector<double> update_directions(const VTraceOutput& output, std::span<const double> values,
                                      std::span<const std::vector<double>> log_policy_grads,
                                      std::span<const std::vector<double>> value_grads,
                                      std::span<const std::vector<double>> entropy_grads,
                                      const LossWeights& weights) {
  weights.validate();
  const std::size_t n = output.vs.size();
  require(values.size() == n || values.size() == n + 1, "values length mismatch");
  require(log_policy_grads.size() == n && value_grads.size() == n, "gradient sequence length");
  require(entropy_grads.empty() || entropy_grads.size() == n, "entropy gradient length");
  require(output.pg_advantages.size() == n, "advantage length mismatch");
  if (n == 0) return {};
  const std::size_t dim = log_policy_grads[0].size();
  auto check_dim = [&](const std::vector<double>& g) {
    require(g.size() == dim, "gradient dimension mismatch");
  };
  std::vector<double> direction(dim, 0.0);
  const auto& k = kernels::active();
  for (std::size_t s = 0; s < n; ++s) {
    check_dim(log_policy_grads[s]);
    check_dim(value_grads[s]);
    k.axpy(weights.baseline_weight * (output.vs[s] - values[s]), value_grads[s], direction);
    k.axpy(weights.policy_weight * output.pg_advantages[s], log_policy_grads[s], direction);
    if (!entropy_grads.empty()) {
      check_dim(entropy_grads[s]);
      k.axpy(weights.entropy_weight, entropy_grads[s], direction);
    }
  }
  return direction;
}

}  // namespace impala
