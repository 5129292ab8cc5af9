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

#include "impala/vtrace.hpp"

namespace impala {

enum class ModelFamily { kTabular, kLinear, kMlp };

ModelFamily parse_model_family(std::string_view text);
std::string_view model_family_name(ModelFamily family);

struct ModelSpec {
  ModelFamily family = ModelFamily::kLinear;
  int observation_dim = 1;
  int num_actions = 2;
  int hidden = 32;          // MLP only
  bool share_body = true;   // MLP only

  void validate() const;
};

/// Flat parameter blocks. The flattened order used by gradients and the
/// optimizer is shared_body, theta, omega.
struct ModelParams {
  std::vector<double> theta;        // value head
  std::vector<double> omega;        // policy head
  std::vector<double> shared_body;  // empty unless the MLP shares its hidden layer
  std::uint64_t version = 0;

  std::size_t size() const { return shared_body.size() + theta.size() + omega.size(); }
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct PolicyOutput {
  std::vector<double> probs;
  std::vector<double> log_probs;
  double value = 0.0;
};

/// Per-step gradient triple, each with the flattened parameter dimension.
struct StepGradients {
  std::vector<double> log_policy;  // d log(pi(a|x) [+ eps])
  std::vector<double> value;       // d V(x)
  std::vector<double> entropy;     // d H(pi(.|x))
};

/// Numerically stable softmax; returns probs and log-probs.
void softmax(std::span<const double> logits, std::span<double> probs, std::span<double> log_probs);

class Model {
 public:
  explicit Model(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  std::size_t num_params() const;

  /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
  ModelParams init(std::uint64_t seed) const;

  // Throws std::invalid_argument on a shape mismatch.
  PolicyOutput forward(const ModelParams& params, std::span<const double> observation) const;

  /// Dynamic batching: evaluates `count` observations stored row-major.
  void forward_batch(const ModelParams& params, std::span<const double> observations, std::size_t count,
                     std::span<double> probs, std::span<double> values) const;

  /// Backpropagates the three per-step quantities through the model.
  StepGradients step_gradients(const ModelParams& params, std::span<const double> observation,
                               int action, double log_epsilon) const;

 private:
  void check(const ModelParams& params, std::span<const double> observation) const;

  // Returns logits and value; fills hidden activations for the MLP heads.
  void evaluate(const ModelParams& params, std::span<const double> observation,
                std::span<double> logits, double& value, std::vector<double>& hidden_policy,
                std::vector<double>& hidden_value) const;

  // Accumulates d(objective)/d(params) given d/dlogits and d/dvalue.
  void backward(const ModelParams& params, std::span<const double> observation,
                std::span<const double> d_logits, double d_value,
                const std::vector<double>& hidden_policy, const std::vector<double>& hidden_value,
                std::span<double> grad) const;

  ModelSpec spec_;
};

/// Observations and actions of one unroll alongside its V-trace inputs.
struct UnrollObservations {
  std::vector<std::vector<double>> observations;  // n (+1 optional bootstrap)
  std::vector<int> actions;                       // n
};

/// Ascent direction for one unroll: per-step gradients from the model,
/// combined through update_directions. Uses log(pi + eps) under the epsilon
/// correction. Throws std::domain_error naming the step on a non-finite gradient.
std::vector<double> model_gradients(const Model& model, const ModelParams& params,
                                    const UnrollObservations& unroll, const VTraceOutput& vtrace_out,
                                    const LossWeights& weights, const CorrectionVariant& variant);

}  // namespace impala
