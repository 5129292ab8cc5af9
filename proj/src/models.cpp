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

#include "impala/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "impala/kernels.hpp"

namespace impala {

namespace {

// Where each head reads its features from.
enum class Features { kRaw, kSharedHidden, kOwnHidden };

// Offsets into the flattened [body | theta | omega] vector.
struct Layout {
  std::size_t d = 0;  // observation dim
  std::size_t h = 0;  // hidden width (0 for non-MLP)
  std::size_t A = 0;
  bool head_bias = true;
  Features value_features = Features::kRaw;
  Features policy_features = Features::kRaw;

  std::size_t body_size = 0;
  std::size_t theta_size = 0;
  std::size_t omega_size = 0;

  // Hidden layer blocks: h x (d + 1), row-major, bias last in each row.
  std::size_t hidden_block() const { return h * (d + 1); }
  std::size_t value_feature_dim() const { return value_features == Features::kRaw ? d : h; }
  std::size_t policy_feature_dim() const { return policy_features == Features::kRaw ? d : h; }
  std::size_t head_stride(std::size_t features) const { return features + (head_bias ? 1 : 0); }

  std::size_t theta_offset() const { return body_size; }
  std::size_t omega_offset() const { return body_size + theta_size; }
  // Value head weights sit after the value network's own hidden block, if any.
  std::size_t value_head_offset() const {
    return theta_offset() + (value_features == Features::kOwnHidden ? hidden_block() : 0);
  }
  std::size_t policy_head_offset() const {
    return omega_offset() + (policy_features == Features::kOwnHidden ? hidden_block() : 0);
  }
  std::size_t value_hidden_offset() const {
    return value_features == Features::kSharedHidden ? 0 : theta_offset();
  }
  std::size_t policy_hidden_offset() const {
    return policy_features == Features::kSharedHidden ? 0 : omega_offset();
  }
};

Layout layout_for(const ModelSpec& spec) {
  Layout l;
  l.d = static_cast<std::size_t>(spec.observation_dim);
  l.A = static_cast<std::size_t>(spec.num_actions);
  switch (spec.family) {
    case ModelFamily::kTabular:
      l.head_bias = false;
      break;
    case ModelFamily::kLinear:
      break;
    case ModelFamily::kMlp:
      l.h = static_cast<std::size_t>(spec.hidden);
      l.value_features = spec.share_body ? Features::kSharedHidden : Features::kOwnHidden;
      l.policy_features = l.value_features;
      break;
  }
  l.body_size = l.value_features == Features::kSharedHidden ? l.hidden_block() : 0;
  l.theta_size = (l.value_features == Features::kOwnHidden ? l.hidden_block() : 0) +
                 l.head_stride(l.value_feature_dim());
  l.omega_size = (l.policy_features == Features::kOwnHidden ? l.hidden_block() : 0) +
                 l.A * l.head_stride(l.policy_feature_dim());
  return l;
}

// out[j] = tanh(W_j . x + b_j)
void hidden_forward(std::span<const double> w, std::span<const double> x, std::size_t h,
                    std::vector<double>& out) {
  const auto& k = kernels::active();
  const std::size_t stride = x.size() + 1;
  out.resize(h);
  for (std::size_t j = 0; j < h; ++j) {
    const auto row = w.subspan(j * stride, stride);
    out[j] = std::tanh(k.dot(row.first(x.size()), x) + row[x.size()]);
  }
}

double head_forward(std::span<const double> w, std::span<const double> features, bool bias) {
  double s = kernels::active().dot(w.first(features.size()), features);
  if (bias) s += w[features.size()];
  return s;
}

}  // namespace

ModelFamily parse_model_family(std::string_view text) {
  if (text == "tabular") return ModelFamily::kTabular;
  if (text == "linear") return ModelFamily::kLinear;
  if (text == "mlp") return ModelFamily::kMlp;
  throw std::invalid_argument("unknown model family: " + std::string(text));
}

std::string_view model_family_name(ModelFamily family) {
  switch (family) {
    case ModelFamily::kTabular:
      return "tabular";
    case ModelFamily::kLinear:
      return "linear";
    case ModelFamily::kMlp:
      return "mlp";
  }
  return "unknown";
}

void ModelSpec::validate() const {
  if (observation_dim < 1) throw std::invalid_argument("observation_dim must be >= 1");
  if (num_actions < 1) throw std::invalid_argument("num_actions must be >= 1");
  if (family == ModelFamily::kMlp && hidden < 1) throw std::invalid_argument("hidden must be >= 1");
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  flat.insert(flat.end(), shared_body.begin(), shared_body.end());
  flat.insert(flat.end(), theta.begin(), theta.end());
  flat.insert(flat.end(), omega.begin(), omega.end());
  return flat;
}

void ModelParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != size()) throw std::invalid_argument("flat parameter size mismatch");
  auto it = flat.begin();
  std::copy(it, it + shared_body.size(), shared_body.begin());
  it += static_cast<std::ptrdiff_t>(shared_body.size());
  std::copy(it, it + theta.size(), theta.begin());
  it += static_cast<std::ptrdiff_t>(theta.size());
  std::copy(it, it + omega.size(), omega.begin());
}

void softmax(std::span<const double> logits, std::span<double> probs, std::span<double> log_probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    log_probs[i] = logits[i] - log_z;
    probs[i] = std::exp(log_probs[i]);
  }
}

Model::Model(ModelSpec spec) : spec_(spec) { spec_.validate(); }

std::size_t Model::num_params() const {
  const Layout l = layout_for(spec_);
  return l.body_size + l.theta_size + l.omega_size;
}

ModelParams Model::init(std::uint64_t seed) const {
  const Layout l = layout_for(spec_);
  std::mt19937_64 rng(seed);
  auto fill = [&](std::vector<double>& dst, std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) dst[offset + i] = u(rng);
  };
  ModelParams p;
  p.shared_body.assign(l.body_size, 0.0);
  p.theta.assign(l.theta_size, 0.0);
  p.omega.assign(l.omega_size, 0.0);
  if (l.body_size) fill(p.shared_body, 0, l.body_size, l.d + 1);
  std::size_t off = 0;
  if (l.value_features == Features::kOwnHidden) {
    fill(p.theta, 0, l.hidden_block(), l.d + 1);
    off = l.hidden_block();
  }
  fill(p.theta, off, l.theta_size - off, l.head_stride(l.value_feature_dim()));
  off = 0;
  if (l.policy_features == Features::kOwnHidden) {
    fill(p.omega, 0, l.hidden_block(), l.d + 1);
    off = l.hidden_block();
  }
  fill(p.omega, off, l.omega_size - off, l.head_stride(l.policy_feature_dim()));
  return p;
}

void Model::check(const ModelParams& params, std::span<const double> observation) const {
  const Layout l = layout_for(spec_);
  if (observation.size() != l.d) {
    throw std::invalid_argument("observation has dimension " + std::to_string(observation.size()) +
                                ", model expects " + std::to_string(l.d));
  }
  if (params.shared_body.size() != l.body_size || params.theta.size() != l.theta_size ||
      params.omega.size() != l.omega_size) {
    throw std::invalid_argument("parameter blocks do not match the model layout");
  }
}

void Model::evaluate(const ModelParams& params, std::span<const double> observation,
                     std::span<double> logits, double& value, std::vector<double>& hidden_policy,
                     std::vector<double>& hidden_value) const {
  const Layout l = layout_for(spec_);
  auto block = [&](Features f, bool value_side) -> std::span<const double> {
    if (f == Features::kSharedHidden) return params.shared_body;
    return value_side ? std::span<const double>(params.theta) : std::span<const double>(params.omega);
  };

  std::span<const double> value_features = observation;
  std::span<const double> policy_features = observation;
  if (l.value_features != Features::kRaw) {
    hidden_forward(block(l.value_features, true), observation, l.h, hidden_value);
    value_features = hidden_value;
  }
  if (l.policy_features == Features::kSharedHidden) {
    hidden_policy = hidden_value;
    policy_features = hidden_policy;
  } else if (l.policy_features == Features::kOwnHidden) {
    hidden_forward(block(l.policy_features, false), observation, l.h, hidden_policy);
    policy_features = hidden_policy;
  }

  const std::size_t v_off = l.value_head_offset() - l.theta_offset();
  value = head_forward(std::span<const double>(params.theta).subspan(v_off), value_features, l.head_bias);
  const std::size_t p_off = l.policy_head_offset() - l.omega_offset();
  const std::size_t stride = l.head_stride(policy_features.size());
  for (std::size_t a = 0; a < l.A; ++a) {
    logits[a] = head_forward(std::span<const double>(params.omega).subspan(p_off + a * stride, stride),
                             policy_features, l.head_bias);
  }
}

void Model::backward(const ModelParams& params, std::span<const double> observation,
                     std::span<const double> d_logits, double d_value,
                     const std::vector<double>& hidden_policy, const std::vector<double>& hidden_value,
                     std::span<double> grad) const {
  const Layout l = layout_for(spec_);
  const auto& k = kernels::active();
  const std::span<const double> x = observation;
  // Reads `len` weights at a flattened offset from whichever block holds them.
  auto weights_at = [&](std::size_t offset, std::size_t len) -> std::span<const double> {
    if (offset < l.body_size) return std::span<const double>(params.shared_body).subspan(offset, len);
    if (offset < l.omega_offset()) return std::span<const double>(params.theta).subspan(offset - l.theta_offset(), len);
    return std::span<const double>(params.omega).subspan(offset - l.omega_offset(), len);
  };

  const std::span<const double> v_feat = l.value_features == Features::kRaw ? x : std::span<const double>(hidden_value);
  const std::span<const double> p_feat = l.policy_features == Features::kRaw ? x : std::span<const double>(hidden_policy);

  // Heads.
  std::vector<double> d_v_feat(v_feat.size(), 0.0);
  std::vector<double> d_p_feat(p_feat.size(), 0.0);
  if (d_value != 0.0) {
    const std::size_t off = l.value_head_offset();
    k.axpy(d_value, v_feat, grad.subspan(off, v_feat.size()));
    if (l.head_bias) grad[off + v_feat.size()] += d_value;
    k.axpy(d_value, weights_at(off, v_feat.size()), d_v_feat);
  }
  const std::size_t stride = l.head_stride(p_feat.size());
  for (std::size_t a = 0; a < l.A; ++a) {
    const double g = d_logits[a];
    if (g == 0.0) continue;
    const std::size_t off = l.policy_head_offset() + a * stride;
    k.axpy(g, p_feat, grad.subspan(off, p_feat.size()));
    if (l.head_bias) grad[off + p_feat.size()] += g;
    k.axpy(g, weights_at(off, p_feat.size()), d_p_feat);
  }

  // Hidden layers: d pre-activation = d feature * (1 - h^2).
  auto hidden_backward = [&](std::size_t offset, const std::vector<double>& h,
                             const std::vector<double>& d_feat) {
    const std::size_t row = l.d + 1;
    for (std::size_t j = 0; j < l.h; ++j) {
      const double d_pre = d_feat[j] * (1.0 - h[j] * h[j]);
      if (d_pre == 0.0) continue;
      k.axpy(d_pre, x, grad.subspan(offset + j * row, l.d));
      grad[offset + j * row + l.d] += d_pre;
    }
  };
  if (l.value_features == Features::kSharedHidden) {
    std::vector<double> d_shared = d_v_feat;
    k.axpy(1.0, d_p_feat, d_shared);
    hidden_backward(0, hidden_value, d_shared);
  } else {
    if (l.value_features == Features::kOwnHidden) hidden_backward(l.value_hidden_offset(), hidden_value, d_v_feat);
    if (l.policy_features == Features::kOwnHidden) hidden_backward(l.policy_hidden_offset(), hidden_policy, d_p_feat);
  }
}

PolicyOutput Model::forward(const ModelParams& params, std::span<const double> observation) const {
  check(params, observation);
  const std::size_t A = static_cast<std::size_t>(spec_.num_actions);
  std::vector<double> logits(A), hp, hv;
  PolicyOutput out;
  evaluate(params, observation, logits, out.value, hp, hv);
  out.probs.resize(A);
  out.log_probs.resize(A);
  softmax(logits, out.probs, out.log_probs);
  return out;
}

void Model::forward_batch(const ModelParams& params, std::span<const double> observations,
                          std::size_t count, std::span<double> probs, std::span<double> values) const {
  const std::size_t d = static_cast<std::size_t>(spec_.observation_dim);
  const std::size_t A = static_cast<std::size_t>(spec_.num_actions);
  if (observations.size() != count * d || probs.size() != count * A || values.size() != count) {
    throw std::invalid_argument("forward_batch: buffer sizes do not match count");
  }
  if (count == 0) return;
  check(params, observations.first(d));
  std::vector<double> logits(A), log_probs(A), hp, hv;
  for (std::size_t i = 0; i < count; ++i) {
    evaluate(params, observations.subspan(i * d, d), logits, values[i], hp, hv);
    softmax(logits, probs.subspan(i * A, A), log_probs);
  }
}

StepGradients Model::step_gradients(const ModelParams& params, std::span<const double> observation,
                                    int action, double log_epsilon) const {
  check(params, observation);
  const std::size_t A = static_cast<std::size_t>(spec_.num_actions);
  if (action < 0 || static_cast<std::size_t>(action) >= A) {
    throw std::invalid_argument("action out of range");
  }
  std::vector<double> logits(A), probs(A), log_probs(A), hp, hv;
  double value = 0.0;
  evaluate(params, observation, logits, value, hp, hv);
  softmax(logits, probs, log_probs);

  const std::size_t P = num_params();
  StepGradients g{std::vector<double>(P, 0.0), std::vector<double>(P, 0.0), std::vector<double>(P, 0.0)};

  // d log(pi_a + eps) / d logits = pi_a / (pi_a + eps) * (e_a - pi)
  const double pa = probs[static_cast<std::size_t>(action)];
  const double scale = log_epsilon > 0.0 ? pa / (pa + log_epsilon) : 1.0;
  std::vector<double> d_logits(A);
  for (std::size_t j = 0; j < A; ++j) {
    d_logits[j] = scale * ((j == static_cast<std::size_t>(action) ? 1.0 : 0.0) - probs[j]);
  }
  backward(params, observation, d_logits, 0.0, hp, hv, g.log_policy);

  std::fill(d_logits.begin(), d_logits.end(), 0.0);
  backward(params, observation, d_logits, 1.0, hp, hv, g.value);

  // dH/dz_j = -pi_j (log pi_j + H)
  double entropy = 0.0;
  for (std::size_t j = 0; j < A; ++j) entropy -= probs[j] * log_probs[j];
  for (std::size_t j = 0; j < A; ++j) d_logits[j] = -probs[j] * (log_probs[j] + entropy);
  backward(params, observation, d_logits, 0.0, hp, hv, g.entropy);
  return g;
}

std::vector<double> model_gradients(const Model& model, const ModelParams& params,
                                    const UnrollObservations& unroll, const VTraceOutput& vtrace_out,
                                    const LossWeights& weights, const CorrectionVariant& variant) {
  const std::size_t n = unroll.actions.size();
  if (unroll.observations.size() < n || vtrace_out.vs.size() != n) {
    throw std::invalid_argument("model_gradients: unroll and targets disagree on length");
  }
  const double eps = variant.kind() == CorrectionVariant::Kind::kEpsilonCorrection
                         ? variant.eps()
                         : vtrace_out.log_epsilon;
  std::vector<std::vector<double>> log_policy(n), value(n), entropy(n);
  std::vector<double> values(n);
  for (std::size_t s = 0; s < n; ++s) {
    StepGradients g = model.step_gradients(params, unroll.observations[s], unroll.actions[s], eps);
    for (const auto* v : {&g.log_policy, &g.value, &g.entropy}) {
      if (!std::all_of(v->begin(), v->end(), [](double x) { return std::isfinite(x); })) {
        throw std::domain_error("non-finite gradient at step " + std::to_string(s));
      }
    }
    values[s] = model.forward(params, unroll.observations[s]).value;
    log_policy[s] = std::move(g.log_policy);
    value[s] = std::move(g.value);
    entropy[s] = std::move(g.entropy);
  }
  return update_directions(vtrace_out, values, log_policy, value, entropy, weights);
}

}  // namespace impala
