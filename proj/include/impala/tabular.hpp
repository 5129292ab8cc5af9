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

// Exact finite-MDP machinery for checking the V-trace operator: its fixed
// point, its contraction modulus, online convergence, and the bias of the
// q_s versus v_s advantage targets.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "impala/vtrace.hpp"

namespace impala::tabular {

using ValueFunction = Eigen::VectorXd;

struct TabularMDP {
  int num_states = 0;
  int num_actions = 0;
  std::vector<double> transition;  // [x][a][y], row-major
  std::vector<double> reward;      // [x][a]
  double gamma = 0.9;

  double p(int x, int a, int y) const {
    return transition[(static_cast<std::size_t>(x) * num_actions + a) * num_states + y];
  }
  double r(int x, int a) const { return reward[static_cast<std::size_t>(x) * num_actions + a]; }
  const double* row(int x, int a) const {
    return &transition[(static_cast<std::size_t>(x) * num_actions + a) * num_states];
  }

  void validate() const;
};

struct TabularPolicy {
  int num_states = 0;
  int num_actions = 0;
  std::vector<double> probs;  // [x][a]

  double operator()(int x, int a) const { return probs[static_cast<std::size_t>(x) * num_actions + a]; }
  double& at(int x, int a) { return probs[static_cast<std::size_t>(x) * num_actions + a]; }

  static TabularPolicy uniform(int num_states, int num_actions);
  void validate() const;
};

struct ContractionReport {
  double eta_bound = 0.0;  // max over start states of the contraction coefficient
  double beta = 0.0;       // min over states of E_mu[rho_0 | x]
  std::vector<double> eta_per_state;
  std::vector<double> observed_ratios;
  double tail_bound = 0.0;  // truncation error of the horizon-limited sums
  bool horizon_sufficient = true;
};

/// pi_rho(a|x) = min(rho_bar mu, pi) / sum_b min(rho_bar mu, pi).
TabularPolicy pi_rho_bar(const TabularPolicy& target, const TabularPolicy& behavior, double rho_bar);

/// Exact V^pi from a dense LU solve of (I - gamma P_pi) V = r_pi.
ValueFunction policy_value(const TabularMDP& mdp, const TabularPolicy& policy);

/// Q(x, a) = r(x, a) + gamma sum_y p(y|x,a) V(y), as an S x A matrix.
Eigen::MatrixXd action_values(const TabularMDP& mdp, const ValueFunction& v);

/// Smallest H with gamma^H * r_span / (1 - gamma) <= tol.
int default_horizon(const TabularMDP& mdp, double tol = 1e-13);

/// R V(x) = V(x) + E_mu[ sum_{t<H} gamma^t (c_0..c_{t-1}) rho_t (r_t + gamma V(x_{t+1}) - V(x_t)) ]
/// evaluated exactly by propagating the trace-weighted state distribution.
ValueFunction apply_vtrace_operator(const TabularMDP& mdp, const ValueFunction& v,
                                    const TabularPolicy& target, const TabularPolicy& behavior,
                                    const VTraceConfig& config, int horizon);

ContractionReport compute_eta(const TabularMDP& mdp, const TabularPolicy& target,
                              const TabularPolicy& behavior, const VTraceConfig& config, int horizon);

/// Appends sup-norm ratios ||R v1 - R v2|| / ||v1 - v2|| for `pairs` random value pairs.
void observe_contraction(ContractionReport& report, const TabularMDP& mdp,
                         const TabularPolicy& target, const TabularPolicy& behavior,
                         const VTraceConfig& config, int horizon, int pairs, std::uint64_t seed);

struct FixedPointResult {
  ValueFunction value;
  int iterations = 0;
  double last_change = 0.0;
};

/// Iterates R from `start` until the sup-norm change drops below `tol`.
FixedPointResult iterate_vtrace_operator(const TabularMDP& mdp, const TabularPolicy& target,
                                         const TabularPolicy& behavior, const VTraceConfig& config,
                                         int horizon, const ValueFunction& start, double tol,
                                         int max_iterations);

/// alpha_k = scale / (offset + k), k counting individual state updates.
struct StepSchedule {
  double scale = 100.0;
  double offset = 1000.0;
  double operator()(std::int64_t k) const { return scale / (offset + static_cast<double>(k)); }
};

struct OnlineOptions {
  StepSchedule schedule;
  int trajectory_length = 20;
  std::int64_t num_trajectories = 10'000;
  std::uint64_t seed = 0;
};

/// Tabular online V-trace along trajectories sampled from the behavior policy,
/// each started from a uniformly drawn state. Each trajectory is processed with
/// the value table frozen at its start; the sum over t >= s is truncated at the
/// trajectory end with a bootstrap on V(x_L).
ValueFunction online_vtrace(const TabularMDP& mdp, const TabularPolicy& target,
                            const TabularPolicy& behavior, const VTraceConfig& config,
                            const OnlineOptions& options);

struct QsCheckRow {
  int state = 0;
  int action = 0;
  double rho = 0.0;
  double q_expected = 0.0;
  double q_mean = 0.0;
  double q_stderr = 0.0;
  double v_expected = 0.0;  // (1 - rho) V(x) + rho Q(x, a)
  double v_mean = 0.0;
  double v_stderr = 0.0;
  bool q_ok = false;
  bool v_ok = false;
};

struct QsCheckReport {
  std::vector<QsCheckRow> rows;
  bool passed = false;
};

/// Monte-Carlo check of E[q_s | x, a] = Q^{pi_rho}(x, a) and of the v_s mixture
/// identity, with V preset to the exact V^{pi_rho}. Each (x, a) pair gets
/// `num_samples` continuations of `unroll_length` steps; a check passes within
/// `z` standard errors (or to 1e-10 when the sample variance is zero).
QsCheckReport qs_unbiasedness_check(const TabularMDP& mdp, const TabularPolicy& target,
                                    const TabularPolicy& behavior, const VTraceConfig& config,
                                    int num_samples, std::uint64_t seed, double z = 3.0);

/// Dirichlet(1) transition rows and uniform[-1, 1] rewards.
TabularMDP random_mdp(int num_states, int num_actions, double gamma, std::uint64_t seed);

/// Dirichlet(1) action distributions per state.
TabularPolicy random_policy(int num_states, int num_actions, std::uint64_t seed);

double sup_norm(const ValueFunction& v);

// Inverse-CDF draw over zero-or-positive weights; rounding slack falls on the
// last index with positive weight.
int sample_index(const double* probs, int count, double u);

}  // namespace impala::tabular
