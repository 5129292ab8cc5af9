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

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the library's V-trace or gradient code.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "impala/models.hpp"
#include "impala/tabular.hpp"
#include "impala/vtrace.hpp"

namespace oracle {

struct Unroll {
  std::vector<double> rewards, values, pi, mu;
  std::vector<std::uint8_t> terminals;
};

inline double discount(const Unroll& u, double gamma, std::size_t t) {
  return (!u.terminals.empty() && u.terminals[t]) ? 0.0 : gamma;
}

// v_s = V(x_s) + sum_{t>=s} (prod_{i<t} gamma_i c_i) rho_t (r_t + gamma_t V(x_{t+1}) - V(x_t)),
// evaluated term by term with no recursion.
inline std::vector<double> vtrace_direct_sum(const Unroll& u, double gamma, double rho_bar, double c_bar,
                                             double lambda = 1.0) {
  const std::size_t n = u.rewards.size();
  std::vector<double> vs(n);
  for (std::size_t s = 0; s < n; ++s) {
    double total = u.values[s];
    for (std::size_t t = s; t < n; ++t) {
      double weight = 1.0;
      for (std::size_t i = s; i < t; ++i) {
        weight *= discount(u, gamma, i) * lambda * std::min(c_bar, u.pi[i] / u.mu[i]);
      }
      const double rho = std::min(rho_bar, u.pi[t] / u.mu[t]);
      total += weight * rho * (u.rewards[t] + discount(u, gamma, t) * u.values[t + 1] - u.values[t]);
    }
    vs[s] = total;
  }
  return vs;
}

// On-policy n-step Bellman target bootstrapped at the end of the unroll.
inline std::vector<double> n_step_targets(const Unroll& u, double gamma) {
  const std::size_t n = u.rewards.size();
  std::vector<double> vs(n);
  for (std::size_t s = 0; s < n; ++s) {
    double g = 0.0, k = 1.0;
    for (std::size_t t = s; t < n; ++t) {
      g += k * u.rewards[t];
      k *= discount(u, gamma, t);
    }
    vs[s] = g + k * u.values[n];
  }
  return vs;
}

inline Unroll random_unroll(std::mt19937_64& rng, std::size_t n, bool on_policy, bool with_terminals) {
  std::uniform_real_distribution<double> r(-2.0, 2.0), p(0.05, 1.0), coin(0.0, 1.0);
  Unroll u;
  for (std::size_t t = 0; t < n; ++t) {
    u.rewards.push_back(r(rng));
    u.mu.push_back(p(rng));
    u.pi.push_back(on_policy ? u.mu.back() : p(rng));
    if (with_terminals) u.terminals.push_back(coin(rng) < 0.15 ? 1 : 0);
  }
  for (std::size_t t = 0; t <= n; ++t) u.values.push_back(r(rng));
  return u;
}

inline impala::UnrollInputs to_inputs(const Unroll& u) {
  impala::UnrollInputs in;
  in.rewards = u.rewards;
  in.values = u.values;
  in.target_probs = u.pi;
  in.behavior_probs = u.mu;
  in.terminals = u.terminals;
  return in;
}

// Surrogate whose gradient the learner ascends, with v_s and A_s held fixed:
//   sum_s pw A_s log(pi(a_s|x_s) + eps) - bw/2 (v_s - V(x_s))^2 + ew H(pi(.|x_s)).
inline double surrogate(const impala::Model& model, const impala::ModelParams& params,
                        const impala::UnrollObservations& unroll, const impala::VTraceOutput& out,
                        const impala::LossWeights& w, double eps) {
  double total = 0.0;
  for (std::size_t s = 0; s < unroll.actions.size(); ++s) {
    const auto f = model.forward(params, unroll.observations[s]);
    const double pa = f.probs[static_cast<std::size_t>(unroll.actions[s])];
    const double logp = eps > 0.0 ? std::log(pa + eps) : std::log(pa);
    double entropy = 0.0;
    for (double q : f.probs) entropy -= q > 0.0 ? q * std::log(q) : 0.0;
    const double residual = out.vs[s] - f.value;
    total += w.policy_weight * out.pg_advantages[s] * logp - 0.5 * w.baseline_weight * residual * residual +
             w.entropy_weight * entropy;
  }
  return total;
}

// ---- tabular ----------------------------------------------------------------

// min(rho_bar mu, pi), renormalized per state.
inline impala::tabular::TabularPolicy pi_rho(const impala::tabular::TabularPolicy& pi,
                                              const impala::tabular::TabularPolicy& mu, double rho_bar) {
  auto out = pi;
  for (int x = 0; x < pi.num_states; ++x) {
    double z = 0.0;
    for (int a = 0; a < pi.num_actions; ++a) z += out.at(x, a) = std::min(rho_bar * mu(x, a), pi(x, a));
    for (int a = 0; a < pi.num_actions; ++a) out.at(x, a) /= z;
  }
  return out;
}

// Policy evaluation by repeated Bellman backups (no linear solve).
inline std::vector<double> evaluate(const impala::tabular::TabularMDP& m, const impala::tabular::TabularPolicy& pi) {
  std::vector<double> v(static_cast<std::size_t>(m.num_states), 0.0), next(v.size());
  for (int it = 0; it < 100'000; ++it) {
    double change = 0.0;
    for (int x = 0; x < m.num_states; ++x) {
      double total = 0.0;
      for (int a = 0; a < m.num_actions; ++a) {
        double q = m.r(x, a);
        for (int y = 0; y < m.num_states; ++y) q += m.gamma * m.p(x, a, y) * v[static_cast<std::size_t>(y)];
        total += pi(x, a) * q;
      }
      change = std::max(change, std::abs(total - v[static_cast<std::size_t>(x)]));
      next[static_cast<std::size_t>(x)] = total;
    }
    v.swap(next);
    if (change < 1e-15) break;
  }
  return v;
}

// Exact expectation of the V-trace operator, truncated at `horizon` steps.
// d carries gamma^t times the product of c's along the path, per state.
// Also returns sum_t E[gamma^t c_0..c_{t-1} rho_t] per start state in `mass`.
inline std::vector<double> vtrace_operator(const impala::tabular::TabularMDP& m,
                                           const impala::tabular::TabularPolicy& pi,
                                           const impala::tabular::TabularPolicy& mu, const std::vector<double>& v,
                                           double rho_bar, double c_bar, int horizon,
                                           std::vector<double>* mass = nullptr) {
  const int S = m.num_states, A = m.num_actions;
  std::vector<double> delta(static_cast<std::size_t>(S), 0.0), rho_mass(delta.size(), 0.0);
  std::vector<double> trans(static_cast<std::size_t>(S * S), 0.0);  // gamma sum_a mu c p
  for (int x = 0; x < S; ++x) {
    for (int a = 0; a < A; ++a) {
      const double ratio = pi(x, a) / mu(x, a);
      const double rho = std::min(rho_bar, ratio), c = std::min(c_bar, ratio);
      double td = m.r(x, a) - v[static_cast<std::size_t>(x)];
      for (int y = 0; y < S; ++y) {
        td += m.gamma * m.p(x, a, y) * v[static_cast<std::size_t>(y)];
        trans[static_cast<std::size_t>(x * S + y)] += m.gamma * mu(x, a) * c * m.p(x, a, y);
      }
      delta[static_cast<std::size_t>(x)] += mu(x, a) * rho * td;
      rho_mass[static_cast<std::size_t>(x)] += mu(x, a) * rho;
    }
  }
  std::vector<double> out(v), total_mass(static_cast<std::size_t>(S), 0.0);
  for (int x0 = 0; x0 < S; ++x0) {
    std::vector<double> d(static_cast<std::size_t>(S), 0.0), nd(d.size());
    d[static_cast<std::size_t>(x0)] = 1.0;
    for (int t = 0; t < horizon; ++t) {
      std::fill(nd.begin(), nd.end(), 0.0);
      for (int y = 0; y < S; ++y) {
        const double w = d[static_cast<std::size_t>(y)];
        if (w == 0.0) continue;
        out[static_cast<std::size_t>(x0)] += w * delta[static_cast<std::size_t>(y)];
        total_mass[static_cast<std::size_t>(x0)] += w * rho_mass[static_cast<std::size_t>(y)];
        for (int z = 0; z < S; ++z) nd[static_cast<std::size_t>(z)] += w * trans[static_cast<std::size_t>(y * S + z)];
      }
      d.swap(nd);
    }
  }
  if (mass) *mass = total_mass;
  return out;
}

// Contraction coefficient bound: max over start states of 1 - (1 - gamma) * mass.
inline double eta_bound(const impala::tabular::TabularMDP& m, const impala::tabular::TabularPolicy& pi,
                        const impala::tabular::TabularPolicy& mu, double rho_bar, double c_bar, int horizon) {
  std::vector<double> mass;
  vtrace_operator(m, pi, mu, std::vector<double>(static_cast<std::size_t>(m.num_states), 0.0), rho_bar, c_bar,
                  horizon, &mass);
  double eta = 0.0;
  for (double x : mass) eta = std::max(eta, 1.0 - (1.0 - m.gamma) * x);
  return eta;
}

inline double sup_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace oracle
