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

#include "impala/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace impala::tabular {

namespace {

constexpr double kRowTol = 1e-12;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_rows(const std::vector<double>& data, std::size_t rows, std::size_t width,
                const char* what) {
  for (std::size_t i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double p = data[i * width + j];
      require(p >= 0.0 && std::isfinite(p), what);
      sum += p;
    }
    require(std::abs(sum - 1.0) <= kRowTol, what);
  }
}

// Expected single-step quantities under the behavior policy, with the
// truncated ratios folded into mu so that mu = 0 never divides:
//   rho_mass(x, a) = mu * min(rho_bar, pi/mu) = min(rho_bar mu, pi)
//   c_mass(x, a)   = mu * lambda min(c_bar, pi/mu)
struct TraceMasses {
  Eigen::MatrixXd rho_mass;  // S x A
  Eigen::MatrixXd c_mass;    // S x A
  Eigen::MatrixXd trace_transition;  // S x S: sum_a c_mass(x, a) p(y | x, a)
};

TraceMasses trace_masses(const TabularMDP& mdp, const TabularPolicy& target,
                         const TabularPolicy& behavior, const VTraceConfig& config) {
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  TraceMasses m{Eigen::MatrixXd(S, A), Eigen::MatrixXd(S, A), Eigen::MatrixXd::Zero(S, S)};
  for (int x = 0; x < S; ++x) {
    for (int a = 0; a < A; ++a) {
      const double mu = behavior(x, a);
      const double pi = target(x, a);
      m.rho_mass(x, a) = std::min(config.rho_bar * mu, pi);
      m.c_mass(x, a) = config.lambda * std::min(config.c_bar * mu, pi);
      const double* row = mdp.row(x, a);
      for (int y = 0; y < S; ++y) m.trace_transition(x, y) += m.c_mass(x, a) * row[y];
    }
  }
  return m;
}

// sum_{t<H} gamma^t M^t g
Eigen::VectorXd discounted_trace_sum(const Eigen::MatrixXd& trace_transition,
                                     const Eigen::VectorXd& g, double gamma, int horizon) {
  Eigen::VectorXd term = g;
  Eigen::VectorXd acc = g;
  for (int t = 1; t < horizon; ++t) {
    term = gamma * (trace_transition * term);
    acc += term;
  }
  return acc;
}

void check_pair(const TabularMDP& mdp, const TabularPolicy& target, const TabularPolicy& behavior) {
  mdp.validate();
  target.validate();
  behavior.validate();
  require(target.num_states == mdp.num_states && target.num_actions == mdp.num_actions,
          "target policy shape does not match the MDP");
  require(behavior.num_states == mdp.num_states && behavior.num_actions == mdp.num_actions,
          "behavior policy shape does not match the MDP");
}

std::vector<double> dirichlet_rows(int rows, int width, std::mt19937_64& rng) {
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> out(static_cast<std::size_t>(rows) * width);
  for (int i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (int j = 0; j < width; ++j) {
      const double e = expo(rng);
      out[static_cast<std::size_t>(i) * width + j] = e;
      sum += e;
    }
    for (int j = 0; j < width; ++j) out[static_cast<std::size_t>(i) * width + j] /= sum;
  }
  return out;
}

struct Welford {
  std::int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double stderr_of_mean() const {
    if (n < 2) return 0.0;
    return std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n));
  }
};

bool within(double mean, double expected, double se, double z) {
  if (se == 0.0) return std::abs(mean - expected) <= 1e-10 * (1.0 + std::abs(expected));
  return std::abs(mean - expected) <= z * se;
}

}  // namespace

void TabularMDP::validate() const {
  require(num_states >= 1 && num_actions >= 1, "MDP needs at least one state and action");
  require(gamma >= 0.0 && gamma < 1.0, "MDP discount must lie in [0,1)");
  const std::size_t sa = static_cast<std::size_t>(num_states) * num_actions;
  require(transition.size() == sa * num_states, "transition tensor has the wrong size");
  require(reward.size() == sa, "reward table has the wrong size");
  check_rows(transition, sa, num_states, "transition rows must be stochastic");
  require(std::all_of(reward.begin(), reward.end(), [](double r) { return std::isfinite(r); }),
          "rewards must be finite");
}

TabularPolicy TabularPolicy::uniform(int num_states, int num_actions) {
  return TabularPolicy{num_states, num_actions,
                       std::vector<double>(static_cast<std::size_t>(num_states) * num_actions,
                                           1.0 / num_actions)};
}

void TabularPolicy::validate() const {
  require(num_states >= 1 && num_actions >= 1, "policy needs at least one state and action");
  require(probs.size() == static_cast<std::size_t>(num_states) * num_actions,
          "policy table has the wrong size");
  check_rows(probs, num_states, num_actions, "policy rows must be stochastic");
}

TabularPolicy pi_rho_bar(const TabularPolicy& target, const TabularPolicy& behavior, double rho_bar) {
  target.validate();
  behavior.validate();
  require(target.num_states == behavior.num_states && target.num_actions == behavior.num_actions,
          "policy shapes differ");
  require(rho_bar > 0.0, "rho_bar must be > 0");
  TabularPolicy out = target;
  for (int x = 0; x < target.num_states; ++x) {
    double norm = 0.0;
    for (int a = 0; a < target.num_actions; ++a) {
      const double m = std::min(rho_bar * behavior(x, a), target(x, a));
      out.at(x, a) = m;
      norm += m;
    }
    if (!(norm > 0.0)) {
      throw std::invalid_argument("pi_rho_bar: zero normalizer at state " + std::to_string(x) +
                                  " (target and behavior have disjoint support)");
    }
    for (int a = 0; a < target.num_actions; ++a) out.at(x, a) /= norm;
  }
  return out;
}

ValueFunction policy_value(const TabularMDP& mdp, const TabularPolicy& policy) {
  mdp.validate();
  policy.validate();
  const int S = mdp.num_states;
  Eigen::MatrixXd system = Eigen::MatrixXd::Identity(S, S);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(S);
  for (int x = 0; x < S; ++x) {
    for (int a = 0; a < mdp.num_actions; ++a) {
      const double pa = policy(x, a);
      if (pa == 0.0) continue;
      rhs(x) += pa * mdp.r(x, a);
      const double* row = mdp.row(x, a);
      for (int y = 0; y < S; ++y) system(x, y) -= mdp.gamma * pa * row[y];
    }
  }
  return system.partialPivLu().solve(rhs);
}

Eigen::MatrixXd action_values(const TabularMDP& mdp, const ValueFunction& v) {
  Eigen::MatrixXd q(mdp.num_states, mdp.num_actions);
  for (int x = 0; x < mdp.num_states; ++x) {
    for (int a = 0; a < mdp.num_actions; ++a) {
      const double* row = mdp.row(x, a);
      double next = 0.0;
      for (int y = 0; y < mdp.num_states; ++y) next += row[y] * v(y);
      q(x, a) = mdp.r(x, a) + mdp.gamma * next;
    }
  }
  return q;
}

int default_horizon(const TabularMDP& mdp, double tol) {
  const auto [lo, hi] = std::minmax_element(mdp.reward.begin(), mdp.reward.end());
  const double span = std::max(*hi - *lo, std::max(std::abs(*hi), std::abs(*lo)));
  if (mdp.gamma == 0.0 || span == 0.0) return 1;
  const double h = std::log(tol * (1.0 - mdp.gamma) / span) / std::log(mdp.gamma);
  return std::max(1, static_cast<int>(std::ceil(h)));
}

ValueFunction apply_vtrace_operator(const TabularMDP& mdp, const ValueFunction& v,
                                    const TabularPolicy& target, const TabularPolicy& behavior,
                                    const VTraceConfig& config, int horizon) {
  require(horizon > 0, "horizon must be positive");
  check_pair(mdp, target, behavior);
  require(v.size() == mdp.num_states, "value function has the wrong size");
  const TraceMasses m = trace_masses(mdp, target, behavior, config);
  const Eigen::MatrixXd q = action_values(mdp, v);
  // g(x) = E_mu[rho (r + gamma V(y) - V(x)) | x]
  Eigen::VectorXd g(mdp.num_states);
  for (int x = 0; x < mdp.num_states; ++x) {
    double sum = 0.0;
    for (int a = 0; a < mdp.num_actions; ++a) sum += m.rho_mass(x, a) * (q(x, a) - v(x));
    g(x) = sum;
  }
  return v + discounted_trace_sum(m.trace_transition, g, mdp.gamma, horizon);
}

ContractionReport compute_eta(const TabularMDP& mdp, const TabularPolicy& target,
                              const TabularPolicy& behavior, const VTraceConfig& config, int horizon) {
  require(horizon > 0, "horizon must be positive");
  check_pair(mdp, target, behavior);
  const TraceMasses m = trace_masses(mdp, target, behavior, config);
  const Eigen::VectorXd h = m.rho_mass.rowwise().sum();  // E_mu[rho_0 | x]
  const double gamma = mdp.gamma;

  ContractionReport report;
  report.beta = h.minCoeff();
  report.eta_per_state.resize(mdp.num_states);
  if (gamma == 0.0) {
    for (int x = 0; x < mdp.num_states; ++x) report.eta_per_state[x] = 1.0 - h(x);
    report.tail_bound = 0.0;
  } else {
    // E_mu[sum_t gamma^t (c_0..c_{t-2}) rho_{t-1}] = 1 + gamma sum_k gamma^k (M^k h)
    const Eigen::VectorXd weighted = discounted_trace_sum(m.trace_transition, h, gamma, horizon);
    for (int x = 0; x < mdp.num_states; ++x) {
      const double sum = 1.0 + gamma * weighted(x);
      report.eta_per_state[x] = 1.0 / gamma - (1.0 / gamma - 1.0) * sum;
    }
    // Omitted terms are bounded by (1/gamma - 1) gamma sum_{k>=H} gamma^k.
    report.tail_bound = std::pow(gamma, horizon);
  }
  report.eta_bound = *std::max_element(report.eta_per_state.begin(), report.eta_per_state.end());
  report.horizon_sufficient = report.tail_bound <= 1e-10;
  const double cap = 1.0 - (1.0 - gamma) * report.beta;
  if (report.eta_bound > cap + 1e-12 + report.tail_bound) {
    throw std::logic_error("eta bound exceeds 1 - (1 - gamma) beta; are the clip levels valid?");
  }
  return report;
}

void observe_contraction(ContractionReport& report, const TabularMDP& mdp,
                         const TabularPolicy& target, const TabularPolicy& behavior,
                         const VTraceConfig& config, int horizon, int pairs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  const int S = mdp.num_states;
  for (int i = 0; i < pairs; ++i) {
    ValueFunction v1(S), v2(S);
    const double s1 = scale(rng);
    const double s2 = scale(rng);
    for (int x = 0; x < S; ++x) {
      v1(x) = s1 * unit(rng);
      v2(x) = s2 * unit(rng);
    }
    const double denom = sup_norm(v1 - v2);
    if (denom == 0.0) continue;
    const ValueFunction r1 = apply_vtrace_operator(mdp, v1, target, behavior, config, horizon);
    const ValueFunction r2 = apply_vtrace_operator(mdp, v2, target, behavior, config, horizon);
    report.observed_ratios.push_back(sup_norm(r1 - r2) / denom);
  }
}

FixedPointResult iterate_vtrace_operator(const TabularMDP& mdp, const TabularPolicy& target,
                                         const TabularPolicy& behavior, const VTraceConfig& config,
                                         int horizon, const ValueFunction& start, double tol,
                                         int max_iterations) {
  FixedPointResult result{start, 0, 0.0};
  for (int i = 0; i < max_iterations; ++i) {
    ValueFunction next = apply_vtrace_operator(mdp, result.value, target, behavior, config, horizon);
    result.last_change = sup_norm(next - result.value);
    result.value = std::move(next);
    result.iterations = i + 1;
    if (result.last_change <= tol) break;
  }
  return result;
}

ValueFunction online_vtrace(const TabularMDP& mdp, const TabularPolicy& target,
                            const TabularPolicy& behavior, const VTraceConfig& config,
                            const OnlineOptions& options) {
  check_pair(mdp, target, behavior);
  require(options.trajectory_length >= 1, "trajectory length must be >= 1");
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const int L = options.trajectory_length;
  const double gamma = mdp.gamma;

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> start_state(0, S - 1);

  ValueFunction v = ValueFunction::Zero(S);
  std::vector<int> states(L + 1);
  std::vector<double> rewards(L), rho(L), cs(L), err(L);
  std::int64_t k = 0;
  for (std::int64_t traj = 0; traj < options.num_trajectories; ++traj) {
    states[0] = start_state(rng);
    for (int t = 0; t < L; ++t) {
      const int x = states[t];
      const int a = sample_index(&behavior.probs[static_cast<std::size_t>(x) * A], A, unit(rng));
      const double ratio = target(x, a) / behavior(x, a);
      rho[t] = std::min(config.rho_bar, ratio);
      cs[t] = config.lambda * std::min(config.c_bar, ratio);
      rewards[t] = mdp.r(x, a);
      states[t + 1] = sample_index(mdp.row(x, a), S, unit(rng));
    }
    // v_s - V(x_s) under the frozen table, by the same reverse recursion.
    double acc = 0.0;
    for (int t = L; t-- > 0;) {
      const double delta = rho[t] * (rewards[t] + gamma * v(states[t + 1]) - v(states[t]));
      acc = delta + gamma * cs[t] * acc;
      err[t] = acc;
    }
    for (int t = 0; t < L; ++t) v(states[t]) += options.schedule(k++) * err[t];
  }
  return v;
}

QsCheckReport qs_unbiasedness_check(const TabularMDP& mdp, const TabularPolicy& target,
                                    const TabularPolicy& behavior, const VTraceConfig& config,
                                    int num_samples, std::uint64_t seed, double z) {
  check_pair(mdp, target, behavior);
  require(num_samples >= 2, "need at least two samples");
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  const int n = config.unroll_length;
  const double gamma = mdp.gamma;

  const ValueFunction v = policy_value(mdp, pi_rho_bar(target, behavior, config.rho_bar));
  const Eigen::MatrixXd q = action_values(mdp, v);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> states(n + 1);
  std::vector<double> rewards(n), rho(n), cs(n), acc_at(n + 1);

  QsCheckReport report;
  report.passed = true;
  for (int x = 0; x < S; ++x) {
    for (int a = 0; a < A; ++a) {
      if (behavior(x, a) == 0.0) continue;
      QsCheckRow row;
      row.state = x;
      row.action = a;
      const double ratio0 = target(x, a) / behavior(x, a);
      row.rho = std::min(config.rho_bar, ratio0);
      row.q_expected = q(x, a);
      row.v_expected = (1.0 - row.rho) * v(x) + row.rho * q(x, a);

      Welford q_stats, v_stats;
      for (int i = 0; i < num_samples; ++i) {
        states[0] = x;
        for (int t = 0; t < n; ++t) {
          const int xs = states[t];
          const int as = t == 0 ? a : sample_index(&behavior.probs[static_cast<std::size_t>(xs) * A], A, unit(rng));
          const double r = t == 0 ? ratio0 : target(xs, as) / behavior(xs, as);
          rho[t] = std::min(config.rho_bar, r);
          cs[t] = config.lambda * std::min(config.c_bar, r);
          rewards[t] = mdp.r(xs, as);
          states[t + 1] = sample_index(mdp.row(xs, as), S, unit(rng));
        }
        acc_at[n] = 0.0;
        for (int t = n; t-- > 0;) {
          const double delta = rho[t] * (rewards[t] + gamma * v(states[t + 1]) - v(states[t]));
          acc_at[t] = delta + gamma * cs[t] * acc_at[t + 1];
        }
        const double v_s = v(states[0]) + acc_at[0];
        const double v_next = v(states[1]) + acc_at[1];
        q_stats.add(rewards[0] + gamma * v_next);
        v_stats.add(v_s);
      }
      row.q_mean = q_stats.mean;
      row.q_stderr = q_stats.stderr_of_mean();
      row.v_mean = v_stats.mean;
      row.v_stderr = v_stats.stderr_of_mean();
      row.q_ok = within(row.q_mean, row.q_expected, row.q_stderr, z);
      row.v_ok = within(row.v_mean, row.v_expected, row.v_stderr, z);
      report.passed = report.passed && row.q_ok && row.v_ok;
      report.rows.push_back(row);
    }
  }
  return report;
}

TabularMDP random_mdp(int num_states, int num_actions, double gamma, std::uint64_t seed) {
  require(num_states >= 1 && num_actions >= 1, "random_mdp needs positive sizes");
  std::mt19937_64 rng(seed);
  TabularMDP mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.gamma = gamma;
  mdp.transition = dirichlet_rows(num_states * num_actions, num_states, rng);
  std::uniform_real_distribution<double> reward(-1.0, 1.0);
  mdp.reward.resize(static_cast<std::size_t>(num_states) * num_actions);
  for (double& r : mdp.reward) r = reward(rng);
  return mdp;
}

TabularPolicy random_policy(int num_states, int num_actions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return TabularPolicy{num_states, num_actions, dirichlet_rows(num_states, num_actions, rng)};
}

double sup_norm(const ValueFunction& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

int sample_index(const double* probs, int count, double u) {
  double cum = 0.0;
  int last_positive = count - 1;
  for (int i = 0; i < count; ++i) {
    if (probs[i] <= 0.0) continue;
    cum += probs[i];
    last_positive = i;
    if (u < cum) return i;
  }
  return last_positive;
}

}  // namespace impala::tabular
