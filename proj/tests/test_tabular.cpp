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


#include <doctest.h>

#include <cmath>

#include "impala/envs.hpp"
#include "impala/tabular.hpp"

using namespace impala;
using namespace impala::tabular;

namespace {

TabularPolicy policy(int S, int A, std::vector<double> probs) {
  TabularPolicy p;
  p.num_states = S;
  p.num_actions = A;
  p.probs = std::move(probs);
  return p;
}

TabularMDP two_state_chain() {
  // a0: s0 -> s1 (r 0), s1 -> s1 (r 1); a1 mirrors a0.
  TabularMDP m;
  m.num_states = 2;
  m.num_actions = 2;
  m.gamma = 0.9;
  m.transition.assign(8, 0.0);
  m.reward.assign(4, 0.0);
  for (int a = 0; a < 2; ++a) {
    m.transition[(0 * 2 + a) * 2 + 1] = 1.0;
    m.transition[(1 * 2 + a) * 2 + 1] = 1.0;
    m.reward[1 * 2 + a] = 1.0;
  }
  return m;
}

VTraceConfig config(double gamma, double rho_bar = 1.0, double c_bar = 1.0) {
  VTraceConfig c;
  c.gamma = gamma;
  c.rho_bar = rho_bar;
  c.c_bar = c_bar;
  return c;
}

}  // namespace

TEST_CASE("pi_rho_bar") {
  const auto mu = policy(1, 2, {0.5, 0.5});
  const auto pi = policy(1, 2, {0.9, 0.1});
  const auto p = pi_rho_bar(pi, mu, 1.0);
  CHECK(p(0, 0) == doctest::Approx(5.0 / 6));
  CHECK(p(0, 1) == doctest::Approx(1.0 / 6));
  const auto inf = pi_rho_bar(pi, mu, 1e9);
  CHECK(inf(0, 0) == doctest::Approx(0.9));
  const auto zero = pi_rho_bar(pi, mu, 1e-9);
  CHECK(std::abs(zero(0, 0) - 0.5) <= 1e-6);
}

TEST_CASE("policy_value") {
  SUBCASE("zero rewards") {
    auto m = random_mdp(4, 2, 0.9, 1);
    std::fill(m.reward.begin(), m.reward.end(), 0.0);
    CHECK(sup_norm(policy_value(m, TabularPolicy::uniform(4, 2))) == 0.0);
  }
  SUBCASE("geometric series") {
    TabularMDP m;
    m.num_states = 1;
    m.num_actions = 1;
    m.gamma = 0.5;
    m.transition = {1.0};
    m.reward = {1.0};
    CHECK(policy_value(m, TabularPolicy::uniform(1, 1))(0) == doctest::Approx(2.0));
  }
  SUBCASE("two-state chain") {
    const auto v = policy_value(two_state_chain(), policy(2, 2, {1, 0, 1, 0}));
    CHECK(v(1) == doctest::Approx(10.0));
    CHECK(v(0) == doctest::Approx(9.0));
  }
}

TEST_CASE("operator fixed point and on-policy backup") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_mdp(5, 3, 0.9, seed);
    const auto pi = random_policy(5, 3, seed + 100);
    const auto mu = random_policy(5, 3, seed + 200);
    const int H = default_horizon(m);
    for (double rb : {0.25, 1.0, 4.0}) {
      const auto v = policy_value(m, pi_rho_bar(pi, mu, rb));
      const auto c = config(0.9, rb, std::min(1.0, rb));
      CHECK(sup_norm(apply_vtrace_operator(m, v, pi, mu, c, H) - v) <= 1e-8);
    }
    const ValueFunction arbitrary = ValueFunction::LinSpaced(5, -3, 3);
    const auto on = apply_vtrace_operator(m, arbitrary, pi, pi, config(0.9), H);
    CHECK(sup_norm(on - policy_value(m, pi)) <= 1e-8);
  }
}

TEST_CASE("contraction") {
  const auto m = random_mdp(5, 3, 0.9, 7);
  const auto pi = random_policy(5, 3, 8);
  const auto mu = random_policy(5, 3, 9);
  const int H = default_horizon(m);
  auto report = compute_eta(m, pi, mu, config(0.9), H);
  observe_contraction(report, m, pi, mu, config(0.9), H, 50, 10);
  CHECK(report.eta_bound < 1.0);
  CHECK(report.eta_bound >= 0.0);
  CHECK(report.horizon_sufficient);
  REQUIRE(report.observed_ratios.size() == 50);
  for (double r : report.observed_ratios) CHECK(r <= report.eta_bound + 1e-9);
}

TEST_CASE("limit depends on rho_bar only") {
  const auto m = random_mdp(6, 3, 0.9, 17);
  const auto pi = random_policy(6, 3, 18);
  const auto mu = random_policy(6, 3, 19);
  const int H = default_horizon(m);
  const auto a = iterate_vtrace_operator(m, pi, mu, config(0.9, 4.0, 0.25), H, ValueFunction::Zero(6), 1e-13, 5000);
  const auto b = iterate_vtrace_operator(m, pi, mu, config(0.9, 4.0, 4.0), H, ValueFunction::Zero(6), 1e-13, 5000);
  CHECK(sup_norm(a.value - b.value) <= 1e-6);
  CHECK(sup_norm(a.value - policy_value(m, pi_rho_bar(pi, mu, 4.0))) <= 1e-6);
}

TEST_CASE("online convergence") {
  auto env = envs::make_env(envs::spec_from_id("chain-5"), 0);
  const auto m = *env->export_tabular(0.9);
  const auto mu = TabularPolicy::uniform(m.num_states, m.num_actions);
  const auto pi = random_policy(m.num_states, m.num_actions, 4);
  OnlineOptions o;
  o.seed = 1;
  SUBCASE("off-policy to pi_rho_bar") {
    const auto target = policy_value(m, pi_rho_bar(pi, mu, 1.0));
    const double span = target.maxCoeff() - target.minCoeff();
    CHECK(sup_norm(online_vtrace(m, pi, mu, config(0.9), o) - target) <= 0.05 * span);
  }
  SUBCASE("on-policy to V^pi") {
    const auto target = policy_value(m, pi);
    const double span = target.maxCoeff() - target.minCoeff();
    CHECK(sup_norm(online_vtrace(m, pi, pi, config(0.9), o) - target) <= 0.05 * span);
  }
  SUBCASE("small rho_bar moves the limit toward V^mu") {
    // Every correction carries a factor rho <= rho_bar, so the step sizes are scaled up to match.
    o.schedule.scale = 1000.0;
    const auto limit = policy_value(m, pi_rho_bar(pi, mu, 0.1));
    const auto v = online_vtrace(m, pi, mu, config(0.9, 0.1, 0.1), o);
    const double span = limit.maxCoeff() - limit.minCoeff();
    CHECK(sup_norm(v - limit) <= 0.05 * span);
    CHECK(sup_norm(v - policy_value(m, mu)) < sup_norm(v - policy_value(m, pi)));
  }
}

TEST_CASE("q_s identities") {
  SUBCASE("stochastic MDP") {
    const auto m = random_mdp(4, 2, 0.9, 3);
    const auto rep = qs_unbiasedness_check(m, random_policy(4, 2, 4), random_policy(4, 2, 5), config(0.9), 20000, 6);
    CHECK(rep.passed);
    CHECK(rep.rows.size() == 8);
  }
  SUBCASE("on-policy: v_s mixture collapses to Q") {
    const auto m = random_mdp(3, 2, 0.9, 8);
    const auto pi = random_policy(3, 2, 9);
    const auto rep = qs_unbiasedness_check(m, pi, pi, config(0.9), 5000, 10);
    CHECK(rep.passed);
    for (const auto& r : rep.rows) CHECK(r.v_expected == doctest::Approx(r.q_expected));
  }
  SUBCASE("deterministic MDP has zero variance") {
    auto m = two_state_chain();
    const auto pi = policy(2, 2, {1, 0, 1, 0});
    const auto rep = qs_unbiasedness_check(m, pi, pi, config(0.9), 100, 1);
    CHECK(rep.passed);
    for (const auto& r : rep.rows) CHECK(r.q_stderr == 0.0);
  }
}

TEST_CASE("validation") {
  auto m = random_mdp(3, 2, 0.9, 1);
  m.transition[0] += 0.5;
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  auto p = TabularPolicy::uniform(3, 2);
  p.probs[0] = -0.1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  CHECK(sample_index(std::vector<double>{0.0, 1.0, 0.0}.data(), 3, 0.999999999) == 1);
  CHECK(sample_index(std::vector<double>{0.5, 0.5}.data(), 2, 0.0) == 0);
}
