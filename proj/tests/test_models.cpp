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
#include <random>

#include "impala/models.hpp"
#include "impala/optimizer.hpp"
#include "gradcheck.hpp"

using namespace impala;

TEST_CASE("softmax") {
  std::vector<double> p(3), lp(3);
  softmax(std::vector<double>{0, 0, 0}, p, lp);
  for (double x : p) CHECK(x == doctest::Approx(1.0 / 3));
  softmax(std::vector<double>{700, 700, 700}, p, lp);
  for (double x : p) CHECK(x == doctest::Approx(1.0 / 3));
  std::vector<double> p2(2), lp2(2);
  softmax(std::vector<double>{std::log(2.0), 0}, p2, lp2);
  CHECK(p2[0] == doctest::Approx(2.0 / 3));
  CHECK(p2[1] == doctest::Approx(1.0 / 3));
  CHECK(lp2[1] == doctest::Approx(std::log(1.0 / 3)));
}

TEST_CASE("gradient checks: every family and variant") {
  const CorrectionVariant variants[] = {CorrectionVariant::vtrace(), CorrectionVariant::none(),
                                        CorrectionVariant::epsilon(), CorrectionVariant::one_step_is()};
  for (auto family : {ModelFamily::kTabular, ModelFamily::kLinear, ModelFamily::kMlp}) {
    for (bool share : {true, false}) {
      if (family != ModelFamily::kMlp && !share) continue;
      for (const auto& v : variants) {
        CAPTURE(model_family_name(family));
        CAPTURE(share);
        CAPTURE(v.name());
        CHECK(oracle::gradient_error(family, share, v, 42) <= 1e-4);
      }
    }
  }
}

TEST_CASE("zero residuals and advantages give a zero direction") {
  ModelSpec spec;
  spec.observation_dim = 3;
  Model model(spec);
  const auto params = model.init(1);
  UnrollObservations u;
  u.observations = {{1, 0, 0.5}, {0, 1, 0}};
  u.actions = {1};
  VTraceOutput out;
  out.vs = {model.forward(params, u.observations[0]).value};
  out.pg_advantages = {0.0};
  LossWeights w;
  w.entropy_weight = 0.0;
  for (double g : model_gradients(model, params, u, out, w, CorrectionVariant::vtrace())) CHECK(g == 0.0);
}

TEST_CASE("forward batch matches forward") {
  ModelSpec spec;
  spec.family = ModelFamily::kMlp;
  spec.observation_dim = 3;
  spec.num_actions = 4;
  spec.hidden = 7;
  Model model(spec);
  const auto params = model.init(9);
  const std::vector<double> obs = {0.1, -0.2, 0.3, 1, 2, 3};
  std::vector<double> probs(8), values(2);
  model.forward_batch(params, obs, 2, probs, values);
  for (int b = 0; b < 2; ++b) {
    const auto f = model.forward(params, std::span<const double>(obs).subspan(3 * b, 3));
    CHECK(values[b] == doctest::Approx(f.value).epsilon(1e-14));
    for (int a = 0; a < 4; ++a) CHECK(probs[4 * b + a] == doctest::Approx(f.probs[a]).epsilon(1e-14));
  }
  CHECK_THROWS_AS(model.forward(params, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST_CASE("init is seeded") {
  Model model(ModelSpec{});
  CHECK(model.init(3) == model.init(3));
  CHECK_FALSE(model.init(3) == model.init(4));
  CHECK(model.init(3).size() == model.num_params());
}

TEST_CASE("rmsprop") {
  ModelParams p;
  p.theta = {1.0, -1.0};
  p.omega = {0.5};
  SUBCASE("zero gradient leaves params and bumps the version") {
    auto st = RmsPropState::for_params(p, 6e-4, 0.1);
    const auto before = p;
    rmsprop_step(st, p, std::vector<double>{0, 0, 0});
    CHECK(p.theta == before.theta);
    CHECK(p.omega == before.omega);
    CHECK(p.version == before.version + 1);
  }
  SUBCASE("first step by hand") {
    auto st = RmsPropState::for_params(p, 1e-2, 0.1, 0.99);
    const double g = 3.0;
    rmsprop_step(st, p, std::vector<double>{g, g, g});
    // Flattened order is shared_body, theta, omega.
    const double step = 1e-2 * g / std::sqrt(0.01 * g * g + 0.1);
    CHECK(p.theta[0] == doctest::Approx(1.0 + step).epsilon(1e-14));
    CHECK(p.omega[0] == doctest::Approx(0.5 + step).epsilon(1e-14));
  }
  SUBCASE("norm clipping halves an 80-norm gradient at 40") {
    auto a = RmsPropState::for_params(p, 1e-2, 0.1);
    auto b = a;
    ModelParams pa = p, pb = p;
    const auto info = rmsprop_step(a, pa, std::vector<double>{0, 80, 0}, 40.0);
    rmsprop_step(b, pb, std::vector<double>{0, 40, 0});
    CHECK(info.grad_norm == doctest::Approx(80));
    CHECK(info.scale == doctest::Approx(0.5));
    CHECK(pa.theta[1] == doctest::Approx(pb.theta[1]).epsilon(1e-14));
  }
  SUBCASE("linear anneal") {
    auto st = RmsPropState::for_params(p, 1.0, 0.1);
    st.anneal_steps = 4;
    CHECK(st.current_learning_rate() == doctest::Approx(1.0));
    st.step = 2;
    CHECK(st.current_learning_rate() == doctest::Approx(0.5));
    st.step = 10;
    CHECK(st.current_learning_rate() == 0.0);
  }
  SUBCASE("momentum is not supported") {
    auto st = RmsPropState::for_params(p, 1e-2, 0.1);
    st.momentum = 0.9;
    CHECK_THROWS(rmsprop_step(st, p, std::vector<double>{0, 0, 0}));
  }
}
