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

#include <chrono>
#include <cmath>
#include <set>
#include <thread>

#include "impala/learner.hpp"
#include "impala/runtime.hpp"

using namespace impala;
using namespace std::chrono_literals;

namespace {

Trajectory tagged(std::uint64_t version) {
  Trajectory t;
  t.env_id = "x";
  t.observations = {{0.0}, {1.0}};
  t.actions = {0};
  t.rewards = {0.0};
  t.behavior_probs = {1.0};
  t.terminal_flags = {0};
  t.policy_version = version;
  return t;
}

ParameterSnapshot version(std::uint64_t v) {
  auto p = std::make_shared<ModelParams>();
  p->version = v;
  return p;
}

RunConfig small_config() {
  RunConfig c;
  c.env = envs::spec_from_id("chain-5");
  c.num_actors = 2;
  c.learner.batch_size = 2;
  c.learner.vtrace.unroll_length = 10;
  c.max_updates = 30;
  c.eval_episodes = 5;
  c.deterministic = true;
  return c;
}

}  // namespace

TEST_CASE("bounded queue") {
  SUBCASE("fifo and close drains") {
    BoundedQueue<int> q(3);
    CHECK(q.push(1));
    CHECK(q.push(2));
    q.close();
    CHECK_FALSE(q.push(3));
    CHECK(q.pop() == 1);
    CHECK(q.pop() == 2);
    CHECK_FALSE(q.pop().has_value());
  }
  SUBCASE("producers block when full") {
    BoundedQueue<int> q(1);
    q.push(0);
    std::atomic<bool> done{false};
    std::thread producer([&] {
      q.push(1);
      done = true;
    });
    std::this_thread::sleep_for(30ms);
    CHECK_FALSE(done.load());
    CHECK(q.pop() == 0);
    producer.join();
    CHECK(done.load());
    CHECK(q.pop() == 1);
  }
  SUBCASE("many producers, nothing lost or duplicated") {
    BoundedQueue<int> q(4);
    std::vector<std::thread> producers;
    for (int p = 0; p < 8; ++p) {
      producers.emplace_back([&, p] {
        for (int i = 0; i < 500; ++i) q.push(p * 1000 + i);
      });
    }
    std::multiset<int> seen;
    for (int i = 0; i < 4000; ++i) seen.insert(*q.pop());
    for (auto& t : producers) t.join();
    CHECK(seen.size() == 4000);
    CHECK(std::set<int>(seen.begin(), seen.end()).size() == 4000);
    CHECK(q.pushed() == 4000);
    CHECK(q.popped() == 4000);
  }
  CHECK_THROWS_AS(BoundedQueue<int>(0), std::invalid_argument);
}

TEST_CASE("replay buffer") {
  SUBCASE("fifo eviction") {
    ReplayBuffer b(3);
    for (std::uint64_t v = 0; v < 4; ++v) b.insert(tagged(v));
    CHECK(b.size() == 3);
    CHECK(b.evicted() == 1);
    CHECK(b.at(0).policy_version == 1);
    CHECK(b.at(2).policy_version == 3);
  }
  SUBCASE("uniform sampling, chi-square") {
    const std::size_t k = 50, draws = 100000;
    ReplayBuffer b(k);
    for (std::uint64_t v = 0; v < k; ++v) b.insert(tagged(v));
    std::mt19937_64 rng(4);
    std::vector<double> counts(k, 0.0);
    for (auto i : b.sample_indices(draws, rng)) counts[i] += 1.0;
    const double expected = double(draws) / k;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 49 degrees of freedom, p = 0.001 critical value.
    CHECK(chi2 < 85.35);
  }
  SUBCASE("samples keep their version") {
    ReplayBuffer b;
    b.insert(tagged(7));
    std::mt19937_64 rng(1);
    for (const auto& t : b.sample(5, rng)) CHECK(t.policy_version == 7);
  }
  SUBCASE("empty buffer") {
    ReplayBuffer b;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(b.sample(1, rng), std::logic_error);
  }
}

TEST_CASE("lag controller") {
  auto fixed = LagController::fixed(10);
  for (std::uint64_t v = 1; v <= 50; ++v) {
    const auto published = fixed.on_update(version(v));
    CHECK(published->version == (v > 10 ? v - 10 : 1));
  }
  auto natural = LagController::natural();
  CHECK(natural.on_update(version(5))->version == 5);
  auto zero = LagController::fixed(0);
  CHECK(zero.on_update(version(3))->version == 3);
}

TEST_CASE("snapshot store") {
  SnapshotStore s(true);
  CHECK_THROWS_AS(s.fetch(), SnapshotUnavailable);
  s.publish(version(1));
  s.publish(version(2));
  CHECK(s.fetch()->version == 2);
  CHECK(s.archived(1)->version == 1);
  CHECK(s.archived(9) == nullptr);
  s.close();
  CHECK(s.fetch() == nullptr);
}

TEST_CASE("actor loop") {
  Model model(ModelSpec{ModelFamily::kLinear, 5, 2});
  SnapshotStore store(true);
  auto p0 = std::make_shared<ModelParams>(model.init(1));
  store.publish(p0);
  TrajectoryQueue queue(64);
  QueueSink sink(queue, 3);
  auto env = envs::make_env(envs::spec_from_id("chain-5"), 0);
  std::atomic<bool> stop{false};
  ActorStats stats;
  ActorOptions opts;
  std::thread actor([&] { actor_loop(*env, model, store, sink, opts, stop, &stats); });

  // A new version mid-run; every unroll must still come from a single version.
  auto p1 = std::make_shared<ModelParams>(model.init(2));
  p1->version = 1;
  std::vector<Envelope> got;
  for (int i = 0; i < 20; ++i) {
    got.push_back(*queue.pop());
    if (i == 5) store.publish(p1);
  }
  store.close();
  queue.close();
  actor.join();

  for (const auto& e : got) {
    CHECK(e.source == 3);
    CHECK(e.trajectory.steps() == 20);
    CHECK(e.trajectory.observations.size() == 21);
    const auto params = store.archived(e.trajectory.policy_version);
    REQUIRE(params != nullptr);
    for (std::size_t t = 0; t < 20; ++t) {
      const auto f = model.forward(*params, e.trajectory.observations[t]);
      const auto a = static_cast<std::size_t>(e.trajectory.actions[t]);
      CHECK(e.trajectory.behavior_probs[t] == f.probs[a]);
    }
  }
  CHECK(got.back().trajectory.policy_version == 1);
  CHECK(stats.trajectories.load() >= 20);
}

TEST_CASE("on-policy data gives unit ratios at the learner") {
  RunConfig cfg = small_config();
  Model model(cfg.model_spec());
  Learner learner(model, model.init(3), LearnerOptions{});
  SnapshotStore store;
  store.publish(learner.snapshot());
  TrajectoryQueue queue(8);
  QueueSink sink(queue, 0);
  auto env = envs::make_env(cfg.env, 1);
  std::atomic<bool> stop{false};
  std::thread actor([&] { actor_loop(*env, model, store, sink, ActorOptions{}, stop); });
  std::vector<Trajectory> ts;
  for (int i = 0; i < 4; ++i) ts.push_back(queue.pop()->trajectory);
  stop = true;
  queue.close();
  actor.join();
  std::vector<const Trajectory*> batch;
  for (const auto& t : ts) batch.push_back(&t);
  std::vector<double> ratios;
  learner.batch_gradient(batch, &ratios);
  REQUIRE(ratios.size() == 80);
  for (double r : ratios) CHECK(r == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("learner") {
  Model model(ModelSpec{ModelFamily::kLinear, 5, 2});
  auto env = envs::make_env(envs::spec_from_id("chain-5"), 2);
  std::mt19937_64 rng(5);
  auto obs = env->reset();

  SUBCASE("replay splits the batch in half") {
    LearnerOptions o;
    o.replay = true;
    Learner l(model, model.init(1), o);
    CHECK(l.fresh_per_update() == 16);
    CHECK(l.replay_per_update() == 16);
    std::vector<Envelope> fresh;
    for (int i = 0; i < 16; ++i) fresh.push_back({0, generate_unroll(*env, model, l.params(), obs, 20, rng)});
    const auto m1 = l.update(fresh);
    CHECK(m1.fresh == 16);
    CHECK(m1.replayed == 0);  // nothing to replay yet: the buffer fills after sampling
    for (auto& e : fresh) e.trajectory = generate_unroll(*env, model, l.params(), obs, 20, rng);
    const auto m2 = l.update(fresh);
    CHECK(m2.fresh == 16);
    CHECK(m2.replayed == 16);
    CHECK(l.replay().size() == 32);
    std::vector<Envelope> wrong(3);
    CHECK_THROWS_AS(l.update(wrong), std::invalid_argument);
  }
  SUBCASE("on-policy batch: no correction equals v-trace") {
    LearnerOptions a, b;
    a.batch_size = b.batch_size = 4;
    b.variant = CorrectionVariant::none();
    const auto init = model.init(4);
    Learner la(model, init, a), lb(model, init, b);
    std::vector<Envelope> fresh;
    for (int i = 0; i < 4; ++i) fresh.push_back({i, generate_unroll(*env, model, init, obs, 20, rng)});
    la.update(fresh);
    lb.update(fresh);
    const auto fa = la.params().flatten(), fb = lb.params().flatten();
    for (std::size_t i = 0; i < fa.size(); ++i) CHECK(fa[i] == doctest::Approx(fb[i]).epsilon(1e-12));
  }
  SUBCASE("future versions are rejected") {
    LearnerOptions o;
    o.batch_size = 1;
    Learner l(model, model.init(1), o);
    auto t = generate_unroll(*env, model, l.params(), obs, 20, rng);
    t.policy_version = 5;
    CHECK_THROWS_AS(l.update({{0, t}}), std::logic_error);
  }
}

TEST_CASE("fixed lag is exact under deterministic scheduling") {
  RunConfig cfg = small_config();
  cfg.fixed_lag = 10;
  cfg.max_updates = 60;
  const auto r = run_deterministic(cfg);
  for (const auto& m : r.metrics) {
    if (m.update_index > 11) {
      CHECK(m.policy_lag == 10.0);
      CHECK(m.max_lag == 10.0);
      CHECK(m.min_lag == 10.0);
    }
  }
}

TEST_CASE("deterministic runs repeat exactly") {
  RunConfig cfg = small_config();
  cfg.num_actors = 1;
  cfg.learner.batch_size = 1;
  const auto a = run_deterministic(cfg), b = run_deterministic(cfg);
  CHECK(a.params == b.params);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].mean_return == b.metrics[i].mean_return);
    CHECK(a.metrics[i].grad_norm == b.metrics[i].grad_norm);
    CHECK(a.metrics[i].wall_clock_s == b.metrics[i].wall_clock_s);
  }
  CHECK(a.final_return == b.final_return);
}

TEST_CASE("sync_trajectory with one env is the single-stream agent") {
  RunConfig cfg = small_config();
  cfg.num_actors = 1;
  cfg.learner.batch_size = 1;
  cfg.fixed_lag = 0;
  cfg.learner.variant = CorrectionVariant::none();
  const auto impala = run_deterministic(cfg);
  const auto a2c = run_batched_a2c(cfg, A2CMode::kSyncTrajectory, 0);
  const auto step = run_batched_a2c(cfg, A2CMode::kSyncStep, 0);
  CHECK(impala.params == a2c.params);
  CHECK(impala.params == step.params);
  CHECK(impala.final_return == a2c.final_return);
}

TEST_CASE("concurrent run accounts for every trajectory") {
  RunConfig cfg = small_config();
  cfg.deterministic = false;
  cfg.num_actors = 4;
  cfg.learner.batch_size = 4;
  cfg.max_updates = 50;
  const auto r = run_impala(cfg);
  CHECK(r.metrics.size() == 50);
  CHECK(r.consumed == 200);
  CHECK(r.produced == r.consumed + r.drained);
  for (std::size_t i = 1; i < r.metrics.size(); ++i) {
    CHECK(r.metrics[i].env_frames >= r.metrics[i - 1].env_frames);
  }
}

TEST_CASE("episode tracker spans unroll boundaries") {
  EpisodeTracker tr;
  Trajectory a = tagged(0);
  a.rewards = {1.0};
  a.terminal_flags = {0};
  CHECK(tr.consume(0, a).empty());
  Trajectory b = tagged(0);
  b.rewards = {2.0};
  b.terminal_flags = {1};
  CHECK(tr.consume(1, b) == std::vector<double>{2.0});
  CHECK(tr.consume(0, b) == std::vector<double>{3.0});
}
