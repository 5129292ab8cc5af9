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

#include "impala/learner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <stdexcept>
#include <thread>

#include "impala/kernels.hpp"
#include "impala/transport.hpp"
#include "run_common.hpp"

namespace impala {
namespace detail {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

bool finished(const RunConfig& c, std::uint64_t updates, std::uint64_t frames) {
  if (updates >= c.max_updates) return true;
  return c.total_env_frames > 0 && frames >= c.total_env_frames;
}

LearnerOptions learner_options(const RunConfig& c) {
  LearnerOptions o = c.learner;
  o.seed = splitmix(c.seed ^ 0x1EA2ull);
  o.action_repeat = c.env.action_repeat;
  return o;
}

ModelParams initial_params(const Model& model, std::uint64_t seed) { return model.init(splitmix(seed ^ 0x11117ull)); }

}  // namespace detail

namespace {

using detail::finished;
using detail::initial_params;
using detail::learner_options;
using detail::seconds_since;
using detail::splitmix;

LagController make_lag(const RunConfig& c) {
  return c.fixed_lag ? LagController::fixed(*c.fixed_lag) : LagController::natural();
}

}  // namespace

void LearnerOptions::validate() const {
  vtrace.validate();
  weights.validate();
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (replay && batch_size < 2) throw std::invalid_argument("replay needs batch_size >= 2");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(rmsprop_epsilon > 0.0)) throw std::invalid_argument("rmsprop epsilon must be > 0");
  if (!(rmsprop_decay >= 0.0 && rmsprop_decay < 1.0)) throw std::invalid_argument("rmsprop decay must be in [0, 1)");
  if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be > 0");
  if (anneal_steps < 0) throw std::invalid_argument("anneal_steps must be >= 0");
  if (replay_capacity < 1) throw std::invalid_argument("replay_capacity must be >= 1");
  if (action_repeat < 1) throw std::invalid_argument("action_repeat must be >= 1");
}

std::vector<double> EpisodeTracker::consume(int source, const Trajectory& t) {
  std::vector<double> done;
  double& acc = running_[source];
  for (std::size_t i = 0; i < t.steps(); ++i) {
    acc += t.rewards[i];
    if (t.terminal_flags[i]) {
      done.push_back(acc);
      acc = 0.0;
    }
  }
  return done;
}

Learner::Learner(Model model, ModelParams initial, LearnerOptions options)
    : model_(std::move(model)),
      params_(std::move(initial)),
      options_(std::move(options)),
      replay_(options_.replay_capacity),
      replay_rng_(options_.seed) {
  options_.validate();
  if (params_.size() != model_.num_params()) throw std::invalid_argument("Learner: parameters do not fit the model");
  optimizer_ = RmsPropState::for_params(params_, options_.learning_rate, options_.rmsprop_epsilon,
                                        options_.rmsprop_decay);
  optimizer_.anneal_steps = options_.anneal_steps;
}

std::size_t Learner::fresh_per_update() const {
  const auto m = static_cast<std::size_t>(options_.batch_size);
  return options_.replay ? m - m / 2 : m;
}

std::size_t Learner::replay_per_update() const {
  return options_.replay ? static_cast<std::size_t>(options_.batch_size) / 2 : 0;
}

std::vector<double> Learner::batch_gradient(const std::vector<const Trajectory*>& batch,
                                            std::vector<double>* ratios_out) const {
  if (batch.empty()) throw std::invalid_argument("batch_gradient: empty batch");
  const std::size_t n = batch.front()->steps();
  const std::size_t lanes = batch.size();
  const auto dim = static_cast<std::size_t>(model_.spec().observation_dim);
  const auto na = static_cast<std::size_t>(model_.spec().num_actions);
  for (const Trajectory* t : batch) {
    t->validate();
    if (t->steps() != n) throw std::invalid_argument("batch_gradient: unrolls differ in length");
    if (t->observations.front().size() != dim) throw std::invalid_argument("batch_gradient: observation size");
    for (auto a : t->actions) {
      if (static_cast<std::size_t>(a) >= na) throw std::invalid_argument("batch_gradient: action out of range");
    }
  }

  // Time folded into batch: one forward pass over every (t, lane) pair.
  const std::size_t rows = (n + 1) * lanes;
  std::vector<double> obs(rows * dim);
  for (std::size_t t = 0; t <= n; ++t) {
    for (std::size_t b = 0; b < lanes; ++b) {
      const auto& o = batch[b]->observations[t];
      std::copy(o.begin(), o.end(), obs.begin() + static_cast<std::ptrdiff_t>((t * lanes + b) * dim));
    }
  }
  std::vector<double> probs(rows * na), values(rows);
  model_.forward_batch(params_, obs, rows, probs, values);

  UnrollBatch ub;
  ub.steps = n;
  ub.lanes = lanes;
  ub.values = values;
  const std::size_t cells = n * lanes;
  ub.rewards.resize(cells);
  ub.discounts.resize(cells);
  ub.target_probs.resize(cells);
  ub.behavior_probs.resize(cells);
  const double gamma = options_.vtrace.gamma;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t b = 0; b < lanes; ++b) {
      const Trajectory& tr = *batch[b];
      const std::size_t i = t * lanes + b;
      ub.rewards[i] = tr.rewards[t];
      ub.discounts[i] = tr.terminal_flags[t] ? 0.0 : gamma;
      ub.target_probs[i] = probs[i * na + static_cast<std::size_t>(tr.actions[t])];
      ub.behavior_probs[i] = tr.behavior_probs[t];
    }
  }
  if (ratios_out) {
    ratios_out->resize(cells);
    for (std::size_t i = 0; i < cells; ++i) (*ratios_out)[i] = ub.target_probs[i] / ub.behavior_probs[i];
  }
  const VTraceOutput out = apply_variant_batch(ub, options_.vtrace, options_.variant);

  std::vector<double> total(model_.num_params(), 0.0);
  const auto& k = kernels::active();
  for (std::size_t b = 0; b < lanes; ++b) {
    VTraceOutput lane;
    lane.log_epsilon = out.log_epsilon;
    for (auto* v : {&lane.vs, &lane.rho, &lane.cs, &lane.qs, &lane.pg_advantages}) v->resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t i = t * lanes + b;
      lane.vs[t] = out.vs[i];
      lane.rho[t] = out.rho[i];
      lane.cs[t] = out.cs[i];
      lane.qs[t] = out.qs[i];
      lane.pg_advantages[t] = out.pg_advantages[i];
    }
    UnrollObservations uo;
    uo.observations.assign(batch[b]->observations.begin(), batch[b]->observations.end() - 1);
    uo.actions.assign(batch[b]->actions.begin(), batch[b]->actions.end());
    const auto g = model_gradients(model_, params_, uo, lane, options_.weights, options_.variant);
    k.axpy(1.0, g, total);
  }
  return total;
}

UpdateMetrics Learner::update(std::vector<Envelope> fresh) {
  if (fresh.size() != fresh_per_update()) {
    throw std::invalid_argument("Learner::update: expected " + std::to_string(fresh_per_update()) +
                                " fresh trajectories, got " + std::to_string(fresh.size()));
  }
  std::vector<const Trajectory*> batch;
  for (const auto& e : fresh) batch.push_back(&e.trajectory);
  std::size_t replayed = 0;
  if (options_.replay && replay_.size() > 0) {
    for (std::size_t i : replay_.sample_indices(replay_per_update(), replay_rng_)) batch.push_back(&replay_.at(i));
    replayed = replay_per_update();
  }

  UpdateMetrics m;
  m.fresh = fresh.size();
  m.replayed = replayed;
  const std::uint64_t version = params_.version;
  double lag_sum = 0.0;
  m.min_lag = std::numeric_limits<double>::infinity();
  for (const Trajectory* t : batch) {
    if (t->policy_version > version) throw std::logic_error("trajectory from a future policy version");
    const double lag = static_cast<double>(version - t->policy_version);
    lag_sum += lag;
    m.max_lag = std::max(m.max_lag, lag);
    m.min_lag = std::min(m.min_lag, lag);
  }
  m.policy_lag = lag_sum / static_cast<double>(batch.size());

  std::vector<double> ratios;
  const std::vector<double> grad = batch_gradient(batch, &ratios);
  double rho_sum = 0.0;
  for (double r : ratios) rho_sum += std::min(options_.vtrace.rho_bar, r);
  m.mean_rho = rho_sum / static_cast<double>(ratios.size());

  const StepInfo info = rmsprop_step(optimizer_, params_, grad, options_.clip_norm);
  m.grad_norm = info.grad_norm;
  ++updates_;
  m.update_index = updates_;

  double ret_sum = 0.0;
  for (auto& e : fresh) {
    for (double r : episodes_.consume(e.source, e.trajectory)) {
      ret_sum += r;
      ++m.episodes;
    }
    frames_ += e.trajectory.steps() * static_cast<std::uint64_t>(options_.action_repeat);
  }
  if (m.episodes > 0) last_return_ = ret_sum / static_cast<double>(m.episodes);
  m.mean_return = last_return_;
  m.env_frames = frames_;

  if (options_.replay) {
    for (auto& e : fresh) replay_.insert(std::move(e.trajectory));
  }
  return m;
}

Transport parse_transport(std::string_view text) {
  if (text == "inproc") return Transport::kInProcess;
  if (text == "tcp") return Transport::kTcp;
  throw std::invalid_argument("unknown transport '" + std::string(text) + "' (inproc, tcp)");
}

std::string_view transport_name(Transport t) { return t == Transport::kTcp ? "tcp" : "inproc"; }

ModelSpec RunConfig::model_spec() const {
  ModelSpec s;
  s.family = model_family;
  s.observation_dim = env.observation_dim;
  s.num_actions = env.num_actions;
  s.hidden = hidden;
  s.share_body = share_body;
  return s;
}

void RunConfig::validate() const {
  envs::EnvSpec copy = env;
  copy.resolve();
  if (copy.observation_dim != env.observation_dim || copy.num_actions != env.num_actions) {
    throw std::invalid_argument("env spec is not resolved");
  }
  model_spec().validate();
  learner.validate();
  if (num_actors < 1) throw std::invalid_argument("num_actors must be >= 1");
  if (eval_episodes < 0) throw std::invalid_argument("eval_episodes must be >= 0");
  if (max_updates < 1) throw std::invalid_argument("max_updates must be >= 1");
}

std::uint64_t env_seed(std::uint64_t seed, int actor) {
  return splitmix(splitmix(seed) + 2 * static_cast<std::uint64_t>(actor));
}

std::uint64_t action_seed(std::uint64_t seed, int actor) {
  return splitmix(splitmix(seed) + 2 * static_cast<std::uint64_t>(actor) + 1);
}

double evaluate_policy(const envs::EnvSpec& spec, const Model& model, const ModelParams& params, int episodes,
                       std::uint64_t seed) {
  if (episodes <= 0) return 0.0;
  const int tasks = spec.tasks.empty() ? 1 : static_cast<int>(spec.tasks.size());
  std::mt19937_64 rng(splitmix(seed ^ 0xE7A1ull));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  constexpr int kStepCap = 100'000;
  double total = 0.0;
  for (int task = 0; task < tasks; ++task) {
    auto env = envs::make_actor_env(spec, task, tasks, splitmix(seed + static_cast<std::uint64_t>(task)));
    const int share = episodes / tasks + (task < episodes % tasks ? 1 : 0);
    for (int e = 0; e < share; ++e) {
      std::vector<double> obs = env->reset();
      double ret = 0.0;
      for (int s = 0; s < kStepCap; ++s) {
        const PolicyOutput out = model.forward(params, obs);
        auto step = env->step(sample_action(out.probs, unif(rng)));
        ret += step.reward;
        if (step.terminal) break;
        obs = std::move(step.observation);
      }
      total += ret;
    }
  }
  return total / static_cast<double>(episodes);
}

RunResult run_deterministic(const RunConfig& config, const MetricsCallback& on_update, SnapshotStore* store) {
  config.validate();
  SnapshotStore local(config.archive_snapshots);
  if (!store) store = &local;
  Model model(config.model_spec());
  Learner learner(model, initial_params(model, config.seed), learner_options(config));
  LagController lag = make_lag(config);
  store->publish(lag.on_update(learner.snapshot()));

  struct ActorState {
    std::unique_ptr<envs::Environment> env;
    std::mt19937_64 rng;
    std::vector<double> obs;
  };
  std::vector<ActorState> actors;
  for (int i = 0; i < config.num_actors; ++i) {
    auto env = envs::make_actor_env(config.env, i, config.num_actors, env_seed(config.seed, i));
    auto obs = env->reset();
    actors.push_back({std::move(env), std::mt19937_64(action_seed(config.seed, i)), std::move(obs)});
  }

  RunResult result;
  double clock = 0.0;
  std::size_t cursor = 0;
  const int n = config.learner.vtrace.unroll_length;
  while (!finished(config, learner.updates(), result.env_frames)) {
    const ParameterSnapshot snap = store->latest();
    std::vector<Envelope> fresh;
    for (std::size_t j = 0; j < learner.fresh_per_update(); ++j) {
      const int a = static_cast<int>(cursor++ % actors.size());
      auto& st = actors[static_cast<std::size_t>(a)];
      fresh.push_back({a, generate_unroll(*st.env, model, *snap, st.obs, n, st.rng, &clock)});
      ++result.produced;
    }
    result.consumed += fresh.size();
    UpdateMetrics m = learner.update(std::move(fresh));
    m.wall_clock_s = clock;
    result.env_frames = m.env_frames;
    store->publish(lag.on_update(learner.snapshot()));
    if (on_update) on_update(m);
    result.metrics.push_back(m);
  }
  result.wall_seconds = clock;
  result.params = learner.params();
  result.final_return = evaluate_policy(config.env, model, result.params, config.eval_episodes, config.seed);
  return result;
}

namespace {

// Pops exactly `count` envelopes or returns an empty vector if the queue closed.
std::vector<Envelope> gather(TrajectoryQueue& queue, std::size_t count) {
  std::vector<Envelope> out;
  out.reserve(count);
  while (out.size() < count) {
    auto e = queue.pop();
    if (!e) return {};
    out.push_back(std::move(*e));
  }
  return out;
}

// Shared learner loop for the threaded and TCP modes.
void learn(const RunConfig& config, Learner& learner, TrajectoryQueue& queue, SnapshotStore& store,
           LagController& lag, const MetricsCallback& on_update, RunResult& result,
           std::chrono::steady_clock::time_point start) {
  while (!finished(config, learner.updates(), result.env_frames)) {
    auto fresh = gather(queue, learner.fresh_per_update());
    if (fresh.empty()) break;
    result.consumed += fresh.size();
    UpdateMetrics m = learner.update(std::move(fresh));
    m.wall_clock_s = seconds_since(start);
    result.env_frames = m.env_frames;
    store.publish(lag.on_update(learner.snapshot()));
    if (on_update) on_update(m);
    result.metrics.push_back(m);
  }
}

}  // namespace

RunResult run_impala(const RunConfig& config, const MetricsCallback& on_update, SnapshotStore* store_out) {
  if (config.deterministic) return run_deterministic(config, on_update, store_out);
  config.validate();
  SnapshotStore local(config.archive_snapshots);
  SnapshotStore& store = store_out ? *store_out : local;
  Model model(config.model_spec());
  Learner learner(model, initial_params(model, config.seed), learner_options(config));
  LagController lag = make_lag(config);
  store.publish(lag.on_update(learner.snapshot()));

  const std::size_t capacity =
      config.queue_capacity > 0 ? config.queue_capacity : static_cast<std::size_t>(config.num_actors);
  TrajectoryQueue queue(capacity);
  std::atomic<bool> stop{false};
  std::vector<ActorStats> stats(static_cast<std::size_t>(config.num_actors));
  std::vector<std::exception_ptr> errors(stats.size());
  std::vector<std::thread> threads;
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < config.num_actors; ++i) {
    threads.emplace_back([&, i] {
      try {
        auto env = envs::make_actor_env(config.env, i, config.num_actors, env_seed(config.seed, i));
        QueueSink sink(queue, i);
        ActorOptions opts;
        opts.unroll_length = config.learner.vtrace.unroll_length;
        opts.seed = action_seed(config.seed, i);
        actor_loop(*env, model, store, sink, opts, stop, &stats[static_cast<std::size_t>(i)]);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
        queue.close();
      }
    });
  }

  RunResult result;
  std::exception_ptr learner_error;
  try {
    learn(config, learner, queue, store, lag, on_update, result, start);
  } catch (...) {
    learner_error = std::current_exception();
  }
  result.wall_seconds = seconds_since(start);

  // Shutdown: stop producers, then drain what is still in flight.
  stop = true;
  store.close();
  queue.close();
  while (queue.pop()) ++result.drained;
  for (auto& t : threads) t.join();
  while (queue.pop()) ++result.drained;
  for (const auto& s : stats) result.produced += s.trajectories.load();
  if (learner_error) std::rethrow_exception(learner_error);
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  result.params = learner.params();
  result.final_return = evaluate_policy(config.env, model, result.params, config.eval_episodes, config.seed);
  return result;
}

RunResult run_tcp_learner(const RunConfig& config, const std::string& listen,
                          const std::function<void(std::uint16_t)>& spawn_actors,
                          const MetricsCallback& on_update, const std::function<bool()>& actors_alive) {
  config.validate();
  SnapshotStore store(config.archive_snapshots);
  Model model(config.model_spec());
  Learner learner(model, initial_params(model, config.seed), learner_options(config));
  LagController lag = make_lag(config);
  store.publish(lag.on_update(learner.snapshot()));

  const std::size_t capacity =
      config.queue_capacity > 0 ? config.queue_capacity : static_cast<std::size_t>(config.num_actors);
  TrajectoryQueue queue(capacity);
  net::LearnerServer server(net::Address::parse(listen), queue, store);
  if (spawn_actors) spawn_actors(server.port());

  RunResult result;
  const auto start = std::chrono::steady_clock::now();
  std::atomic<bool> learning{true}, actors_lost{false};
  std::thread watchdog;
  if (actors_alive) {
    watchdog = std::thread([&] {
      while (learning) {
        if (!actors_alive()) {
          actors_lost = true;
          queue.close();
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
      }
    });
  }
  std::exception_ptr learner_error;
  try {
    learn(config, learner, queue, store, lag, on_update, result, start);
  } catch (...) {
    learner_error = std::current_exception();
  }
  learning = false;
  if (watchdog.joinable()) watchdog.join();
  result.wall_seconds = seconds_since(start);
  if (!learner_error && actors_lost && !finished(config, learner.updates(), result.env_frames)) {
    learner_error = std::make_exception_ptr(std::runtime_error(
        "actors exited after " + std::to_string(learner.updates()) + " updates, before training finished"));
  }

  store.close();
  queue.close();
  while (queue.pop()) ++result.drained;
  server.stop(10.0);
  while (queue.pop()) ++result.drained;
  result.produced = server.stats().trajectories.load() + server.stats().discarded.load();
  result.drained += server.stats().discarded.load();
  if (learner_error) std::rethrow_exception(learner_error);

  result.params = learner.params();
  result.final_return = evaluate_policy(config.env, model, result.params, config.eval_episodes, config.seed);
  return result;
}

std::uint64_t run_tcp_actor(const RunConfig& config, const std::string& connect, int actor) {
  config.validate();
  if (actor < 0 || actor >= config.num_actors) throw std::invalid_argument("actor index out of range");
  Model model(config.model_spec());
  auto env = envs::make_actor_env(config.env, actor, config.num_actors, env_seed(config.seed, actor));
  net::ActorLink link(net::Address::parse(connect));
  ActorOptions opts;
  opts.unroll_length = config.learner.vtrace.unroll_length;
  opts.seed = action_seed(config.seed, actor);
  std::atomic<bool> stop{false};
  ActorStats stats;
  actor_loop(*env, model, link, link, opts, stop, &stats);
  return stats.trajectories.load();
}

}  // namespace impala
