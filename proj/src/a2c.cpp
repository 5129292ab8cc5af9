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

// Batched A2C baselines: every environment waits for the slowest one, either
// after each step or after each n-step unroll.

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "impala/learner.hpp"
#include "run_common.hpp"

namespace impala {
namespace {

// Runs job(i) for i in [0, jobs) across persistent workers and waits for all.
// With zero workers the jobs run inline on the caller, in order.
class LockstepPool {
 public:
  LockstepPool(int workers, int jobs) : jobs_(jobs) {
    for (int w = 0; w < workers; ++w) threads_.emplace_back([this, w, workers] { work(w, workers); });
  }

  ~LockstepPool() {
    {
      std::lock_guard lock(mu_);
      quit_ = true;
    }
    start_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(const std::function<void(int)>& job) {
    if (threads_.empty()) {
      for (int i = 0; i < jobs_; ++i) job(i);
      return;
    }
    std::unique_lock lock(mu_);
    job_ = &job;
    pending_ = static_cast<int>(threads_.size());
    error_ = nullptr;
    ++generation_;
    start_.notify_all();
    done_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void work(int w, int workers) {
    std::uint64_t seen = 0;
    while (true) {
      const std::function<void(int)>* job = nullptr;
      {
        std::unique_lock lock(mu_);
        start_.wait(lock, [&] { return quit_ || generation_ != seen; });
        if (quit_) return;
        seen = generation_;
        job = job_;
      }
      std::exception_ptr err;
      try {
        for (int i = w; i < jobs_; i += workers) (*job)(i);
      } catch (...) {
        err = std::current_exception();
      }
      std::lock_guard lock(mu_);
      if (err && !error_) error_ = err;
      if (--pending_ == 0) done_.notify_one();
    }
  }

  const int jobs_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable start_;
  std::condition_variable done_;
  const std::function<void(int)>* job_ = nullptr;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  bool quit_ = false;
  std::exception_ptr error_;
};

}  // namespace

A2CMode parse_a2c_mode(std::string_view text) {
  if (text == "sync_step") return A2CMode::kSyncStep;
  if (text == "sync_trajectory") return A2CMode::kSyncTrajectory;
  throw std::invalid_argument("unknown A2C mode '" + std::string(text) + "' (sync_step, sync_trajectory)");
}

std::string_view a2c_mode_name(A2CMode m) { return m == A2CMode::kSyncStep ? "sync_step" : "sync_trajectory"; }

RunResult run_batched_a2c(const RunConfig& config, A2CMode mode, int worker_threads,
                          const MetricsCallback& on_update) {
  RunConfig cfg = config;
  cfg.learner.variant = CorrectionVariant::none();
  cfg.learner.replay = false;
  cfg.learner.batch_size = cfg.num_actors;
  cfg.fixed_lag.reset();
  cfg.validate();
  if (worker_threads < 0) throw std::invalid_argument("worker_threads must be >= 0");

  Model model(cfg.model_spec());
  Learner learner(model, detail::initial_params(model, cfg.seed), detail::learner_options(cfg));
  const auto num_envs = static_cast<std::size_t>(cfg.num_actors);
  const int n = cfg.learner.vtrace.unroll_length;
  const auto na = static_cast<std::size_t>(model.spec().num_actions);
  const auto dim = static_cast<std::size_t>(model.spec().observation_dim);

  struct EnvState {
    std::unique_ptr<envs::Environment> env;
    std::mt19937_64 rng;
    std::vector<double> obs;
  };
  std::vector<EnvState> states;
  for (int i = 0; i < cfg.num_actors; ++i) {
    auto env = envs::make_actor_env(cfg.env, i, cfg.num_actors, env_seed(cfg.seed, i));
    auto obs = env->reset();
    states.push_back({std::move(env), std::mt19937_64(action_seed(cfg.seed, i)), std::move(obs)});
  }
  LockstepPool pool(std::min(worker_threads, cfg.num_actors), cfg.num_actors);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  RunResult result;
  double simulated = 0.0;
  const auto start = std::chrono::steady_clock::now();
  std::vector<Trajectory> trajs(num_envs);
  std::vector<double> delays(num_envs);
  std::vector<double> batch_obs(num_envs * dim), probs(num_envs * na), values(num_envs);
  std::vector<int> actions(num_envs);

  while (!detail::finished(cfg, learner.updates(), result.env_frames)) {
    const ModelParams& params = learner.params();
    if (mode == A2CMode::kSyncTrajectory) {
      pool.run([&](int i) {
        auto& st = states[static_cast<std::size_t>(i)];
        double d = 0.0;
        trajs[static_cast<std::size_t>(i)] = generate_unroll(*st.env, model, params, st.obs, n, st.rng, &d);
        delays[static_cast<std::size_t>(i)] = d;
      });
      simulated += *std::max_element(delays.begin(), delays.end());
    } else {
      for (std::size_t i = 0; i < num_envs; ++i) {
        Trajectory& t = trajs[i];
        t = Trajectory{};
        t.env_id = states[i].env->spec().id;
        t.policy_version = params.version;
        t.observations.push_back(states[i].obs);
      }
      for (int step = 0; step < n; ++step) {
        // One batched forward pass for every environment, then one env step each.
        for (std::size_t i = 0; i < num_envs; ++i) {
          std::copy(states[i].obs.begin(), states[i].obs.end(), batch_obs.begin() + static_cast<std::ptrdiff_t>(i * dim));
        }
        model.forward_batch(params, batch_obs, num_envs, probs, values);
        for (std::size_t i = 0; i < num_envs; ++i) {
          const std::span<const double> p(probs.data() + i * na, na);
          actions[i] = sample_action(p, unif(states[i].rng));
          trajs[i].actions.push_back(actions[i]);
          trajs[i].behavior_probs.push_back(p[static_cast<std::size_t>(actions[i])]);
        }
        pool.run([&](int i) {
          const auto u = static_cast<std::size_t>(i);
          auto r = states[u].env->step(actions[u]);
          trajs[u].rewards.push_back(r.reward);
          trajs[u].terminal_flags.push_back(r.terminal ? 1 : 0);
          delays[u] = r.delay_seconds;
          states[u].obs = std::move(r.observation);
          trajs[u].observations.push_back(states[u].obs);
        });
        simulated += *std::max_element(delays.begin(), delays.end());
      }
    }
    std::vector<Envelope> fresh;
    for (std::size_t i = 0; i < num_envs; ++i) fresh.push_back({static_cast<int>(i), std::move(trajs[i])});
    result.produced += fresh.size();
    result.consumed += fresh.size();
    UpdateMetrics m = learner.update(std::move(fresh));
    m.wall_clock_s = worker_threads == 0 ? simulated : detail::seconds_since(start);
    result.env_frames = m.env_frames;
    if (on_update) on_update(m);
    result.metrics.push_back(m);
  }
  result.wall_seconds = worker_threads == 0 ? simulated : detail::seconds_since(start);
  result.params = learner.params();
  result.final_return = evaluate_policy(cfg.env, model, result.params, cfg.eval_episodes, cfg.seed);
  return result;
}

}  // namespace impala
