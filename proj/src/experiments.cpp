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

#include "impala/experiments.hpp"

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <csignal>
#include <cstring>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "impala/tabular.hpp"
#include "impala/transport.hpp"

extern char** environ;

namespace impala::experiments {
namespace {

using nlohmann::json;

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  throw std::invalid_argument("config key '" + key + "': " + why);
}

template <typename T>
T get(const json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    if constexpr (std::is_same_v<T, std::string>) {
      bad_key(key, "expected a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      bad_key(key, "expected true or false");
    } else {
      bad_key(key, "expected a number");
    }
  }
}

// Numbers must be integral when stored in integer fields.
template <typename T>
T get_int(const json& j, const std::string& key, long long lo) {
  const json& v = j.at(key);
  if (!v.is_number_integer() && !v.is_number_unsigned()) bad_key(key, "expected an integer");
  const long long x = v.get<long long>();
  if (x < lo) bad_key(key, "must be >= " + std::to_string(lo));
  return static_cast<T>(x);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string delay_kind_name(envs::DelayDistribution::Kind k) {
  switch (k) {
    case envs::DelayDistribution::Kind::kConstant: return "constant";
    case envs::DelayDistribution::Kind::kLogNormal: return "lognormal";
    case envs::DelayDistribution::Kind::kNone: break;
  }
  return "none";
}

envs::DelayDistribution::Kind parse_delay_kind(const std::string& s) {
  if (s == "none") return envs::DelayDistribution::Kind::kNone;
  if (s == "constant") return envs::DelayDistribution::Kind::kConstant;
  if (s == "lognormal") return envs::DelayDistribution::Kind::kLogNormal;
  bad_key("delay", "expected none, constant or lognormal");
}

// Env knobs present in `j` are applied to `spec` (and, for suites, to each task).
void apply_env_knobs(envs::EnvSpec& spec, const json& j) {
  auto has = [&](const char* k) { return j.contains(k); };
  if (has("reward_transform")) {
    try {
      spec.reward_transform = envs::parse_reward_transform(get<std::string>(j, "reward_transform"));
    } catch (const std::invalid_argument& e) {
      bad_key("reward_transform", e.what());
    }
  }
  if (has("action_repeat")) spec.action_repeat = get_int<int>(j, "action_repeat", 1);
  if (has("max_episode_steps")) spec.max_episode_steps = get_int<int>(j, "max_episode_steps", 0);
  if (has("chain_length")) spec.chain_length = get_int<int>(j, "chain_length", 2);
  if (has("slip_probability")) spec.slip_probability = get<double>(j, "slip_probability");
  if (has("grid_width")) spec.grid_width = get_int<int>(j, "grid_width", 1);
  if (has("grid_height")) spec.grid_height = get_int<int>(j, "grid_height", 1);
  if (has("corridor_length")) spec.corridor_length = get_int<int>(j, "corridor_length", 0);
  if (has("reveal_delay")) spec.reveal_delay = get_int<int>(j, "reveal_delay", 0);
  if (has("safe_reward")) spec.safe_reward = get<double>(j, "safe_reward");
  if (has("delay")) spec.step_delay.kind = parse_delay_kind(get<std::string>(j, "delay"));
  if (has("delay_seconds")) spec.step_delay.seconds = get<double>(j, "delay_seconds");
  if (has("delay_log_mean")) spec.step_delay.log_mean = get<double>(j, "delay_log_mean");
  if (has("delay_log_sigma")) spec.step_delay.log_sigma = get<double>(j, "delay_log_sigma");
  if (has("sleep_on_step")) spec.sleep_on_step = get<bool>(j, "sleep_on_step");
  for (auto& t : spec.tasks) apply_env_knobs(t, j);
}

int percent_index(std::size_t n) { return static_cast<int>(n - std::max<std::size_t>(1, n / 10)); }

double tail_mean_lag(const RunResult& r) {
  if (r.metrics.empty()) return 0.0;
  double s = 0.0;
  const auto from = static_cast<std::size_t>(percent_index(r.metrics.size()));
  for (std::size_t i = from; i < r.metrics.size(); ++i) s += r.metrics[i].policy_lag;
  return s / static_cast<double>(r.metrics.size() - from);
}

std::string self_executable() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) throw std::runtime_error("cannot resolve the running executable; set actor_command");
  return p.string();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "env", "tasks", "model", "hidden", "share_body", "variant", "gamma", "rho_bar", "c_bar", "lambda",
      "unroll_length", "q_estimate", "baseline_weight", "entropy_weight", "policy_weight", "learning_rate",
      "rmsprop_epsilon", "rmsprop_decay", "clip_norm", "anneal_steps", "batch_size", "replay", "replay_capacity",
      "num_actors", "queue_capacity", "lag", "max_updates", "total_env_frames", "deterministic", "eval_episodes",
      "seed", "archive_snapshots", "transport", "listen", "connect", "out", "actor_command", "a2c_workers",
      "reward_transform", "action_repeat", "max_episode_steps", "chain_length", "slip_probability", "grid_width",
      "grid_height", "corridor_length", "reveal_delay", "safe_reward", "delay", "delay_seconds", "delay_log_mean",
      "delay_log_sigma", "sleep_on_step"};
  return keys;
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  const auto& keys = config_keys();
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) bad_key(k, "unknown key");
  }
  ExperimentConfig c;
  RunConfig& r = c.run;
  auto has = [&](const char* k) { return j.contains(k); };

  // Environment first: knobs refine the defaults of the chosen id.
  const std::string env_id = has("env") ? get<std::string>(j, "env") : "chain-5";
  try {
    r.env = envs::spec_from_id(env_id);
  } catch (const std::exception& e) {
    bad_key("env", e.what());
  }
  if (has("tasks")) {
    if (env_id != "multitask-suite") bad_key("tasks", "only valid with env = multitask-suite");
    const json& t = j.at("tasks");
    if (!t.is_array() || t.empty()) bad_key("tasks", "expected a non-empty list of env ids");
    r.env.tasks.clear();
    for (const auto& id : t) {
      if (!id.is_string()) bad_key("tasks", "expected env id strings");
      try {
        r.env.tasks.push_back(envs::spec_from_id(id.get<std::string>()));
      } catch (const std::exception& e) {
        bad_key("tasks", e.what());
      }
    }
  }
  // Sized ids fix the size; a conflicting knob would be silently overwritten.
  auto same_size = [&](const char* key, int size) {
    if (has(key) && !(j.at(key).is_number_integer() && j.at(key).get<long long>() == size)) {
      bad_key(key, "conflicts with the size in env = " + env_id);
    }
  };
  if (env_id.rfind("chain-", 0) == 0) same_size("chain_length", r.env.chain_length);
  if (env_id.rfind("gridworld-", 0) == 0) {
    same_size("grid_width", r.env.grid_width);
    same_size("grid_height", r.env.grid_height);
  }
  apply_env_knobs(r.env, j);
  try {
    r.env.resolve();
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("env: ") + e.what());
  }

  if (has("model")) {
    try {
      r.model_family = parse_model_family(get<std::string>(j, "model"));
    } catch (const std::invalid_argument& e) {
      bad_key("model", e.what());
    }
  }
  if (has("hidden")) r.hidden = get_int<int>(j, "hidden", 1);
  if (has("share_body")) r.share_body = get<bool>(j, "share_body");

  LearnerOptions& l = r.learner;
  if (has("variant")) {
    try {
      l.variant = CorrectionVariant::parse(get<std::string>(j, "variant"));
    } catch (const std::invalid_argument& e) {
      bad_key("variant", e.what());
    }
  }
  if (has("gamma")) l.vtrace.gamma = get<double>(j, "gamma");
  if (has("rho_bar")) l.vtrace.rho_bar = get<double>(j, "rho_bar");
  if (has("c_bar")) l.vtrace.c_bar = get<double>(j, "c_bar");
  if (has("lambda")) l.vtrace.lambda = get<double>(j, "lambda");
  if (has("unroll_length")) l.vtrace.unroll_length = get_int<int>(j, "unroll_length", 1);
  if (has("q_estimate")) {
    const auto q = get<std::string>(j, "q_estimate");
    if (q == "next_target") {
      l.vtrace.q_estimate = QEstimate::kNextTarget;
    } else if (q == "next_value") {
      l.vtrace.q_estimate = QEstimate::kNextValue;
    } else {
      bad_key("q_estimate", "expected next_target or next_value");
    }
  }
  if (has("baseline_weight")) l.weights.baseline_weight = get<double>(j, "baseline_weight");
  if (has("entropy_weight")) l.weights.entropy_weight = get<double>(j, "entropy_weight");
  if (has("policy_weight")) l.weights.policy_weight = get<double>(j, "policy_weight");
  if (has("learning_rate")) l.learning_rate = get<double>(j, "learning_rate");
  if (has("rmsprop_epsilon")) l.rmsprop_epsilon = get<double>(j, "rmsprop_epsilon");
  if (has("rmsprop_decay")) l.rmsprop_decay = get<double>(j, "rmsprop_decay");
  if (has("clip_norm")) {
    if (j.at("clip_norm").is_null()) {
      l.clip_norm.reset();
    } else {
      l.clip_norm = get<double>(j, "clip_norm");
    }
  }
  if (has("anneal_steps")) l.anneal_steps = get_int<std::int64_t>(j, "anneal_steps", 0);
  if (has("batch_size")) l.batch_size = get_int<int>(j, "batch_size", 1);
  if (has("replay")) l.replay = get<bool>(j, "replay");
  if (has("replay_capacity")) l.replay_capacity = get_int<std::size_t>(j, "replay_capacity", 1);

  if (has("num_actors")) r.num_actors = get_int<int>(j, "num_actors", 1);
  if (has("queue_capacity")) r.queue_capacity = get_int<std::size_t>(j, "queue_capacity", 0);
  if (has("lag")) {
    const json& v = j.at("lag");
    if (v.is_string() && v.get<std::string>() == "natural") {
      r.fixed_lag.reset();
    } else {
      r.fixed_lag = get_int<std::uint64_t>(j, "lag", 0);
    }
  }
  if (has("max_updates")) r.max_updates = get_int<std::uint64_t>(j, "max_updates", 1);
  if (has("total_env_frames")) r.total_env_frames = get_int<std::uint64_t>(j, "total_env_frames", 0);
  if (has("deterministic")) r.deterministic = get<bool>(j, "deterministic");
  if (has("eval_episodes")) r.eval_episodes = get_int<int>(j, "eval_episodes", 0);
  if (has("seed")) r.seed = get_int<std::uint64_t>(j, "seed", 0);
  if (has("archive_snapshots")) r.archive_snapshots = get<bool>(j, "archive_snapshots");

  if (has("transport")) {
    try {
      c.transport = parse_transport(get<std::string>(j, "transport"));
    } catch (const std::invalid_argument& e) {
      bad_key("transport", e.what());
    }
  }
  if (has("listen")) c.listen = get<std::string>(j, "listen");
  if (has("connect")) c.connect = get<std::string>(j, "connect");
  if (has("out")) c.out_dir = get<std::string>(j, "out");
  if (has("actor_command")) c.actor_command = get<std::string>(j, "actor_command");
  if (has("a2c_workers")) c.a2c_workers = get_int<int>(j, "a2c_workers", 0);

  try {
    r.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("invalid config: ") + e.what());
  }
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const RunConfig& r = c.run;
  const LearnerOptions& l = r.learner;
  const envs::EnvSpec& e = r.env;
  json j;
  j["env"] = e.id;
  if (!e.tasks.empty()) {
    json t = json::array();
    for (const auto& s : e.tasks) t.push_back(s.id);
    j["tasks"] = t;
  }
  j["model"] = std::string(model_family_name(r.model_family));
  j["hidden"] = r.hidden;
  j["share_body"] = r.share_body;
  j["variant"] = std::string(l.variant.name());
  j["gamma"] = l.vtrace.gamma;
  j["rho_bar"] = l.vtrace.rho_bar;
  j["c_bar"] = l.vtrace.c_bar;
  j["lambda"] = l.vtrace.lambda;
  j["unroll_length"] = l.vtrace.unroll_length;
  j["q_estimate"] = l.vtrace.q_estimate == QEstimate::kNextTarget ? "next_target" : "next_value";
  j["baseline_weight"] = l.weights.baseline_weight;
  j["entropy_weight"] = l.weights.entropy_weight;
  j["policy_weight"] = l.weights.policy_weight;
  j["learning_rate"] = l.learning_rate;
  j["rmsprop_epsilon"] = l.rmsprop_epsilon;
  j["rmsprop_decay"] = l.rmsprop_decay;
  j["clip_norm"] = l.clip_norm ? json(*l.clip_norm) : json(nullptr);
  j["anneal_steps"] = l.anneal_steps;
  j["batch_size"] = l.batch_size;
  j["replay"] = l.replay;
  j["replay_capacity"] = l.replay_capacity;
  j["num_actors"] = r.num_actors;
  j["queue_capacity"] = r.queue_capacity;
  j["lag"] = r.fixed_lag ? json(*r.fixed_lag) : json("natural");
  j["max_updates"] = r.max_updates;
  j["total_env_frames"] = r.total_env_frames;
  j["deterministic"] = r.deterministic;
  j["eval_episodes"] = r.eval_episodes;
  j["seed"] = r.seed;
  j["archive_snapshots"] = r.archive_snapshots;
  j["transport"] = std::string(transport_name(c.transport));
  j["listen"] = c.listen;
  j["connect"] = c.connect;
  j["out"] = c.out_dir;
  j["actor_command"] = c.actor_command;
  j["a2c_workers"] = c.a2c_workers;
  j["reward_transform"] = std::string(envs::reward_transform_name(e.reward_transform));
  j["action_repeat"] = e.action_repeat;
  j["max_episode_steps"] = e.max_episode_steps;
  j["chain_length"] = e.chain_length;
  j["slip_probability"] = e.slip_probability;
  j["grid_width"] = e.grid_width;
  j["grid_height"] = e.grid_height;
  j["corridor_length"] = e.corridor_length;
  j["reveal_delay"] = e.reveal_delay;
  j["safe_reward"] = e.safe_reward;
  j["delay"] = delay_kind_name(e.step_delay.kind);
  j["delay_seconds"] = e.step_delay.seconds;
  j["delay_log_mean"] = e.step_delay.log_mean;
  j["delay_log_sigma"] = e.step_delay.log_sigma;
  j["sleep_on_step"] = e.sleep_on_step;
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_env_overrides(json& j, std::span<const std::string> environment) {
  const auto& keys = config_keys();
  for (const auto& entry : environment) {
    if (entry.rfind("IMPALA_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = lower(entry.substr(7, eq - 7));
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) continue;  // e.g. IMPALA_SIMD
    const std::string value = entry.substr(eq + 1);
    json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
    j[key] = parsed.is_discarded() ? json(value) : parsed;
  }
}

std::vector<std::string> process_environment() {
  std::vector<std::string> out;
  for (char** e = environ; e && *e; ++e) out.emplace_back(*e);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

void SweepSpec::validate() const {
  if (!(entropy_lo > 0.0 && entropy_lo < entropy_hi)) throw std::invalid_argument("entropy range needs 0 < lo < hi");
  if (!(learning_rate_lo > 0.0 && learning_rate_lo < learning_rate_hi)) {
    throw std::invalid_argument("learning-rate range needs 0 < lo < hi");
  }
  if (rmsprop_epsilons.empty()) throw std::invalid_argument("need at least one rmsprop epsilon");
  for (double e : rmsprop_epsilons) {
    if (!(e > 0.0)) throw std::invalid_argument("rmsprop epsilons must be > 0");
  }
  if (size < 1) throw std::invalid_argument("sweep size must be >= 1");
}

double sample_log_uniform(double lo, double hi, std::mt19937_64& rng) {
  if (!(lo > 0.0) || !(lo < hi)) throw std::invalid_argument("log-uniform range needs 0 < lo < hi");
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::clamp(std::exp(u(rng)), lo, hi);
}

std::vector<HyperParams> sample_sweep(const SweepSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, spec.rmsprop_epsilons.size() - 1);
  std::vector<HyperParams> out;
  for (int i = 0; i < spec.size; ++i) {
    HyperParams h;
    h.entropy_weight = sample_log_uniform(spec.entropy_lo, spec.entropy_hi, rng);
    h.learning_rate = sample_log_uniform(spec.learning_rate_lo, spec.learning_rate_hi, rng);
    h.rmsprop_epsilon = spec.rmsprop_epsilons[pick(rng)];
    out.push_back(h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scores

double capped_normalized_score(std::span<const double> scores, std::span<const double> human,
                               std::span<const double> random, std::span<const std::string> names) {
  if (scores.empty()) throw std::invalid_argument("capped_normalized_score: no tasks");
  if (human.size() != scores.size() || random.size() != scores.size()) {
    throw std::invalid_argument("capped_normalized_score: score, human and random lengths differ");
  }
  if (!names.empty() && names.size() != scores.size()) {
    throw std::invalid_argument("capped_normalized_score: one name per task expected");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < scores.size(); ++t) {
    if (human[t] == random[t]) {
      const std::string name = names.empty() ? "task " + std::to_string(t) : names[t];
      throw std::invalid_argument("capped_normalized_score: human and random references coincide for " + name);
    }
    total += std::min(1.0, (scores[t] - random[t]) / (human[t] - random[t]));
  }
  return total / static_cast<double>(scores.size());
}

ReferenceScores reference_scores(const envs::EnvSpec& task, double gamma, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("reference_scores: need at least one episode");
  envs::EnvSpec spec = task;
  spec.sleep_on_step = false;
  auto env = envs::make_env(spec, seed);
  const auto mdp = env->export_tabular(gamma);
  if (!mdp) throw std::invalid_argument("reference_scores: " + task.id + " has no tabular export");

  // Value iteration for the greedy optimal policy.
  const int S = mdp->num_states, A = mdp->num_actions;
  std::vector<double> v(static_cast<std::size_t>(S), 0.0), next(v.size());
  std::vector<int> greedy(v.size(), 0);
  for (int it = 0; it < 1'000'000; ++it) {
    double change = 0.0;
    for (int x = 0; x < S; ++x) {
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < A; ++a) {
        double q = mdp->r(x, a);
        const double* row = mdp->row(x, a);
        for (int y = 0; y < S; ++y) q += gamma * row[y] * v[static_cast<std::size_t>(y)];
        if (q > best + 1e-12) {
          best = q;
          greedy[static_cast<std::size_t>(x)] = a;
        }
      }
      next[static_cast<std::size_t>(x)] = best;
      change = std::max(change, std::abs(best - v[static_cast<std::size_t>(x)]));
    }
    v.swap(next);
    if (change < 1e-12) break;
  }

  std::mt19937_64 rng(seed ^ 0xBADC0DEull);
  std::uniform_int_distribution<int> uniform_action(0, env->num_actions() - 1);
  auto rollout = [&](bool optimal) {
    double total = 0.0;
    for (int e = 0; e < episodes; ++e) {
      env->reset();
      for (int s = 0; s < 100'000; ++s) {
        const int a = optimal ? greedy[static_cast<std::size_t>(env->state_index())] : uniform_action(rng);
        const auto r = env->step(a);
        total += r.reward;
        if (r.terminal) break;
      }
    }
    return total / episodes;
  };
  ReferenceScores out;
  out.human = rollout(true);
  out.random = rollout(false);
  return out;
}

double best_k_mean(std::vector<double> values, std::size_t k) {
  if (values.empty()) throw std::invalid_argument("best_k_mean: no values");
  std::sort(values.begin(), values.end(), std::greater<>());
  const std::size_t n = std::min(k, values.size());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += values[i];
  return s / static_cast<double>(n);
}

namespace {
double sorted_quantile(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}
}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: no values");
  std::sort(values.begin(), values.end());
  return sorted_quantile(values, 0.5);
}

std::pair<double, double> quartiles(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("quartiles: no values");
  std::sort(values.begin(), values.end());
  return {sorted_quantile(values, 0.25), sorted_quantile(values, 0.75)};
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(std::ostream& out, std::vector<std::string> extra_columns, int flush_every)
    : out_(out), extras_(extra_columns.size()), flush_every_(std::max(1, flush_every)) {
  out_ << kCsvHeader;
  for (const auto& c : extra_columns) out_ << ',' << c;
  out_ << '\n';
}

void CsvWriter::write(const UpdateMetrics& m, std::string_view variant, std::uint64_t seed,
                      const std::vector<std::string>& extra_values) {
  if (extra_values.size() != extras_) throw std::invalid_argument("CsvWriter: wrong number of extra values");
  out_ << m.update_index << ',' << m.env_frames << ',' << format_double(m.wall_clock_s) << ','
       << format_double(m.mean_return) << ',' << format_double(m.policy_lag) << ',' << format_double(m.mean_rho)
       << ',' << format_double(m.grad_norm) << ',' << variant << ',' << seed;
  for (const auto& v : extra_values) out_ << ',' << v;
  out_ << '\n';
  if (++pending_ >= flush_every_) flush();
}

void CsvWriter::flush() {
  out_.flush();
  pending_ = 0;
}

// ---------------------------------------------------------------------------
// Runs

std::vector<int> spawn_actor_processes(const std::string& command, const std::filesystem::path& config_file,
                                       const std::string& host, std::uint16_t port, int count) {
  std::vector<int> pids;
  const std::string address = host + ":" + std::to_string(port);
  for (int i = 0; i < count; ++i) {
    std::vector<std::string> args = {command, "actor", "--config", config_file.string(), "--connect", address,
                                     "--actor", std::to_string(i)};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    const int rc = ::posix_spawn(&pid, command.c_str(), nullptr, nullptr, argv.data(), environ);
    if (rc != 0) {
      for (int p : pids) ::kill(p, SIGTERM);
      wait_for_processes(pids);
      throw std::runtime_error("posix_spawn " + command + " failed: " + std::strerror(rc));
    }
    pids.push_back(pid);
  }
  return pids;
}

int wait_for_processes(const std::vector<int>& pids) {
  int ok = 0;
  for (int pid : pids) {
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (WIFEXITED(status) && WEXITSTATUS(status) == 0) ++ok;
  }
  return ok;
}

RunResult run_training(const ExperimentConfig& config, const MetricsCallback& on_update) {
  if (config.transport == Transport::kInProcess) return run_impala(config.run, on_update);

  const std::filesystem::path out(config.out_dir);
  std::filesystem::create_directories(out);
  const auto config_file = out / ("actor_config_" + std::to_string(::getpid()) + ".json");
  {
    std::ofstream f(config_file);
    ExperimentConfig actor_cfg = config;
    actor_cfg.transport = Transport::kInProcess;
    f << config_to_json(actor_cfg).dump(2) << '\n';
  }
  const std::string command = config.actor_command.empty() ? self_executable() : config.actor_command;
  std::string host = net::Address::parse(config.listen).host;
  if (host == "0.0.0.0") host = "127.0.0.1";
  std::vector<int> pids;
  std::vector<int> reaped;  // exit statuses of children that ended during training
  auto exited_ok = [](int status) { return WIFEXITED(status) && WEXITSTATUS(status) == 0; };
  // Actors only exit after the learner sends Shutdown, so any exit while
  // training is a lost actor.
  auto alive = [&] {
    for (int& pid : pids) {
      int status = 0;
      if (pid > 0 && ::waitpid(pid, &status, WNOHANG) == pid) {
        reaped.push_back(status);
        pid = -1;
        return false;
      }
    }
    return true;
  };
  auto remaining = [&] {
    std::vector<int> live;
    for (int pid : pids) {
      if (pid > 0) live.push_back(pid);
    }
    return live;
  };
  RunResult result;
  try {
    result = run_tcp_learner(
        config.run, config.listen,
        [&](std::uint16_t port) { pids = spawn_actor_processes(command, config_file, host, port, config.run.num_actors); },
        on_update, alive);
  } catch (...) {
    const auto live = remaining();
    for (int p : live) ::kill(p, SIGTERM);
    wait_for_processes(live);
    std::filesystem::remove(config_file);
    throw;
  }
  const auto live = remaining();
  std::size_t ok = static_cast<std::size_t>(wait_for_processes(live));
  ok += static_cast<std::size_t>(std::count_if(reaped.begin(), reaped.end(), exited_ok));
  std::filesystem::remove(config_file);
  if (ok != pids.size()) {
    throw std::runtime_error(std::to_string(pids.size() - ok) + " actor process(es) exited abnormally");
  }
  return result;
}

std::vector<GridCell> run_lag_grid(const ExperimentConfig& base, std::span<const std::uint64_t> ks,
                                   std::span<const CorrectionVariant> variants, std::span<const std::uint64_t> seeds,
                                   std::ostream* csv) {
  std::optional<CsvWriter> writer;
  if (csv) writer.emplace(*csv, std::vector<std::string>{"k"});
  std::vector<GridCell> cells;
  for (std::uint64_t k : ks) {
    for (const auto& v : variants) {
      for (std::uint64_t seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.run.fixed_lag = k;
        cfg.run.learner.variant = v;
        cfg.run.seed = seed;
        const std::string name(v.name());
        const std::vector<std::string> extra = {std::to_string(k)};
        const RunResult r = run_training(cfg, [&](const UpdateMetrics& m) {
          if (writer) writer->write(m, name, seed, extra);
        });
        cells.push_back({name, k, false, seed, r.final_return, tail_mean_lag(r)});
      }
    }
  }
  if (writer) writer->flush();
  return cells;
}

std::vector<GridCell> run_replay_grid(const ExperimentConfig& base, std::span<const CorrectionVariant> variants,
                                      std::span<const std::uint64_t> seeds, std::ostream* csv) {
  std::optional<CsvWriter> writer;
  if (csv) writer.emplace(*csv, std::vector<std::string>{"replay"});
  std::vector<GridCell> cells;
  for (const auto& v : variants) {
    for (bool replay : {false, true}) {
      for (std::uint64_t seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.run.learner.replay = replay;
        cfg.run.learner.variant = v;
        cfg.run.seed = seed;
        const std::string name(v.name());
        const std::vector<std::string> extra = {replay ? "1" : "0"};
        const RunResult r = run_training(cfg, [&](const UpdateMetrics& m) {
          if (writer) writer->write(m, name, seed, extra);
        });
        cells.push_back({name, cfg.run.fixed_lag.value_or(0), replay, seed, r.final_return, tail_mean_lag(r)});
      }
    }
  }
  if (writer) writer->flush();
  return cells;
}

std::vector<ThroughputRow> run_throughput(const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  cfg.run.deterministic = false;
  cfg.run.eval_episodes = 0;
  cfg.run.learner.batch_size = cfg.run.num_actors;
  cfg.run.learner.replay = false;
  cfg.run.fixed_lag.reset();
  const int workers = cfg.a2c_workers > 0 ? cfg.a2c_workers : cfg.run.num_actors;
  std::vector<ThroughputRow> rows;
  auto add = [&](const std::string& mode, const RunResult& r) {
    rows.push_back({mode, r.frames_per_second(), r.env_frames, r.wall_seconds});
  };
  add("impala", run_impala(cfg.run));
  add("sync_trajectory", run_batched_a2c(cfg.run, A2CMode::kSyncTrajectory, workers));
  add("sync_step", run_batched_a2c(cfg.run, A2CMode::kSyncStep, workers));
  return rows;
}

std::vector<SweepMember> run_sweep(const ExperimentConfig& base, const SweepSpec& spec, std::uint64_t sweep_seed,
                                   const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto hypers = sample_sweep(spec, sweep_seed);
  std::vector<SweepMember> members;
  for (std::size_t i = 0; i < hypers.size(); ++i) {
    ExperimentConfig cfg = base;
    cfg.run.learner.weights.entropy_weight = hypers[i].entropy_weight;
    cfg.run.learner.learning_rate = hypers[i].learning_rate;
    cfg.run.learner.rmsprop_epsilon = hypers[i].rmsprop_epsilon;
    std::ostringstream name;
    name << "member_" << std::setw(2) << std::setfill('0') << i << ".csv";
    std::ofstream f(out_dir / name.str());
    CsvWriter w(f);
    const std::string variant(cfg.run.learner.variant.name());
    const RunResult r = run_training(cfg, [&](const UpdateMetrics& m) { w.write(m, variant, cfg.run.seed); });
    w.flush();
    members.push_back({static_cast<int>(i), hypers[i], r.final_return});
  }
  std::vector<SweepMember> sorted = members;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const SweepMember& a, const SweepMember& b) { return a.final_return > b.final_return; });
  std::ofstream s(out_dir / "stability.csv");
  s << "rank,member,final_return,entropy_weight,learning_rate,rmsprop_epsilon,variant\n";
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& m = sorted[i];
    s << i << ',' << m.index << ',' << format_double(m.final_return) << ',' << format_double(m.hyper.entropy_weight)
      << ',' << format_double(m.hyper.learning_rate) << ',' << format_double(m.hyper.rmsprop_epsilon) << ','
      << base.run.learner.variant.name() << '\n';
  }
  return members;
}

json run_summary(const ExperimentConfig& config, const RunResult& result) {
  json j;
  j["final_return"] = result.final_return;
  j["updates"] = result.metrics.size();
  j["env_frames"] = result.env_frames;
  j["wall_seconds"] = result.wall_seconds;
  j["frames_per_second"] = result.frames_per_second();
  j["produced"] = result.produced;
  j["consumed"] = result.consumed;
  j["drained"] = result.drained;
  const envs::EnvSpec& spec = config.run.env;
  std::vector<envs::EnvSpec> tasks = spec.tasks.empty() ? std::vector<envs::EnvSpec>{spec} : spec.tasks;
  const int episodes = std::max(1, config.run.eval_episodes);
  std::vector<double> scores, human, random;
  std::vector<std::string> names;
  Model model(config.run.model_spec());
  try {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const auto ref = reference_scores(tasks[t], config.run.learner.vtrace.gamma, episodes, config.run.seed + t);
      double score = result.final_return;
      if (!spec.tasks.empty()) {
        auto env = envs::make_actor_env(spec, static_cast<int>(t), static_cast<int>(tasks.size()), config.run.seed + t);
        std::mt19937_64 rng(config.run.seed + 77 * t);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        double total = 0.0;
        for (int e = 0; e < episodes; ++e) {
          auto obs = env->reset();
          for (int s = 0; s < 100'000; ++s) {
            const auto out = model.forward(result.params, obs);
            auto r = env->step(sample_action(out.probs, unif(rng)));
            total += r.reward;
            if (r.terminal) break;
            obs = std::move(r.observation);
          }
        }
        score = total / episodes;
      }
      scores.push_back(score);
      human.push_back(ref.human);
      random.push_back(ref.random);
      names.push_back(tasks[t].id);
    }
    json per = json::array();
    for (std::size_t t = 0; t < scores.size(); ++t) {
      per.push_back({{"task", names[t]}, {"score", scores[t]}, {"human", human[t]}, {"random", random[t]}});
    }
    j["tasks"] = per;
    j["capped_normalized_score"] = capped_normalized_score(scores, human, random, names);
  } catch (const std::invalid_argument& e) {
    j["capped_normalized_score"] = nullptr;
    j["score_note"] = e.what();
  }
  return j;
}

std::vector<VerifyCheck> run_verify(std::uint64_t seed, int num_mdps) {
  using namespace tabular;
  std::vector<VerifyCheck> checks;
  const double rho_bars[] = {0.25, 1.0, 4.0, 1e9};

  // Fixed point and contraction on random MDPs.
  double worst_fp = 0.0, worst_excess = -1.0, worst_eta = 0.0, worst_cbar = 0.0;
  for (int i = 0; i < num_mdps; ++i) {
    const int S = 2 + i % 9, A = 2 + i % 3;
    const auto mdp = random_mdp(S, A, 0.9, seed + 101 * static_cast<std::uint64_t>(i));
    const auto target = random_policy(S, A, seed + 7 + 101 * static_cast<std::uint64_t>(i));
    const auto behavior = random_policy(S, A, seed + 13 + 101 * static_cast<std::uint64_t>(i));
    const int H = default_horizon(mdp);
    for (double rb : rho_bars) {
      VTraceConfig cfg;
      cfg.gamma = mdp.gamma;
      cfg.rho_bar = rb;
      cfg.c_bar = std::min(1.0, rb);
      const auto v_pi = policy_value(mdp, pi_rho_bar(target, behavior, rb));
      worst_fp = std::max(worst_fp, sup_norm(apply_vtrace_operator(mdp, v_pi, target, behavior, cfg, H) - v_pi));
      auto report = compute_eta(mdp, target, behavior, cfg, H);
      observe_contraction(report, mdp, target, behavior, cfg, H, 20, seed + static_cast<std::uint64_t>(i));
      worst_eta = std::max(worst_eta, report.eta_bound);
      for (double r : report.observed_ratios) worst_excess = std::max(worst_excess, r - report.eta_bound);
    }
    VTraceConfig cfg;
    cfg.gamma = mdp.gamma;
    cfg.rho_bar = 4.0;
    std::vector<ValueFunction> limits;
    for (double cb : {0.25, 1.0, 4.0}) {
      cfg.c_bar = cb;
      limits.push_back(iterate_vtrace_operator(mdp, target, behavior, cfg, H, ValueFunction::Zero(S), 1e-13, 10'000).value);
    }
    for (std::size_t a = 1; a < limits.size(); ++a) worst_cbar = std::max(worst_cbar, sup_norm(limits[a] - limits[0]));
  }
  auto fmt = [](double v) { return format_double(v); };
  checks.push_back({"fixed-point", worst_fp <= 1e-8, "max ||R V - V|| = " + fmt(worst_fp)});
  checks.push_back({"contraction", worst_excess <= 1e-9 && worst_eta < 1.0,
                    "max eta = " + fmt(worst_eta) + ", max ratio - eta = " + fmt(worst_excess)});
  checks.push_back({"c_bar-independence", worst_cbar <= 1e-6, "max limit gap = " + fmt(worst_cbar)});

  // Online V-trace on chain-5.
  {
    auto env = envs::make_env(envs::spec_from_id("chain-5"), seed);
    const auto mdp = *env->export_tabular(0.9);
    const auto behavior = TabularPolicy::uniform(mdp.num_states, mdp.num_actions);
    const auto target = random_policy(mdp.num_states, mdp.num_actions, seed + 3);
    VTraceConfig cfg;
    cfg.gamma = mdp.gamma;
    const auto v_pi = policy_value(mdp, pi_rho_bar(target, behavior, cfg.rho_bar));
    const double span = v_pi.maxCoeff() - v_pi.minCoeff();
    int ok = 0;
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      OnlineOptions o;
      o.seed = seed + s;
      const double err = sup_norm(online_vtrace(mdp, target, behavior, cfg, o) - v_pi);
      worst = std::max(worst, err / span);
      if (err <= 0.05 * span) ++ok;
    }
    checks.push_back({"online-convergence", ok == 10, std::to_string(ok) + "/10 seeds, worst error/span = " + fmt(worst)});
  }

  // q_s identities by Monte-Carlo.
  {
    const auto mdp = random_mdp(3, 2, 0.9, seed + 5);
    const auto target = random_policy(3, 2, seed + 6);
    const auto behavior = random_policy(3, 2, seed + 8);
    VTraceConfig cfg;
    cfg.gamma = mdp.gamma;
    const auto rep = qs_unbiasedness_check(mdp, target, behavior, cfg, 20'000, seed + 9);
    checks.push_back({"qs-unbiasedness", rep.passed, std::to_string(rep.rows.size()) + " state-action pairs"});
  }
  return checks;
}

}  // namespace impala::experiments
