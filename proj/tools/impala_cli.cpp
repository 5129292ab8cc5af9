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

// impala: train, sweep, verify, throughput, lag, replay, actor.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "impala/experiments.hpp"

namespace ex = impala::experiments;
using nlohmann::json;

namespace {

// Flags shared by every run-style subcommand. Unset flags leave the config
// file and IMPALA_* environment untouched.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> transport;
  std::optional<std::string> listen;
  std::optional<std::string> connect;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "base seed");
  app->add_option("--transport", f.transport, "inproc or tcp")->check(CLI::IsMember({"inproc", "tcp"}));
  app->add_option("--listen", f.listen, "learner address host:port (tcp)");
  app->add_option("--connect", f.connect, "learner address host:port (actor)");
  app->add_option("--out", f.out, "output directory");
}

ex::ExperimentConfig resolve(const CommonFlags& f) {
  json j = json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    j = json::parse(in, nullptr, true, true);
  }
  const auto env = ex::process_environment();
  ex::apply_env_overrides(j, env);
  if (f.seed) j["seed"] = *f.seed;
  if (f.transport) j["transport"] = *f.transport;
  if (f.listen) j["listen"] = *f.listen;
  if (f.connect) j["connect"] = *f.connect;
  if (f.out) j["out"] = *f.out;
  return ex::config_from_json(j);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& s, const char* what) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string(what) + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw std::invalid_argument(std::string(what) + ": empty list");
  return out;
}

std::vector<impala::CorrectionVariant> parse_variants(const std::string& s) {
  std::vector<impala::CorrectionVariant> out;
  for (const auto& item : split(s)) out.push_back(impala::CorrectionVariant::parse(item));
  if (out.empty()) throw std::invalid_argument("--variants: empty list");
  return out;
}

std::vector<std::uint64_t> seed_range(std::uint64_t base, int count) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < count; ++i) seeds.push_back(base + static_cast<std::uint64_t>(i));
  return seeds;
}

std::ofstream open_out(const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / name);
  if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
  return f;
}

void write_grid_summary(const std::filesystem::path& dir, const std::string& name,
                        const std::vector<ex::GridCell>& cells) {
  auto f = open_out(dir, name);
  f << "variant,k,replay,seed,final_return,mean_lag\n";
  for (const auto& c : cells) {
    f << c.variant << ',' << c.k << ',' << (c.replay ? 1 : 0) << ',' << c.seed << ','
      << ex::format_double(c.final_return) << ',' << ex::format_double(c.mean_lag) << '\n';
  }
}

int cmd_train(const CommonFlags& flags) {
  const auto cfg = resolve(flags);
  const std::filesystem::path out(cfg.out_dir);
  auto csv = open_out(out, "metrics.csv");
  ex::CsvWriter w(csv);
  const std::string variant(cfg.run.learner.variant.name());
  const auto result = ex::run_training(cfg, [&](const impala::UpdateMetrics& m) { w.write(m, variant, cfg.run.seed); });
  w.flush();
  const json summary = ex::run_summary(cfg, result);
  open_out(out, "summary.json") << summary.dump(2) << '\n';
  open_out(out, "config.json") << ex::config_to_json(cfg).dump(2) << '\n';
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_actor(const CommonFlags& flags, int actor) {
  const auto cfg = resolve(flags);
  if (cfg.connect.empty()) throw std::invalid_argument("actor needs --connect host:port");
  const auto pushed = impala::run_tcp_actor(cfg.run, cfg.connect, actor);
  std::fprintf(stderr, "actor %d: %llu trajectories\n", actor, static_cast<unsigned long long>(pushed));
  return 0;
}

int cmd_sweep(const CommonFlags& flags, std::uint64_t sweep_seed, int size) {
  const auto cfg = resolve(flags);
  ex::SweepSpec spec;
  spec.size = size;
  const auto members = ex::run_sweep(cfg, spec, sweep_seed, cfg.out_dir);
  std::vector<double> finals;
  for (const auto& m : members) finals.push_back(m.final_return);
  json s;
  s["members"] = members.size();
  s["best_3_mean"] = ex::best_k_mean(finals, 3);
  s["median"] = ex::median(finals);
  open_out(cfg.out_dir, "summary.json") << s.dump(2) << '\n';
  std::cout << s.dump(2) << '\n';
  return 0;
}

int cmd_verify(std::uint64_t seed, int mdps) {
  const auto checks = ex::run_verify(seed, mdps);
  bool ok = true;
  std::printf("%-22s %-6s %s\n", "check", "result", "detail");
  for (const auto& c : checks) {
    std::printf("%-22s %-6s %s\n", c.name.c_str(), c.passed ? "PASS" : "FAIL", c.detail.c_str());
    ok = ok && c.passed;
  }
  return ok ? 0 : 1;
}

int cmd_throughput(const CommonFlags& flags) {
  const auto cfg = resolve(flags);
  const auto rows = ex::run_throughput(cfg);
  auto f = open_out(cfg.out_dir, "throughput.csv");
  f << "mode,frames_per_second,env_frames,wall_seconds\n";
  for (const auto& r : rows) {
    f << r.mode << ',' << ex::format_double(r.frames_per_second) << ',' << r.env_frames << ','
      << ex::format_double(r.wall_seconds) << '\n';
    std::printf("%-16s %12.1f frames/s  (%llu frames, %.3f s)\n", r.mode.c_str(), r.frames_per_second,
                static_cast<unsigned long long>(r.env_frames), r.wall_seconds);
  }
  return 0;
}

int cmd_lag(const CommonFlags& flags, const std::string& ks, const std::string& variants, int seeds) {
  auto cfg = resolve(flags);
  const auto k = parse_u64_list(ks, "--k");
  const auto v = parse_variants(variants);
  const auto s = seed_range(cfg.run.seed, seeds);
  auto csv = open_out(cfg.out_dir, "lag.csv");
  const auto cells = ex::run_lag_grid(cfg, k, v, s, &csv);
  write_grid_summary(cfg.out_dir, "lag_summary.csv", cells);
  return 0;
}

int cmd_replay(const CommonFlags& flags, const std::string& variants, int seeds) {
  auto cfg = resolve(flags);
  const auto v = parse_variants(variants);
  const auto s = seed_range(cfg.run.seed, seeds);
  auto csv = open_out(cfg.out_dir, "replay.csv");
  const auto cells = ex::run_replay_grid(cfg, v, s, &csv);
  write_grid_summary(cfg.out_dir, "replay_summary.csv", cells);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled actor-learner training with V-trace on toy environments"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto* train = app.add_subcommand("train", "single training run; writes metrics.csv and summary.json");
  add_common(train, flags);

  int actor_index = 0;
  auto* actor = app.add_subcommand("actor", "remote actor process for a tcp learner");
  add_common(actor, flags);
  actor->add_option("--actor", actor_index, "actor index")->check(CLI::NonNegativeNumber);

  std::uint64_t sweep_seed = 0;
  int sweep_size = 24;
  auto* sweep = app.add_subcommand("sweep", "hyperparameter sweep; one CSV per member plus stability.csv");
  add_common(sweep, flags);
  sweep->add_option("--sweep-seed", sweep_seed, "seed for hyperparameter sampling");
  sweep->add_option("--size", sweep_size, "number of members")->check(CLI::PositiveNumber);

  std::uint64_t verify_seed = 0;
  int verify_mdps = 20;
  auto* verify = app.add_subcommand("verify", "tabular theorem suite; nonzero exit on any failure");
  verify->add_option("--seed", verify_seed, "seed for random MDPs");
  verify->add_option("--mdps", verify_mdps, "number of random MDPs")->check(CLI::PositiveNumber);

  auto* throughput = app.add_subcommand("throughput", "frames/s of decoupled vs batched A2C modes");
  add_common(throughput, flags);

  std::string ks = "0,10,100,500";
  std::string variants = "vtrace,none,eps,onestep";
  int lag_seeds = 10;
  auto* lag = app.add_subcommand("lag", "fixed policy-lag grid over k x variant x seed");
  add_common(lag, flags);
  lag->add_option("--k", ks, "comma-separated lags");
  lag->add_option("--variants", variants, "comma-separated correction variants");
  lag->add_option("--seeds", lag_seeds, "seeds per cell")->check(CLI::PositiveNumber);

  std::string replay_variants = "vtrace,none,eps,onestep";
  int replay_seeds = 10;
  auto* replay = app.add_subcommand("replay", "variant x {no replay, 50% replay} grid");
  add_common(replay, flags);
  replay->add_option("--variants", replay_variants, "comma-separated correction variants");
  replay->add_option("--seeds", replay_seeds, "seeds per cell")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(flags);
    if (*actor) return cmd_actor(flags, actor_index);
    if (*sweep) return cmd_sweep(flags, sweep_seed, sweep_size);
    if (*verify) return cmd_verify(verify_seed, verify_mdps);
    if (*throughput) return cmd_throughput(flags);
    if (*lag) return cmd_lag(flags, ks, variants, lag_seeds);
    if (*replay) return cmd_replay(flags, replay_variants, replay_seeds);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
