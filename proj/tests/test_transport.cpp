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

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <set>
#include <thread>

#include "impala/transport.hpp"

using namespace impala;
using namespace impala::net;

namespace {

Trajectory numbered(std::uint64_t id) {
  Trajectory t;
  t.env_id = "t";
  t.observations = {{1.0}, {2.0}};
  t.actions = {0};
  t.rewards = {0.5};
  t.behavior_probs = {1.0};
  t.terminal_flags = {0};
  t.policy_version = id;
  return t;
}

template <typename Pred>
bool eventually(Pred p, double seconds = 5.0) {
  const auto end = std::chrono::steady_clock::now() + std::chrono::duration<double>(seconds);
  while (std::chrono::steady_clock::now() < end) {
    if (p()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  return p();
}

// Plain socket so the test can write bytes that are not frames.
void send_raw(std::uint16_t port, const std::uint8_t* data, std::size_t n) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  REQUIRE(::send(fd, data, n, MSG_NOSIGNAL) == static_cast<ssize_t>(n));
  ::close(fd);
}

}  // namespace

TEST_CASE("address parsing") {
  const auto a = Address::parse("10.0.0.2:7000");
  CHECK(a.host == "10.0.0.2");
  CHECK(a.port == 7000);
  CHECK(a.to_string() == "10.0.0.2:7000");
  CHECK_THROWS_AS(Address::parse("nohost"), std::invalid_argument);
  CHECK_THROWS_AS(Address::parse("h:99999"), std::invalid_argument);
  CHECK_THROWS_AS(Address::parse("h:x1"), std::invalid_argument);
}

TEST_CASE("eight concurrent actors: every trajectory exactly once") {
  TrajectoryQueue queue(10000);
  SnapshotStore store;
  store.publish(std::make_shared<ModelParams>());
  LearnerServer server(Address{"127.0.0.1", 0}, queue, store);
  const int actors = 8, per_actor = 300;
  std::vector<std::thread> threads;
  for (int a = 0; a < actors; ++a) {
    threads.emplace_back([&, a] {
      ActorLink link(server.address());
      REQUIRE(link.fetch() != nullptr);
      for (int i = 0; i < per_actor; ++i) REQUIRE(link.push(numbered(std::uint64_t(a) * 100000 + i)));
    });
  }
  for (auto& t : threads) t.join();
  std::set<std::uint64_t> ids;
  std::set<int> sources;
  for (int i = 0; i < actors * per_actor; ++i) {
    auto e = queue.pop();
    REQUIRE(e.has_value());
    ids.insert(e->trajectory.policy_version);
    sources.insert(e->source);
  }
  CHECK(ids.size() == std::size_t(actors * per_actor));
  CHECK(sources.size() == std::size_t(actors));
  CHECK(queue.size() == 0);
  server.stop(2.0);
  CHECK(server.stats().trajectories.load() == std::uint64_t(actors * per_actor));
  CHECK(server.stats().discarded.load() == 0);
  CHECK(server.stats().connections.load() == std::uint64_t(actors));
  CHECK(server.stats().bad_frames.load() == 0);
}

TEST_CASE("shutdown reaches running actors within the drain timeout") {
  TrajectoryQueue queue(100000);
  SnapshotStore store;
  Model model(ModelSpec{ModelFamily::kLinear, 5, 2});
  store.publish(std::make_shared<ModelParams>(model.init(0)));
  LearnerServer server(Address{"127.0.0.1", 0}, queue, store);
  const int actors = 4;
  std::vector<std::thread> threads;
  std::vector<std::unique_ptr<ActorStats>> stats;
  std::atomic<int> exited{0};
  for (int a = 0; a < actors; ++a) {
    stats.push_back(std::make_unique<ActorStats>());
    threads.emplace_back([&, a] {
      auto env = envs::make_env(envs::spec_from_id("chain-5"), std::uint64_t(a));
      ActorLink link(server.address());
      std::atomic<bool> never{false};
      actor_loop(*env, model, link, link, ActorOptions{}, never, stats[std::size_t(a)].get());
      ++exited;
    });
  }
  REQUIRE(eventually([&] { return queue.size() >= 40; }));
  const auto t0 = std::chrono::steady_clock::now();
  server.stop(3.0);
  const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (auto& t : threads) t.join();
  CHECK(exited.load() == actors);
  CHECK(took < 3.0);
  std::uint64_t sent = 0;
  for (const auto& s : stats) sent += s->trajectories.load();
  CHECK(sent == server.stats().trajectories.load() + server.stats().discarded.load());
  CHECK(queue.size() == server.stats().trajectories.load());
}

TEST_CASE("garbage and half frames") {
  TrajectoryQueue queue(16);
  SnapshotStore store;
  LearnerServer server(Address{"127.0.0.1", 0}, queue, store);
  const std::uint8_t junk[16] = {'N', 'O', 'P', 'E'};
  send_raw(server.port(), junk, sizeof junk);
  CHECK(eventually([&] { return server.stats().bad_frames.load() == 1; }));
  const auto frame = wire::encode_trajectory(numbered(1));
  send_raw(server.port(), frame.data(), frame.size() / 2);
  CHECK(eventually([&] { return server.stats().partial_frames_dropped.load() == 1; }));
  CHECK(queue.size() == 0);
  server.stop(1.0);
}

TEST_CASE("actor link gives up on a dead address") {
  std::uint16_t port;
  {
    Listener l(Address{"127.0.0.1", 0});
    port = l.port();
  }
  ActorLink link(Address{"127.0.0.1", port}, BackoffOptions{0.001, 0.004, 3});
  CHECK_THROWS_AS(link.fetch(), SnapshotUnavailable);
}
