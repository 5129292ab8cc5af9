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

#include <cstring>
#include <random>

#include "fixtures.hpp"
#include "impala/wire.hpp"

using namespace impala;
using namespace impala::wire;

TEST_CASE("crc32 check value") {
  const std::string s = "123456789";
  CHECK(crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
  CHECK(crc32({}) == 0u);
}

TEST_CASE("frame header layout") {
  const std::vector<std::uint8_t> payload = {0xAA, 0xBB};
  const auto f = encode_frame(MessageType::kSnapshot, payload);
  REQUIRE(f.size() == kHeaderSize + 2 + kTrailerSize);
  CHECK(std::memcmp(f.data(), "IMPL", 4) == 0);
  CHECK(f[4] == 1);
  CHECK(f[5] == 0);
  CHECK(f[6] == 3);
  CHECK(f[7] == 2);
  CHECK(f[8] == 0);
  CHECK(f[11] == 0xAA);
  CHECK(frame_size_from_header(f) == f.size());
  const auto back = decode_frame(f);
  CHECK(back.type == MessageType::kSnapshot);
  CHECK(back.payload == payload);
}

TEST_CASE("trajectory round trip is bit-exact") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 1000; ++i) {
    const auto t = fixtures::random_trajectory(rng);
    const auto bytes = encode_trajectory(t);
    const auto back = decode_trajectory(bytes);
    CHECK(back == t);
    CHECK(encode_trajectory(back) == bytes);
  }
}

TEST_CASE("golden snapshot frame") {
  ModelParams p;
  p.theta = {1.0};
  p.version = 2;
  const std::vector<std::uint8_t> golden = {
      0x49, 0x4d, 0x50, 0x4c, 0x01, 0x00, 0x03, 0x1c, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00,
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xf0, 0x3f, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
      0x00, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x12, 0x67, 0x93, 0x5b};
  CHECK(encode_snapshot(p) == golden);
  const std::vector<std::uint8_t> shutdown = {0x49, 0x4d, 0x50, 0x4c, 0x01, 0x00, 0x04, 0x00,
                                              0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00};
  CHECK(encode_frame(MessageType::kShutdown, {}) == shutdown);
}

TEST_CASE("snapshot round trip") {
  ModelParams p;
  p.theta = {1.5, -0.0, 1e-310};
  p.omega = {};
  p.shared_body = {3.25};
  p.version = 0xFFFFFFFFFFFFull;
  const auto back = decode_snapshot(encode_snapshot(p));
  CHECK(back == p);
  CHECK(std::signbit(back.theta[1]));
}

TEST_CASE("corruption is detected") {
  std::mt19937_64 rng(7);
  const auto t = fixtures::random_trajectory(rng);
  const auto good = encode_trajectory(t);

  SUBCASE("flipped payload byte") {
    auto bad = good;
    bad[kHeaderSize + 3] ^= 0x01;
    CHECK_THROWS_AS(decode_trajectory(bad), ChecksumError);
  }
  SUBCASE("flipped checksum byte") {
    auto bad = good;
    bad.back() ^= 0x80;
    CHECK_THROWS_AS(decode_trajectory(bad), ChecksumError);
  }
  SUBCASE("declared length longer than the data") {
    auto bad = good;
    bad.resize(bad.size() - 5);
    CHECK_THROWS_AS(decode_trajectory(bad), TruncatedError);
  }
  SUBCASE("short header") {
    CHECK_THROWS_AS(decode_frame(std::span(good).first(5)), TruncatedError);
  }
  SUBCASE("trailing bytes") {
    auto bad = good;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_trajectory(bad), MalformedPayloadError);
  }
  SUBCASE("bad magic") {
    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_trajectory(bad), BadMagicError);
  }
  SUBCASE("future version") {
    auto bad = good;
    bad[4] = 2;
    CHECK_THROWS_AS(decode_trajectory(bad), VersionError);
  }
  SUBCASE("unknown type") {
    auto bad = good;
    bad[6] = 9;
    CHECK_THROWS_AS(decode_trajectory(bad), UnknownTypeError);
  }
  SUBCASE("wrong message type") {
    CHECK_THROWS_AS(decode_snapshot(good), UnknownTypeError);
  }
  SUBCASE("oversized announcement is rejected from the header alone") {
    auto bad = good;
    bad[7] = bad[8] = bad[9] = bad[10] = 0xFF;
    CHECK_THROWS_AS(frame_size_from_header(bad), MalformedPayloadError);
  }
  SUBCASE("inner count larger than the payload") {
    // Well-checksummed frame whose first sequence claims 2^32-1 elements.
    std::vector<std::uint8_t> payload = {0xFF, 0xFF, 0xFF, 0xFF};
    const auto f = encode_frame(MessageType::kTrajectory, payload);
    CHECK_THROWS_AS(decode_trajectory(f), TruncatedError);
  }
  SUBCASE("every truncation fails cleanly") {
    for (std::size_t n = 0; n < good.size(); ++n) {
      CHECK_THROWS_AS(decode_trajectory(std::span(good).first(n)), WireError);
    }
  }
}
