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

#include "impala/wire.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <limits>

namespace impala::wire {
namespace {

constexpr std::uint8_t kMagic[4] = {'I', 'M', 'P', 'L'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void count(std::size_t n) {
    if (n > std::numeric_limits<std::uint32_t>::max()) throw std::length_error("wire: sequence too long");
    u32(static_cast<std::uint32_t>(n));
  }
  void bytes(std::span<const std::uint8_t> b) {
    count(b.size());
    out_.insert(out_.end(), b.begin(), b.end());
  }
  void f64s(std::span<const double> v) {
    count(v.size());
    for (double x : v) f64(x);
  }

  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  // Reads a length prefix and checks `n * elem` bytes remain before anyone allocates.
  std::size_t count(std::size_t elem) {
    const std::size_t n = u32();
    if (elem > 0 && n > remaining() / elem) throw TruncatedError("wire: sequence length exceeds payload");
    return n;
  }
  std::vector<std::uint8_t> bytes() {
    const std::size_t n = count(1);
    std::vector<std::uint8_t> out(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return out;
  }
  std::vector<double> f64s() {
    std::vector<double> v(count(8));
    for (auto& x : v) x = f64();
    return v;
  }

  std::size_t remaining() const { return in_.size() - pos_; }
  void expect_end() const {
    if (remaining() != 0) throw MalformedPayloadError("wire: trailing bytes after payload");
  }

 private:
  std::uint64_t le(int width) {
    if (remaining() < static_cast<std::size_t>(width)) throw TruncatedError("wire: read past end of buffer");
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

bool known_type(std::uint8_t t) { return t >= 1 && t <= 4; }

Frame expect(std::span<const std::uint8_t> bytes, MessageType type) {
  Frame f = decode_frame(bytes);
  if (f.type != type) throw UnknownTypeError("wire: unexpected message type " + std::to_string(int(f.type)));
  return f;
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    c = ::crc32(c, bytes.data() + off, static_cast<uInt>(chunk));
    off += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

std::vector<std::uint8_t> encode_frame(MessageType type, std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) throw std::length_error("wire: payload exceeds maximum frame size");
  Writer w;
  for (std::uint8_t b : kMagic) w.u8(b);
  w.u16(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(type));
  w.u32(static_cast<std::uint32_t>(payload.size()));
  std::vector<std::uint8_t> out = w.take();
  out.insert(out.end(), payload.begin(), payload.end());
  Writer tail;
  tail.u32(crc32(payload));
  const auto t = tail.take();
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

std::size_t frame_size_from_header(std::span<const std::uint8_t> header) {
  if (header.size() < kHeaderSize) throw TruncatedError("wire: incomplete frame header");
  if (std::memcmp(header.data(), kMagic, 4) != 0) throw BadMagicError("wire: bad magic");
  Reader r(header.subspan(4, kHeaderSize - 4));
  const std::uint16_t version = r.u16();
  if (version != kProtocolVersion) {
    throw VersionError("wire: protocol version " + std::to_string(version) + ", expected " +
                       std::to_string(kProtocolVersion));
  }
  const std::uint8_t type = r.u8();
  if (!known_type(type)) throw UnknownTypeError("wire: unknown message type " + std::to_string(type));
  const std::uint32_t len = r.u32();
  if (len > kMaxPayload) throw MalformedPayloadError("wire: announced payload too large");
  return kHeaderSize + len + kTrailerSize;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  const std::size_t total = frame_size_from_header(bytes);
  if (bytes.size() < total) throw TruncatedError("wire: frame shorter than its declared length");
  if (bytes.size() > total) throw MalformedPayloadError("wire: trailing bytes after frame");
  Frame f;
  f.type = static_cast<MessageType>(bytes[6]);
  const auto payload = bytes.subspan(kHeaderSize, total - kHeaderSize - kTrailerSize);
  Reader tail(bytes.subspan(total - kTrailerSize));
  if (tail.u32() != crc32(payload)) throw ChecksumError("wire: payload checksum mismatch");
  f.payload.assign(payload.begin(), payload.end());
  return f;
}

std::vector<std::uint8_t> encode_trajectory_payload(const Trajectory& t) {
  Writer w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(t.env_id.data()), t.env_id.size()});
  w.count(t.observations.size());
  for (const auto& o : t.observations) w.f64s(o);
  w.count(t.actions.size());
  for (auto a : t.actions) w.i32(a);
  w.f64s(t.rewards);
  w.f64s(t.behavior_probs);
  w.bytes(t.terminal_flags);
  w.bytes(t.initial_agent_state);
  w.u64(t.policy_version);
  return w.take();
}

Trajectory decode_trajectory_payload(std::span<const std::uint8_t> payload) {
  Reader r(payload);
  Trajectory t;
  const auto id = r.bytes();
  t.env_id.assign(id.begin(), id.end());
  t.observations.resize(r.count(4));
  for (auto& o : t.observations) o = r.f64s();
  t.actions.resize(r.count(4));
  for (auto& a : t.actions) a = r.i32();
  t.rewards = r.f64s();
  t.behavior_probs = r.f64s();
  t.terminal_flags = r.bytes();
  t.initial_agent_state = r.bytes();
  t.policy_version = r.u64();
  r.expect_end();
  return t;
}

std::vector<std::uint8_t> encode_params_payload(const ModelParams& p) {
  Writer w;
  w.f64s(p.theta);
  w.f64s(p.omega);
  w.f64s(p.shared_body);
  w.u64(p.version);
  return w.take();
}

ModelParams decode_params_payload(std::span<const std::uint8_t> payload) {
  Reader r(payload);
  ModelParams p;
  p.theta = r.f64s();
  p.omega = r.f64s();
  p.shared_body = r.f64s();
  p.version = r.u64();
  r.expect_end();
  return p;
}

std::vector<std::uint8_t> encode_trajectory(const Trajectory& t) {
  return encode_frame(MessageType::kTrajectory, encode_trajectory_payload(t));
}

Trajectory decode_trajectory(std::span<const std::uint8_t> bytes) {
  return decode_trajectory_payload(expect(bytes, MessageType::kTrajectory).payload);
}

std::vector<std::uint8_t> encode_snapshot(const ModelParams& p) {
  return encode_frame(MessageType::kSnapshot, encode_params_payload(p));
}

ModelParams decode_snapshot(std::span<const std::uint8_t> bytes) {
  return decode_params_payload(expect(bytes, MessageType::kSnapshot).payload);
}

}  // namespace impala::wire
