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

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "impala/models.hpp"
#include "impala/trajectory.hpp"

// Frame layout (little-endian), see docs/protocol.md:
//   "IMPL" | u16 version | u8 type | u32 payload_length | payload | u32 crc32(payload)
namespace impala::wire {

inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 11;
inline constexpr std::size_t kTrailerSize = 4;
// Frames announcing more than this are rejected before any allocation.
inline constexpr std::uint32_t kMaxPayload = 256u << 20;

enum class MessageType : std::uint8_t {
  kTrajectory = 1,
  kSnapshotRequest = 2,
  kSnapshot = 3,
  kShutdown = 4,
};

class WireError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TruncatedError : public WireError {
 public:
  using WireError::WireError;
};
class ChecksumError : public WireError {
 public:
  using WireError::WireError;
};
class VersionError : public WireError {
 public:
  using WireError::WireError;
};
class BadMagicError : public WireError {
 public:
  using WireError::WireError;
};
class UnknownTypeError : public WireError {
 public:
  using WireError::WireError;
};
// Well-framed payload whose contents do not parse (bad lengths, trailing bytes).
class MalformedPayloadError : public WireError {
 public:
  using WireError::WireError;
};

struct Frame {
  MessageType type = MessageType::kShutdown;
  std::vector<std::uint8_t> payload;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_frame(MessageType type, std::span<const std::uint8_t> payload);

/// Decodes exactly one frame occupying all of `bytes`.
Frame decode_frame(std::span<const std::uint8_t> bytes);

/// Validates a header and returns the full frame size it announces.
/// Throws TruncatedError if fewer than kHeaderSize bytes are given.
std::size_t frame_size_from_header(std::span<const std::uint8_t> header);

std::vector<std::uint8_t> encode_trajectory_payload(const Trajectory& t);
Trajectory decode_trajectory_payload(std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> encode_params_payload(const ModelParams& p);
ModelParams decode_params_payload(std::span<const std::uint8_t> payload);

/// Whole frames.
std::vector<std::uint8_t> encode_trajectory(const Trajectory& t);
Trajectory decode_trajectory(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_snapshot(const ModelParams& p);
ModelParams decode_snapshot(std::span<const std::uint8_t> bytes);

}  // namespace impala::wire
