#pragma once

// Frame: u32 little-endian length (type byte + payload), u8 type, payload.

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "fedhar/errors.hpp"
#include "fedhar/wire/codec.hpp"

namespace fedhar::wire {

inline constexpr std::uint32_t kMaxFrameLength = 1u << 30;

enum class MsgType : std::uint8_t {
  hello = 1,
  round_config = 2,
  fit_result = 3,
  eval_request = 4,
  eval_result = 5,
  done = 6,
  error = 7,
};

inline bool is_known_type(std::uint8_t t) noexcept { return t >= 1 && t <= 7; }

inline const char* type_name(MsgType t) noexcept {
  switch (t) {
    case MsgType::hello: return "HELLO";
    case MsgType::round_config: return "ROUND_CONFIG";
    case MsgType::fit_result: return "FIT_RESULT";
    case MsgType::eval_request: return "EVAL_REQUEST";
    case MsgType::eval_result: return "EVAL_RESULT";
    case MsgType::done: return "DONE";
    case MsgType::error: return "ERROR";
  }
  return "UNKNOWN";
}

struct Frame {
  MsgType type{};
  Bytes payload;
  bool operator==(const Frame&) const = default;
};

inline Bytes frame_encode(MsgType type, std::span<const std::uint8_t> payload) {
  if (payload.size() >= kMaxFrameLength) throw ProtocolError("payload of " + std::to_string(payload.size()) +
                                                             " bytes exceeds the frame limit");
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(payload.size() + 1));
  w.u8(static_cast<std::uint8_t>(type));
  w.bytes(payload);
  return w.take();
}

/// Incremental decoder: feed arbitrary chunks, pop complete frames. The header
/// is validated as soon as its 4 length bytes and type byte arrive, so a bogus
/// length never causes an allocation.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> chunk) {
    buf_.insert(buf_.end(), chunk.begin(), chunk.end());
    check_header();
  }

  std::optional<Frame> next() {
    if (buf_.size() - pos_ < 5) return std::nullopt;
    const std::uint32_t len = header_length();
    if (buf_.size() - pos_ < 4 + static_cast<std::size_t>(len)) return std::nullopt;
    Frame f;
    f.type = static_cast<MsgType>(buf_[pos_ + 4]);
    f.payload.assign(buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + 5),
                     buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + 4 + len));
    pos_ += 4 + len;
    if (pos_ == buf_.size()) {
      buf_.clear();
      pos_ = 0;
    } else if (pos_ > (1u << 20)) {
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
      pos_ = 0;
    }
    check_header();
    return f;
  }

  std::size_t buffered() const noexcept { return buf_.size() - pos_; }

  /// Call at end of stream; leftover bytes mean a frame was cut short.
  void finish() const {
    if (buffered() != 0) {
      throw DecodeError("truncated frame: stream ended with " + std::to_string(buffered()) + " unread bytes");
    }
  }

 private:
  std::uint32_t header_length() const {
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    return len;
  }

  void check_header() const {
    if (buf_.size() - pos_ >= 4) {
      const std::uint32_t len = header_length();
      if (len == 0) throw ProtocolError("frame length 0 leaves no room for a type byte");
      if (len > kMaxFrameLength) {
        throw ProtocolError("frame length " + std::to_string(len) + " exceeds limit " +
                            std::to_string(kMaxFrameLength));
      }
    }
    if (buf_.size() - pos_ >= 5 && !is_known_type(buf_[pos_ + 4])) {
      throw ProtocolError("unknown message type " + std::to_string(buf_[pos_ + 4]));
    }
  }

  Bytes buf_;
  std::size_t pos_ = 0;
};

/// Decodes exactly one frame from the front of `bytes`; returns it and the bytes consumed.
inline std::pair<Frame, std::size_t> frame_decode(std::span<const std::uint8_t> bytes) {
  FrameDecoder d;
  d.feed(bytes.first(std::min<std::size_t>(bytes.size(), 5)));
  if (bytes.size() < 5) throw DecodeError("truncated frame: " + std::to_string(bytes.size()) + " header bytes");
  ByteReader r(bytes);
  const std::size_t len = r.u32();
  if (bytes.size() < 4 + len) {
    throw DecodeError("truncated frame: declared " + std::to_string(len) + " bytes, have " +
                      std::to_string(bytes.size() - 4));
  }
  Frame f;
  f.type = static_cast<MsgType>(bytes[4]);
  f.payload.assign(bytes.begin() + 5, bytes.begin() + static_cast<std::ptrdiff_t>(4 + len));
  return {std::move(f), 4 + len};
}

}  // namespace fedhar::wire
