#pragma once

// Little-endian byte encoding and the weight blob format:
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims..., f32 values...
//   then a u32 CRC-32 of everything before it.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedhar/errors.hpp"
#include "fedhar/model.hpp"

namespace fedhar::wire {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  /// u16 length prefix + UTF-8 bytes.
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw ProtocolError("string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }

  const Bytes& data() const noexcept { return buf_; }
  Bytes take() noexcept { return std::move(buf_); }
  std::size_t size() const noexcept { return buf_.size(); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return get_le<std::uint8_t>(); }
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  std::int64_t i64() { return static_cast<std::int64_t>(get_le<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

  std::string str16() {
    const std::size_t n = u16();
    return std::string(reinterpret_cast<const char*>(take(n).data()), n);
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::span<const std::uint8_t> rest() {
    auto out = data_.subspan(pos_);
    pos_ = data_.size();
    return out;
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) {
      throw DecodeError("truncated buffer at offset " + std::to_string(pos_) + ": need " + std::to_string(n) +
                        " bytes, have " + std::to_string(remaining()));
    }
  }

  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32(std::span<const std::uint8_t> data) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers
  std::size_t off = 0;
  while (off < data.size()) {
    const std::size_t n = std::min<std::size_t>(data.size() - off, 1u << 30);
    c = ::crc32(c, data.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str16(name);
  if (t.rank() > 0xFF) throw ProtocolError("tensor rank exceeds u8");
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw ProtocolError("tensor dimension exceeds u32");
    w.u32(static_cast<std::uint32_t>(d));
  }
  for (float v : t.data()) w.f32(v);
}

/// Tensor records in weight-set order, without the trailing CRC.
inline Bytes encode_tensors(const WeightSet& weights) {
  ByteWriter w;
  for (const auto& e : weights) write_tensor(w, e.name, e.tensor);
  return w.take();
}

inline Bytes encode_weights(const WeightSet& weights) {
  Bytes body = encode_tensors(weights);
  const std::uint32_t crc = crc32(body);
  ByteWriter w;
  w.bytes(body);
  w.u32(crc);
  return w.take();
}

namespace detail {

inline std::pair<std::string, Tensor> read_tensor(ByteReader& r) {
  const std::size_t at = r.offset();
  std::string name = r.str16();
  const std::size_t rank = r.u8();
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = r.u32();
    if (d == 0) throw DecodeError("tensor " + name + " at offset " + std::to_string(at) + " has a zero dimension");
    if (n > (std::size_t{1} << 40) / d) throw DecodeError("tensor " + name + " is implausibly large");
    n *= d;
  }
  if (r.remaining() < n * 4) {
    throw DecodeError("truncated buffer at offset " + std::to_string(r.offset()) + ": tensor " + name + " needs " +
                      std::to_string(n * 4) + " bytes");
  }
  std::vector<float> values(n);
  for (auto& v : values) v = r.f32();
  return {std::move(name), Tensor(std::move(shape), std::move(values))};
}

inline std::span<const std::uint8_t> verified_body(std::span<const std::uint8_t> blob) {
  if (blob.size() < 4) throw DecodeError("truncated buffer at offset 0: weight blob shorter than its checksum");
  const auto body = blob.first(blob.size() - 4);
  ByteReader tail(blob.subspan(blob.size() - 4));
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32(body);
  if (stored != actual) throw DecodeError("weight blob checksum mismatch");
  return body;
}

}  // namespace detail

/// Decodes any well-formed blob (checksum verified) without a shape contract.
inline WeightSet decode_weight_blob(std::span<const std::uint8_t> blob) {
  ByteReader r(detail::verified_body(blob));
  WeightSet ws;
  while (r.remaining() > 0) {
    auto [name, t] = detail::read_tensor(r);
    ws.add(std::move(name), std::move(t));
  }
  return ws;
}

/// Decodes and checks every tensor against the layout the config induces.
inline WeightSet decode_weights(std::span<const std::uint8_t> blob, const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  ByteReader r(detail::verified_body(blob));
  WeightSet ws;
  for (const auto& [expected_name, expected_shape] : layout) {
    auto [name, t] = detail::read_tensor(r);
    if (name != expected_name) throw DecodeError("expected tensor " + expected_name + ", found " + name);
    if (t.shape() != expected_shape) {
      throw DecodeError("tensor " + name + " has shape " + shape_str(t.shape()) + ", config expects " +
                        shape_str(expected_shape));
    }
    ws.add(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) {
    throw DecodeError("unexpected trailing data at offset " + std::to_string(r.offset()));
  }
  return ws;
}

}  // namespace fedhar::wire
