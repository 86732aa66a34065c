#pragma once

// Checkpoint file: "FHG1", u16 version, model config block, weight blob.
// Config block: u8 field count, then per field u8 name length, name, u8 type
// tag ('i' signed, 'u' unsigned, 'f' binary64) and 8 little-endian bytes.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>

#include "fedhar/errors.hpp"
#include "fedhar/model.hpp"
#include "fedhar/wire/codec.hpp"

namespace fedhar {

inline constexpr char kCheckpointMagic[4] = {'F', 'H', 'G', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void tagged_field(wire::ByteWriter& w, std::string_view name, char tag, std::uint64_t bits) {
  w.u8(static_cast<std::uint8_t>(name.size()));
  w.raw(name);
  w.u8(static_cast<std::uint8_t>(tag));
  w.u64(bits);
}

}  // namespace detail

inline void write_model_config(wire::ByteWriter& w, const ModelConfig& c) {
  w.u8(8);
  auto i = [&](std::string_view n, int v) {
    detail::tagged_field(w, n, 'i', static_cast<std::uint64_t>(static_cast<std::int64_t>(v)));
  };
  i("n_features", c.n_features);
  i("n_labels", c.n_labels);
  i("transformers_layers", c.transformers_layers);
  i("hidden_size", c.hidden_size);
  i("n_positions", c.n_positions);
  i("n_heads", c.n_heads);
  detail::tagged_field(w, "dropout", 'f', std::bit_cast<std::uint64_t>(c.dropout));
  detail::tagged_field(w, "seed", 'u', c.seed);
}

inline ModelConfig read_model_config(wire::ByteReader& r) {
  const std::size_t n = r.u8();
  std::map<std::string, std::pair<char, std::uint64_t>> fields;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t len = r.u8();
    auto name_bytes = r.take(len);
    std::string name(reinterpret_cast<const char*>(name_bytes.data()), len);
    const char tag = static_cast<char>(r.u8());
    if (tag != 'i' && tag != 'u' && tag != 'f') throw DecodeError("config field " + name + " has unknown type tag");
    fields[name] = {tag, r.u64()};
  }
  auto get = [&](const std::string& name, char tag) {
    auto it = fields.find(name);
    if (it == fields.end()) throw DecodeError("config block is missing field " + name);
    if (it->second.first != tag) throw DecodeError("config field " + name + " has the wrong type");
    return it->second.second;
  };
  auto i = [&](const std::string& name) {
    const auto v = static_cast<std::int64_t>(get(name, 'i'));
    if (v <= 0 || v > (1 << 30)) throw DecodeError("config field " + name + " out of range");
    return static_cast<int>(v);
  };
  ModelConfig c;
  c.n_features = i("n_features");
  c.n_labels = i("n_labels");
  c.transformers_layers = i("transformers_layers");
  c.hidden_size = i("hidden_size");
  c.n_positions = i("n_positions");
  c.n_heads = i("n_heads");
  c.dropout = std::bit_cast<double>(get("dropout", 'f'));
  c.seed = get("seed", 'u');
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DecodeError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

struct Checkpoint {
  ModelConfig config;
  WeightSet weights;
};

inline wire::Bytes encode_checkpoint(const ModelConfig& config, const WeightSet& weights) {
  check_layout(weights, config);
  wire::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  write_model_config(w, config);
  w.bytes(wire::encode_weights(weights));
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  wire::ByteReader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw DecodeError("not a checkpoint: bad magic");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw DecodeError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config = read_model_config(r);
  ck.weights = wire::decode_weights(r.rest(), ck.config);
  return ck;
}

/// Writes to a sibling temp file then renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const WeightSet& weights) {
  write_file_atomic(path, encode_checkpoint(config, weights));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  wire::Bytes bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

}  // namespace fedhar
