#pragma once

// Statistics fitted on a fold's base subjects and shipped to its clients with
// the base model: the feature standardizer and per-label positive weights.

#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedhar/checkpoint.hpp"
#include "fedhar/data.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/wire/codec.hpp"

namespace fedhar {

struct Preprocessing {
  Standardizer standardizer;
  std::vector<float> pos_weight;

  bool operator==(const Preprocessing&) const = default;
};

inline nlohmann::json preprocessing_to_json(const Preprocessing& p) {
  return {{"mean", p.standardizer.mean}, {"std", p.standardizer.std}, {"pos_weight", p.pos_weight}};
}

inline Preprocessing preprocessing_from_json(const nlohmann::json& j) {
  try {
    Preprocessing p;
    p.standardizer.mean = j.at("mean").get<std::vector<double>>();
    p.standardizer.std = j.at("std").get<std::vector<double>>();
    p.pos_weight = j.at("pos_weight").get<std::vector<float>>();
    if (p.standardizer.mean.size() != p.standardizer.std.size()) throw FormatError("mean/std length mismatch");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid preprocessing file: ") + e.what());
  }
}

inline void save_preprocessing(const std::filesystem::path& path, const Preprocessing& p) {
  write_text_atomic(path, preprocessing_to_json(p).dump(1));
}

inline Preprocessing load_preprocessing(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return preprocessing_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_preprocessing(wire::ByteWriter& w, const Preprocessing& p) {
  w.u32(static_cast<std::uint32_t>(p.standardizer.mean.size()));
  for (double v : p.standardizer.mean) w.f64(v);
  for (double v : p.standardizer.std) w.f64(v);
  w.u32(static_cast<std::uint32_t>(p.pos_weight.size()));
  for (float v : p.pos_weight) w.f32(v);
}

inline Preprocessing read_preprocessing(wire::ByteReader& r) {
  Preprocessing p;
  const std::size_t f = r.u32();
  if (f > r.remaining() / 16) throw DecodeError("standardizer length exceeds message");
  p.standardizer.mean.resize(f);
  p.standardizer.std.resize(f);
  for (auto& v : p.standardizer.mean) v = r.f64();
  for (auto& v : p.standardizer.std) v = r.f64();
  const std::size_t l = r.u32();
  if (l > r.remaining() / 4) throw DecodeError("pos_weight length exceeds message");
  p.pos_weight.resize(l);
  for (auto& v : p.pos_weight) v = r.f32();
  return p;
}

}  // namespace fedhar
