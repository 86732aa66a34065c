#pragma once

// Payload layouts of the protocol messages.

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "fedhar/checkpoint.hpp"
#include "fedhar/errors.hpp"
#include "fedhar/fedavg.hpp"
#include "fedhar/metrics.hpp"
#include "fedhar/preprocessing.hpp"
#include "fedhar/wire/codec.hpp"
#include "fedhar/wire/frame.hpp"

namespace fedhar::wire {

struct Hello {
  std::string client_id;
  std::uint64_t num_examples = 0;
  bool operator==(const Hello&) const = default;
};

inline Bytes encode_hello(const Hello& h) {
  ByteWriter w;
  w.str16(h.client_id);
  w.u64(h.num_examples);
  return w.take();
}

namespace detail {

inline void expect_end(const ByteReader& r, const char* what) {
  if (r.remaining() != 0) {
    throw DecodeError(std::string(what) + ": unexpected trailing data at offset " + std::to_string(r.offset()));
  }
}

}  // namespace detail

inline Hello decode_hello(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  Hello h;
  h.client_id = r.str16();
  h.num_examples = r.u64();
  detail::expect_end(r, "HELLO");
  if (h.client_id.empty()) throw DecodeError("HELLO carries an empty client id");
  return h;
}

struct RoundConfigMsg {
  RoundSpec spec;
  WeightSet weights;
};

inline Bytes encode_round_config(const RoundSpec& s, const WeightSet& weights) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(s.fold));
  w.u32(static_cast<std::uint32_t>(s.round));
  w.u32(static_cast<std::uint32_t>(s.attempt));
  write_model_config(w, s.model);
  write_preprocessing(w, s.prep);
  w.u64(s.data_seed);
  w.u32(static_cast<std::uint32_t>(s.local_epochs));
  w.u32(static_cast<std::uint32_t>(s.batch_size));
  w.f64(s.local_lr);
  w.u64(s.seed);
  w.bytes(encode_weights(weights));
  return w.take();
}

inline RoundConfigMsg decode_round_config(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  RoundConfigMsg m;
  m.spec.fold = static_cast<int>(r.u32());
  m.spec.round = static_cast<int>(r.u32());
  m.spec.attempt = static_cast<int>(r.u32());
  m.spec.model = read_model_config(r);
  m.spec.prep = read_preprocessing(r);
  m.spec.data_seed = r.u64();
  m.spec.local_epochs = static_cast<int>(r.u32());
  m.spec.batch_size = static_cast<int>(r.u32());
  m.spec.local_lr = r.f64();
  m.spec.seed = r.u64();
  if (m.spec.local_epochs < 1 || m.spec.batch_size < 1 || !(m.spec.local_lr > 0)) {
    throw DecodeError("ROUND_CONFIG carries invalid training settings");
  }
  m.weights = decode_weights(r.rest(), m.spec.model);
  return m;
}

struct FitResultMsg {
  int round = 0;
  int attempt = 0;
  ClientUpdate update;
};

inline Bytes encode_fit_result(int round, int attempt, const ClientUpdate& u) {
  ByteWriter w;
  w.str16(u.client_id);
  w.u32(static_cast<std::uint32_t>(round));
  w.u32(static_cast<std::uint32_t>(attempt));
  w.u64(u.num_examples);
  w.f64(u.train_loss);
  w.u8(u.skipped() ? 0 : 1);
  if (!u.skipped()) w.bytes(encode_weights(u.weights));
  return w.take();
}

inline FitResultMsg decode_fit_result(std::span<const std::uint8_t> p, const ModelConfig& config) {
  ByteReader r(p);
  FitResultMsg m;
  m.update.client_id = r.str16();
  m.round = static_cast<int>(r.u32());
  m.attempt = static_cast<int>(r.u32());
  m.update.num_examples = r.u64();
  m.update.train_loss = r.f64();
  const auto has_weights = r.u8();
  if (has_weights > 1) throw DecodeError("FIT_RESULT weights flag must be 0 or 1");
  if ((has_weights == 1) != (m.update.num_examples > 0)) {
    throw DecodeError("FIT_RESULT weights flag disagrees with its example count");
  }
  if (has_weights) {
    m.update.weights = decode_weights(r.rest(), config);
  } else {
    detail::expect_end(r, "FIT_RESULT");
  }
  return m;
}

struct EvalRequestMsg {
  int round = 0;
  WeightSet weights;
};

inline Bytes encode_eval_request(int round, const WeightSet& weights) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(round));
  w.bytes(encode_weights(weights));
  return w.take();
}

inline EvalRequestMsg decode_eval_request(std::span<const std::uint8_t> p, const ModelConfig& config) {
  ByteReader r(p);
  EvalRequestMsg m;
  m.round = static_cast<int>(r.u32());
  m.weights = decode_weights(r.rest(), config);
  return m;
}

struct EvalResultMsg {
  int round = 0;
  ClientReport report;
};

inline Bytes encode_eval_result(int round, const ClientReport& report) {
  const std::string text = nlohmann::json{{"round", round}, {"report", client_report_to_json(report)}}.dump();
  return Bytes(text.begin(), text.end());
}

inline EvalResultMsg decode_eval_result(std::span<const std::uint8_t> p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(p.begin(), p.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw DecodeError(std::string("EVAL_RESULT is not valid JSON: ") + e.what());
  }
  try {
    return {j.at("round").get<int>(), client_report_from_json(j.at("report"))};
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("EVAL_RESULT: ") + e.what());
  } catch (const FormatError& e) {
    throw DecodeError(std::string("EVAL_RESULT: ") + e.what());
  }
}

enum class ErrorCode : std::uint16_t {
  out_of_order = 1,
  malformed = 2,
  internal = 3,
  duplicate_client = 4,
};

inline const char* error_code_name(ErrorCode c) noexcept {
  switch (c) {
    case ErrorCode::out_of_order: return "out_of_order";
    case ErrorCode::malformed: return "malformed";
    case ErrorCode::internal: return "internal";
    case ErrorCode::duplicate_client: return "duplicate_client";
  }
  return "unknown";
}

struct ErrorMsg {
  ErrorCode code{};
  std::string message;
  bool operator==(const ErrorMsg&) const = default;
};

inline Bytes encode_error(const ErrorMsg& e) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(e.code));
  w.str16(e.message.size() > 0xFFFF ? e.message.substr(0, 0xFFFF) : e.message);
  return w.take();
}

inline ErrorMsg decode_error(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  ErrorMsg e;
  e.code = static_cast<ErrorCode>(r.u16());
  e.message = r.str16();
  detail::expect_end(r, "ERROR");
  return e;
}

}  // namespace fedhar::wire
