#pragma once

#include <stdexcept>
#include <string>

namespace fedhar {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Malformed input file (CSV, JSON config, checkpoint header).
struct FormatError : Error {
  using Error::Error;
};

// Batch or report with nothing to compute over (all-zero mask, no defined labels).
struct DegenerateError : Error {
  using Error::Error;
};

struct AvailabilityError : Error {
  using Error::Error;
};

struct AggregationError : Error {
  using Error::Error;
};

struct DecodeError : Error {
  using Error::Error;
};

struct ProtocolError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// A client missed the round deadline.
struct TimeoutError : Error {
  using Error::Error;
};

}  // namespace fedhar
