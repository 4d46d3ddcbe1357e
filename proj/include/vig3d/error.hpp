#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vig3d {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two operands disagree along a named axis.
class DimensionMismatch : public Error {
 public:
  DimensionMismatch(std::string op, std::string axis, std::size_t expected, std::size_t actual)
      : Error(op + ": dimension mismatch on axis '" + axis + "' (expected " +
              std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
        op_(std::move(op)),
        axis_(std::move(axis)),
        expected_(expected),
        actual_(actual) {}

  const std::string& op() const { return op_; }
  const std::string& axis() const { return axis_; }
  std::size_t expected() const { return expected_; }
  std::size_t actual() const { return actual_; }

 private:
  std::string op_;
  std::string axis_;
  std::size_t expected_;
  std::size_t actual_;
};

/// Invalid configuration value (model, generator, CLI run config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file. `offset` is the byte offset where parsing failed.
class ParseError : public Error {
 public:
  enum class Kind { kMagicMismatch, kUnsupportedVersion, kBadField, kTruncated, kDimOverflow, kIo };

  ParseError(Kind kind, std::uint64_t offset, const std::string& what)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), kind_(kind), offset_(offset) {}

  Kind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::int64_t iteration = -1)
      : Error(what), iteration_(iteration) {}

  std::int64_t iteration() const { return iteration_; }

 private:
  std::int64_t iteration_;
};

/// A metric is undefined for this input (e.g. surface distance against an empty surface).
class UndefinedMetric : public Error {
 public:
  UndefinedMetric(const std::string& metric, const std::string& case_id)
      : Error(metric + " is undefined for case '" + case_id + "' (empty surface)"), case_id_(case_id) {}

  const std::string& case_id() const { return case_id_; }

 private:
  std::string case_id_;
};

}  // namespace vig3d
