#pragma once

#include <stdexcept>
#include <string>

namespace rfc {

/// Base class for every error raised by the library. `code()` is a stable,
/// machine-readable identifier used by the CLI error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& message) : Error("invalid_argument", message) {}
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& message)
      : Error("io_error", path + ": " + message), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed input file; carries the 1-based data row (0 for the header) and column name.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::string column, const std::string& message)
      : Error("parse_error", "row " + std::to_string(row) + ", column '" + column + "': " + message),
        row_(row),
        column_(std::move(column)) {}
  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class NonFiniteValue : public Error {
 public:
  NonFiniteValue(std::size_t row, std::string column)
      : Error("non_finite_value",
              "row " + std::to_string(row) + ", column '" + column + "': non-finite feature value"),
        row_(row),
        column_(std::move(column)) {}
  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class MissingColumn : public Error {
 public:
  explicit MissingColumn(std::string column)
      : Error("missing_column", "required column '" + column + "' not found in header"),
        column_(std::move(column)) {}
  const std::string& column() const noexcept { return column_; }

 private:
  std::string column_;
};

/// Failure inside a black-box oracle call, tagged with the query index.
class OracleError : public Error {
 public:
  OracleError(std::size_t query, const std::string& message)
      : Error("oracle_error", "oracle query " + std::to_string(query) + ": " + message),
        query_(query) {}
  std::size_t query() const noexcept { return query_; }

 private:
  std::size_t query_;
};

/// Training diverged; the message carries the epoch and loss breakdown.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(int epoch, const std::string& message)
      : Error("non_finite_loss", "epoch " + std::to_string(epoch) + ": " + message), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace rfc
