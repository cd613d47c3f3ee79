#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lss {

/// Broad failure category. The CLI maps each category to a process exit code.
enum class ErrorKind {
  InvalidArgument,
  Config,
  Data,
  Numeric,
  Dependency,
};

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorKind::InvalidArgument, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// Malformed input file; carries the byte offset at which parsing failed.
class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Distinct reasons a serialized container can fail to load.
enum class LoadFailure { BadMagic, VersionMismatch, Truncated, CrcMismatch, Io };

class LoadError : public DataError {
 public:
  LoadError(LoadFailure failure, const std::string& what) : DataError(what), failure_(failure) {}
  LoadFailure failure() const noexcept { return failure_; }

 private:
  LoadFailure failure_;
};

class InfeasibleBudget : public ConfigError {
 public:
  explicit InfeasibleBudget(const std::string& what) : ConfigError(what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

/// Non-finite loss inside the student unroll.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, int step) : NumericError(what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

class DependencyError : public Error {
 public:
  explicit DependencyError(const std::string& what) : Error(ErrorKind::Dependency, what) {}
};

}  // namespace lss
