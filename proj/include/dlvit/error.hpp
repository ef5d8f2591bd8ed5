#pragma once

#include <stdexcept>
#include <string>

namespace dlvit {

// Process exit codes used by the CLI.
enum class ExitCode : int {
  ok = 0,
  config = 2,
  data = 3,
  numeric = 4,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Shape disagreement between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what, ExitCode::config) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error(what, ExitCode::config) {}
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what, ExitCode::config) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what, ExitCode::config) {}
};

// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, ExitCode::numeric) {}
};

// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(what, ExitCode::numeric) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error(what, ExitCode::data) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, ExitCode::data) {}
};

// Wrong magic or unsupported version.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, ExitCode::data) {}
};

// File ended early or holds inconsistent sizes.
class CorruptionError : public Error {
 public:
  CorruptionError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")", ExitCode::data), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace dlvit
