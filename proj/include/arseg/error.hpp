#pragma once

#include <stdexcept>
#include <string>

namespace arseg {

/// Base class for every error raised by the library. `kind()` is a stable,
/// machine-parsable tag used by the CLI when reporting failures.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct InvalidInput : Error {
  explicit InvalidInput(const std::string& what) : Error("invalid_input", what) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& what) : Error("index_error", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format_error", what) {}
};

struct StateError : Error {
  explicit StateError(const std::string& what) : Error("state_error", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io_error", what) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& what) : Error("divergence", what) {}
};

}  // namespace arseg
