#pragma once

#include <stdexcept>
#include <string>

namespace ciss {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI's error JSON.
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

/// Invalid configuration value; `field()` names the offending key.
class ConfigError : public Error {
public:
  ConfigError(std::string field, const std::string& what)
      : Error("config", field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

/// Violated precondition (shape mismatch, duplicate class, ...).
class ContractError : public Error {
public:
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class GenerationError : public Error {
public:
  explicit GenerationError(const std::string& what) : Error("generation", what) {}
};

/// Unreadable or corrupt file; the message always carries the path.
class LoadError : public Error {
public:
  LoadError(std::string path, const std::string& what)
      : Error("load", path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

private:
  std::string path_;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
public:
  explicit DivergenceError(const std::string& what) : Error("divergence", what) {}
};

#define CISS_REQUIRE(cond, msg)                 \
  do {                                          \
    if (!(cond)) throw ::ciss::ContractError(msg); \
  } while (0)

}  // namespace ciss
