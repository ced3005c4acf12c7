#pragma once

#include <stdexcept>
#include <string>

namespace cachesteer {

// Exit codes used by the CLI. Library code throws; only the CLI maps to codes.
enum class ErrorCode : int {
  ok = 0,
  internal = 1,
  config = 2,
  data = 3,
  compatibility = 4,
  numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Invalid run configuration (bad flag values, undefined combinations).
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorCode::config, what) {}
};

// Missing or malformed input data (corpora, datasets, caption files).
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorCode::data, what) {}
};

// Mismatched artifacts (checkpoint versions, vocab digests).
struct CompatibilityError : Error {
  explicit CompatibilityError(const std::string& what) : Error(ErrorCode::compatibility, what) {}
};

// Non-finite values or failed numeric contracts at runtime.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorCode::numeric, what) {}
};

// Tensor-level contract violations. These indicate misuse by calling code and
// are not expected to escape to the CLI on valid inputs.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorCode::internal, what) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error(ErrorCode::internal, what) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorCode::internal, what) {}
};

}  // namespace cachesteer
