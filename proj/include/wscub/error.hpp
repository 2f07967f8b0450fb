#pragma once

#include <stdexcept>
#include <string>

namespace wscub {

enum class ErrorKind {
  kInvalidParameter,
  kUnsupportedDimension,
  kLevelTooLarge,
  kIndexOutOfRange,
  kTreeTooLarge,
  kDimensionMismatch,
  kManifestMismatch,
  kOracleUnavailable,
  kNoNullVector,
  kMatchFailure,
  kNonFiniteState,
  kSingularDiffusion,
  kNonFiniteGradient,
  kDivergenceDetected,
};

const char* to_string(ErrorKind kind) noexcept;

// Configuration errors map to CLI exit code 2, numerical failures to 3.
bool is_config_error(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace wscub
