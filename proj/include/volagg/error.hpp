#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace volagg {

enum class ErrorKind {
  InvalidInput,
  Parse,
  DimensionMismatch,
  PointBehindCamera,
  InsufficientViews,
  DegenerateGeometry,
  DegenerateAlignment,
  ConfigMismatch,
  Config,
  RetryExhausted,
  NumericalFailure,
  Autodiff,
  Io,
};

std::string_view to_string(ErrorKind kind);

// Invalid input/config kinds map to CLI exit code 2, everything else to 1.
bool is_input_error(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace volagg
