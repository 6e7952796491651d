#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fk {

enum class ErrorCode {
  SizeMismatch,
  ShapeMismatch,
  NonContiguousInput,
  OddHeadDim,
  TargetOutOfRange,
  NonFiniteProbe,
  UnbalancedFree,
  ShapeTooLarge,
  SchemaMismatch,
  NonFiniteLoss,
  InvalidArgument,
  ParseError,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define FK_CHECK(cond, code, msg)                \
  do {                                           \
    if (!(cond)) throw ::fk::Error((code), (msg)); \
  } while (0)

}  // namespace fk
