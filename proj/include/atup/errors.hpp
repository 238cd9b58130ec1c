#pragma once

#include <stdexcept>
#include <string>

namespace atup {

/// Operand shapes disagree with what an operation requires.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A scalar hyper-parameter is outside its legal range.
struct ParamError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Every candidate of a softmax window is masked out.
struct EmptyWindowError : std::runtime_error {
  EmptyWindowError() : std::runtime_error("empty attention window") {}
  explicit EmptyWindowError(const std::string& where)
      : std::runtime_error("empty attention window: " + where) {}
};

/// Misuse of the recording tape (backward before forward, double consumption).
struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Malformed file contents. The message names the byte offset.
struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values encountered while optimizing.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace atup
