#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefopt {

// Bad argument: out-of-range token id, empty sequence, non-positive length...
class InputDomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation called on an object that is not in the required state.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite loss or gradient. step is the 1-based training step, or 0 when
// raised outside a training loop.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t step = 0)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Malformed dataset or checkpoint file. line is 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace prefopt
