#pragma once

#include <stdexcept>
#include <string>

namespace meshtron {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text or binary (OBJ, MTOK, PLY, config, checkpoint).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A value violates a documented precondition or type invariant.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Token sequence breaks the S/E/P framing.
class FramingError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure (non-finite loss, empty distribution).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace meshtron
