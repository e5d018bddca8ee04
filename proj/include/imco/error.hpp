#pragma once

#include <stdexcept>
#include <string>

namespace imco {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Matrix or store dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A class label outside the range the consumer can handle.
class LabelError : public Error {
 public:
  using Error::Error;
};

/// Invalid sizes, ranges or option values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text. The message carries the offending line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Not enough classes or samples to draw the requested episode.
class SamplingError : public Error {
 public:
  using Error::Error;
};

/// A training stage tried to read data it is not allowed to see.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace imco
