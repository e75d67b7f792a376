#pragma once

#include <stdexcept>
#include <string>

namespace m3bs {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/array dimensions do not agree with an operation's contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

// Caller supplied an argument outside its documented domain.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation error: " + what) {}
};

// Malformed or truncated file contents.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error: " + what) {}
};

// Numerical failure during optimization (NaN/Inf loss, divergence).
class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& what) : Error("training error: " + what) {}
};

}  // namespace m3bs
