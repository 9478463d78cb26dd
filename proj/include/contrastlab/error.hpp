#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace clab {

enum class ErrorCode {
  shape,
  index,
  convergence,
  generation,
  enumeration,
  evaluation,
  divergence,
  parse,
  io,
  probe,
  invalid_argument,
};

const char* error_code_name(ErrorCode code) noexcept;

// Base of every error the library throws. The code is stable and maps 1:1
// onto the C API status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCode::shape, what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error(ErrorCode::index, what) {}
};

// Power iteration ran out of steps. Carries the last iterate so callers can
// still inspect how far it got.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> last_estimates,
                   int steps)
      : Error(ErrorCode::convergence, what),
        last_estimates_(std::move(last_estimates)),
        steps_(steps) {}

  const std::vector<double>& last_estimates() const noexcept { return last_estimates_; }
  int steps() const noexcept { return steps_; }

 private:
  std::vector<double> last_estimates_;
  int steps_;
};

class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, std::size_t attempts)
      : Error(ErrorCode::generation, what), attempts_(attempts) {}

  std::size_t attempts() const noexcept { return attempts_; }

 private:
  std::size_t attempts_;
};

class EnumerationError : public Error {
 public:
  explicit EnumerationError(const std::string& what)
      : Error(ErrorCode::enumeration, what) {}
};

class EvaluationError : public Error {
 public:
  explicit EvaluationError(const std::string& what)
      : Error(ErrorCode::evaluation, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(ErrorCode::parse, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::io, what) {}
};

class ProbeError : public Error {
 public:
  explicit ProbeError(const std::string& what) : Error(ErrorCode::probe, what) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCode::invalid_argument, what) {}
};

}  // namespace clab
