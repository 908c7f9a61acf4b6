#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace stcos {

/// Base of every error raised by the engine.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid numeric argument (zero area, nonpositive variance, non-PSD input).
class DomainError : public Error {
public:
  using Error::Error;
};

/// Malformed rings, degenerate polygons, empty bounding boxes.
class GeometryError : public Error {
public:
  using Error::Error;
};

/// Inconsistent settings or inputs (sizes, ranks, empty sets, unknown keys).
class ConfigurationError : public Error {
public:
  using Error::Error;
};

/// Factorization failures and rank problems.
class LinearAlgebraError : public Error {
public:
  using Error::Error;
};

/// Propagator with spectral radius >= 1.
class StabilityError : public Error {
public:
  using Error::Error;
};

/// Non-finite sampler state; carries the iteration at which it appeared.
class NumericalFailure : public Error {
public:
  NumericalFailure(const std::string& what, long iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}

  long iteration() const noexcept { return iteration_; }

private:
  long iteration_;
};

/// Fitted artifact does not match the basis/fine set requested at prediction time.
class ArtifactMismatch : public Error {
public:
  using Error::Error;
};

/// Accumulated per-file input problems, reported together.
class InputError : public Error {
public:
  InputError(std::string source, std::vector<std::string> issues)
      : Error(summarize(source, issues)), source_(std::move(source)), issues_(std::move(issues)) {}

  const std::string& source() const noexcept { return source_; }
  const std::vector<std::string>& issues() const noexcept { return issues_; }

private:
  static std::string summarize(const std::string& source, const std::vector<std::string>& issues) {
    std::string msg = source + ": " + std::to_string(issues.size()) + " problem(s)";
    for (const auto& issue : issues) {
      msg += "\n  ";
      msg += issue;
    }
    return msg;
  }

  std::string source_;
  std::vector<std::string> issues_;
};

}  // namespace stcos
