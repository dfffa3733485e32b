#pragma once

#include <stdexcept>
#include <string>

namespace codevae {

/// Invalid argument: bad shape, out-of-range value, violated precondition.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A covariance block that could not be factorized.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t dimension)
      : std::runtime_error(what + " (latent dimension " + std::to_string(dimension) + ")"),
        dimension_(dimension) {}

  std::size_t dimension() const noexcept { return dimension_; }

 private:
  std::size_t dimension_;
};

/// Malformed, truncated or corrupted file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace codevae
