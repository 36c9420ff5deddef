#pragma once

#include <stdexcept>
#include <string>

namespace spatconf {

/// Malformed adjacency structure (out-of-range index, self-loop, bad size).
class InvalidGraph : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A CAR precision cannot be formed, e.g. a node without neighbours.
class DegeneratePrecision : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precision matrix that was required to be positive definite is not.
class NotPositiveDefinite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RankDeficient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The augmented design used for affine standard errors is singular.
class DegenerateStandardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// User configuration problems (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data problems (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace spatconf
