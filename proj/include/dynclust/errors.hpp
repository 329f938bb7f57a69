#pragma once

#include <stdexcept>
#include <string>

namespace dynclust {

// Base class for everything this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments: wrong dimensions, non-finite matrices, parameters
// outside their domain.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// A numerical operation broke down (singular innovation covariance, ...).
// Carries the offending 0-based time index when one is known.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, int time_index = -1)
      : Error(what), time_index_(time_index) {}
  int time_index() const { return time_index_; }

 private:
  int time_index_;
};

// An internal invariant was violated (e.g. a monotone objective decreased).
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// A cluster lost all of its effective weight.
class EmptyClusterError : public Error {
 public:
  explicit EmptyClusterError(const std::string& what, int cluster = -1)
      : Error(what), cluster_(cluster) {}
  int cluster() const { return cluster_; }

 private:
  int cluster_;
};

// Every cluster's posterior weight collapsed to exact zero.
class DegeneratePosteriorError : public Error {
 public:
  using Error::Error;
};

class InitializationError : public Error {
 public:
  using Error::Error;
};

// Input data could not be parsed or failed validation. CLI exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

// A run configuration is missing fields or holds invalid ones. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dynclust
