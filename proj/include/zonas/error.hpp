#pragma once

#include <stdexcept>
#include <string>

namespace zonas {

// Each error kind maps onto one CLI exit code (see tools/zonas.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced by an operation or a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A structural invariant was violated (e.g. an all-masked mixing set).
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition of an API (e.g. backward from a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace zonas
