#pragma once

#include <stdexcept>
#include <string>

namespace elab {

// Base for every error the library raises. Callers that only care about
// "something went wrong" catch this; the subclasses name the failure class.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A token id outside [0, vocab_size).
class InvalidToken : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Prefix longer than the model's position table.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in a forward pass or optimizer state.
class NumericError : public Error {
 public:
  using Error::Error;
};

// KL(p||q) with q(v) == 0 where p(v) > 0.
class DivergenceUndefined : public Error {
 public:
  using Error::Error;
};

// No distribution satisfies the requested (entropy, outlier) constraints.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

class MigrationUndefined : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersion : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace elab
