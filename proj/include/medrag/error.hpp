#pragma once

#include <stdexcept>
#include <string>

namespace medrag {

// Base of everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition (CLI exit code 2).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vectors and other inputs with no direction.
class DegenerateInputError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

// Malformed files, I/O failures, version mismatches (CLI exit code 3).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Stored content digest does not match the recomputed one.
class TamperError : public FormatError {
 public:
  using FormatError::FormatError;
};

// NaN/Inf showed up where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace medrag
