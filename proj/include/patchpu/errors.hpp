#pragma once

#include <stdexcept>
#include <string>

namespace patchpu {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (wrong rank, non-scalar root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not agree.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Invalid configuration value or inconsistent configs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced by a forward computation.
class NumericError : public Error {
 public:
  NumericError(const std::string& op, const std::string& what)
      : Error("numeric error in op '" + op + "': " + what), op_(op) {}

  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

/// Missing file, unknown label, unknown registered op, ...
class LookupError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace patchpu
