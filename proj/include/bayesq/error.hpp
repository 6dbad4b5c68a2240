#ifndef BAYESQ_ERROR_HPP
#define BAYESQ_ERROR_HPP

#include <stdexcept>
#include <string>

namespace bayesq {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent input (violated precondition, malformed argument).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated, or corrupted file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine could not produce a valid result (e.g. Cholesky failure).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration file or flag.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed; carries the stage name and offending block id.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string block, const std::string& what)
      : Error(stage + (block.empty() ? "" : " [block " + block + "]") + ": " + what),
        stage_(std::move(stage)),
        block_(std::move(block)) {}

  const std::string& stage() const noexcept { return stage_; }
  const std::string& block() const noexcept { return block_; }

 private:
  std::string stage_;
  std::string block_;
};

/// A verification (roundtrip / checksum / ledger replay) did not match.
class VerificationError : public Error {
 public:
  using Error::Error;
};

}  // namespace bayesq

#endif  // BAYESQ_ERROR_HPP
