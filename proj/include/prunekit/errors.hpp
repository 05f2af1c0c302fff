#pragma once

#include <stdexcept>
#include <string>

namespace prunekit {

// CLI exit codes. Library code throws; the CLI maps exception class to code.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
};

// Bad configuration: unreadable/unknown keys, invalid flag combinations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or missing run data: checkpoints, stage records, corpora.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses, failed numeric contracts.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Library contract misuse (parameter not on tape, missing gate sample, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Tensor shape mismatch; message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace prunekit
