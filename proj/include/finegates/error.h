#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace finegates {

enum class ErrorKind {
  ShapeMismatch,
  DegenerateVariance,
  NotSymmetric,
  WeightsNotNormalized,
  CacheMismatch,
  BadConfig,
  CheckpointMissing,
  IoError,
  ChecksumMismatch,
  VersionMismatch,
  Diverged,
  EmptyLayer,
  SnapshotsMissing,
  TooLarge,
  AssumptionViolated,
  MalformedRow,
  MissingColumn,
  EmptyFile,
  BadSpec,
};

std::string_view to_string(ErrorKind kind);

/// Library-wide exception; `kind()` lets callers branch without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace finegates
