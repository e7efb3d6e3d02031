#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace privreg {

// Failure classes surfaced by the library. Each maps to a stable
// kebab-case name that the CLI prints and tests match on.
enum class ErrorKind {
  DegenerateIntensity,
  GridMismatch,
  IncompleteTrio,
  DirectionMismatch,
  DegenerateAffine,
  UnrealizableConfig,
  ArchMismatch,
  Diverged,
  EmptyLandmark,
  DegenerateTest,
  PrivilegedNotAllowed,
  InvalidArgument,
  Io,
};

std::string_view kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail);

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view name() const noexcept { return kind_name(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& detail);

}  // namespace privreg
