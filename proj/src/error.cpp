#include "privreg/error.hpp"

namespace privreg {

std::string_view kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateIntensity: return "degenerate-intensity";
    case ErrorKind::GridMismatch: return "grid-mismatch";
    case ErrorKind::IncompleteTrio: return "incomplete-trio";
    case ErrorKind::DirectionMismatch: return "direction-mismatch";
    case ErrorKind::DegenerateAffine: return "degenerate-affine";
    case ErrorKind::UnrealizableConfig: return "unrealizable-config";
    case ErrorKind::ArchMismatch: return "arch-mismatch";
    case ErrorKind::Diverged: return "diverged";
    case ErrorKind::EmptyLandmark: return "empty-landmark";
    case ErrorKind::DegenerateTest: return "degenerate-test";
    case ErrorKind::PrivilegedNotAllowed: return "privileged-not-allowed-at-inference";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::Io: return "io-error";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& detail)
    : std::runtime_error(std::string(kind_name(kind)) + ": " + detail), kind_(kind) {}

void fail(ErrorKind kind, const std::string& detail) { throw Error(kind, detail); }

}  // namespace privreg
