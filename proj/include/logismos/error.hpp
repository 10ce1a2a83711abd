#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace logismos {

enum class ErrorCode {
  InvalidArgument,
  NotFound,
  FailedPrecondition,
  OutOfRange,
  Io,
  Infeasible,
  DetectionFailed,
  NoIntersection,
  Internal,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::FailedPrecondition: return "failed_precondition";
    case ErrorCode::OutOfRange: return "out_of_range";
    case ErrorCode::Io: return "io_error";
    case ErrorCode::Infeasible: return "infeasible";
    case ErrorCode::DetectionFailed: return "detection_failed";
    case ErrorCode::NoIntersection: return "no_intersection";
    case ErrorCode::Internal: return "internal";
  }
  return "internal";
}

/// Library-wide exception. `stage` names the pipeline step that failed and is
/// left empty by low-level code; callers that run multi-stage pipelines fill it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string stage = {})
      : std::runtime_error(message), code_(code), stage_(std::move(stage)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& stage() const noexcept { return stage_; }

  Error with_stage(std::string stage) const { return Error(code_, what(), std::move(stage)); }

 private:
  ErrorCode code_;
  std::string stage_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace logismos
