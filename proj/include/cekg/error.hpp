#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cekg {

enum class ErrorCode {
  InvalidArgument,
  SchemaViolation,
  DanglingReference,
  DuplicateId,
  EmptyGraph,
  UnknownCulture,
  MalformedRecord,
  SingleCulture,
  IoFailure,
  FormatError,
  DimensionMismatch,
  OffManifold,
  UnknownId,
  ConfigInvalid,
  EmptyBatch,
  NonFiniteGradient,
  OutOfRangeRating,
  EmptyHistory,
  NoTemplates,
  EmptyConceptSet,
  IdealZeroMass,
  LengthMismatch,
  EmptyInput,
  NotFound,
  EmptyText,
};

std::string_view to_string(ErrorCode code);

// Every component failure carries a machine-readable code and, when raised
// during orchestration, the label of the stage that failed.
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

}  // namespace cekg
