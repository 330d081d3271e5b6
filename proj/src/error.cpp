#include "cekg/error.hpp"

namespace cekg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::DanglingReference: return "DanglingReference";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::UnknownCulture: return "UnknownCulture";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::SingleCulture: return "SingleCulture";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::OffManifold: return "OffManifold";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::OutOfRangeRating: return "OutOfRangeRating";
    case ErrorCode::EmptyHistory: return "EmptyHistory";
    case ErrorCode::NoTemplates: return "NoTemplates";
    case ErrorCode::EmptyConceptSet: return "EmptyConceptSet";
    case ErrorCode::IdealZeroMass: return "IdealZeroMass";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::EmptyText: return "EmptyText";
  }
  return "Unknown";
}

}  // namespace cekg
