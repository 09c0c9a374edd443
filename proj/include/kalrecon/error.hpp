#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kalrecon {

enum class Errc {
  MalformedFileHeader,
  TruncatedRecord,
  HeaderFieldOutOfRange,
  InvariantViolation,
  IoFailure,
  LengthNotMultipleOfTwo,
  TooFewSessions,
  EmptyTrainingSet,
  SchemaMismatch,
  WidthMismatch,
  ShapeMismatch,
  NonScalarLoss,
  DoubleBackward,
  MissingGradient,
  EmptyVocabulary,
  ConfigInvariantViolation,
  ConfigInvalid,
  EmptyMask,
  EmptyInput,
  CheckpointMismatch,
};

constexpr std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::MalformedFileHeader: return "MalformedFileHeader";
    case Errc::TruncatedRecord: return "TruncatedRecord";
    case Errc::HeaderFieldOutOfRange: return "HeaderFieldOutOfRange";
    case Errc::InvariantViolation: return "InvariantViolation";
    case Errc::IoFailure: return "IoFailure";
    case Errc::LengthNotMultipleOfTwo: return "LengthNotMultipleOfTwo";
    case Errc::TooFewSessions: return "TooFewSessions";
    case Errc::EmptyTrainingSet: return "EmptyTrainingSet";
    case Errc::SchemaMismatch: return "SchemaMismatch";
    case Errc::WidthMismatch: return "WidthMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonScalarLoss: return "NonScalarLoss";
    case Errc::DoubleBackward: return "DoubleBackward";
    case Errc::MissingGradient: return "MissingGradient";
    case Errc::EmptyVocabulary: return "EmptyVocabulary";
    case Errc::ConfigInvariantViolation: return "ConfigInvariantViolation";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::CheckpointMismatch: return "CheckpointMismatch";
  }
  return "Unknown";
}

/// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace kalrecon
