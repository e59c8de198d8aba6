#pragma once

#include <stdexcept>
#include <string>

namespace fidplan {

enum class ErrorKind {
  InvalidInput,
  Domain,
  NearSingular,
  Infeasible,
  Projection,
  Undistortion,
  Visibility,
  Estimation,
  SampleSize,
  Coverage,
  Validation,
  Parse,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::NearSingular: return "near-singular";
    case ErrorKind::Infeasible: return "infeasible";
    case ErrorKind::Projection: return "projection";
    case ErrorKind::Undistortion: return "undistortion";
    case ErrorKind::Visibility: return "visibility";
    case ErrorKind::Estimation: return "estimation";
    case ErrorKind::SampleSize: return "sample-size";
    case ErrorKind::Coverage: return "coverage";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Parse: return "parse";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), message_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// The message without the kind prefix.
  const std::string& message() const noexcept { return message_; }

  /// Same kind, with `context` appended to the message.
  Error with_context(const std::string& context) const { return {kind_, message_ + " " + context}; }

 private:
  ErrorKind kind_;
  std::string message_;
};

}  // namespace fidplan
