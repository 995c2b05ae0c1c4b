#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aspf {

// Every failure the library reports carries one of these codes so callers
// (and the CLI) can branch on the class of error instead of parsing text.
enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kNonFinite,
  kTapeConsumed,
  kNotScalar,
  kEmptyInput,
  kUnknownLayer,
  kNotConvLayer,
  kIo,
  kImageFormat,
  kLayout,
  kDuplicatePath,
  kManifestRecord,
  kUnknownSubject,
  kDetectorFailure,
  kBadMagic,
  kVersionMismatch,
  kTruncatedPayload,
  kHeaderParse,
  kTensorTable,
  kConfig,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace aspf
