#include "aspf/error.hpp"

namespace aspf {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kTapeConsumed: return "tape consumed";
    case ErrorCode::kNotScalar: return "loss is not scalar";
    case ErrorCode::kEmptyInput: return "empty input";
    case ErrorCode::kUnknownLayer: return "unknown layer";
    case ErrorCode::kNotConvLayer: return "not a convolutional layer";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kImageFormat: return "image format";
    case ErrorCode::kLayout: return "unparseable layout";
    case ErrorCode::kDuplicatePath: return "duplicate path";
    case ErrorCode::kManifestRecord: return "bad manifest record";
    case ErrorCode::kUnknownSubject: return "unknown holdout subject";
    case ErrorCode::kDetectorFailure: return "detector failure";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kVersionMismatch: return "version mismatch";
    case ErrorCode::kTruncatedPayload: return "truncated payload";
    case ErrorCode::kHeaderParse: return "header parse";
    case ErrorCode::kTensorTable: return "shape/offset inconsistency";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace aspf
