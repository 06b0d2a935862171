#include "fadelab/error.hpp"

namespace fadelab {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kCorruptManifest: return "corrupt_manifest";
    case ErrorCode::kTruncatedBlob: return "truncated_blob";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kCountMismatch: return "count_mismatch";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace fadelab
