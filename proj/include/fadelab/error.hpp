#pragma once

#include <stdexcept>
#include <string>

namespace fadelab {

enum class ErrorCode {
  kShapeMismatch,
  kNonFinite,
  kInvalidArgument,
  kCorruptManifest,
  kTruncatedBlob,
  kBadMagic,
  kCountMismatch,
  kIo,
  kDiverged,
  kConfig,
};

const char* error_code_name(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace fadelab
