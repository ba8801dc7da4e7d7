#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lm3d {

enum class ErrorCode {
  DegenerateTransform,
  ArityMismatch,
  DegenerateRotation,
  BehindCamera,
  EmptyRender,
  ShapeMismatch,
  RejectionExceeded,
  NonPositiveSigma,
  NonFiniteLoss,
  ZeroNormalization,
  AllStatic,
  IncompatibleCheckpoint,
  ConfigNotFound,
  ConfigInvalid,
  ShardNotFound,
  ImageUnreadable,
  Io,
  InvalidArgument,
};

/// Machine-parsable identifier printed by the CLI, e.g. "E_BEHIND_CAMERA".
std::string_view error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace lm3d
