#include "lm3d/error.hpp"

namespace lm3d {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DegenerateTransform: return "E_DEGENERATE_TRANSFORM";
    case ErrorCode::ArityMismatch: return "E_ARITY_MISMATCH";
    case ErrorCode::DegenerateRotation: return "E_DEGENERATE_ROTATION";
    case ErrorCode::BehindCamera: return "E_BEHIND_CAMERA";
    case ErrorCode::EmptyRender: return "E_EMPTY_RENDER";
    case ErrorCode::ShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::RejectionExceeded: return "E_REJECTION_EXCEEDED";
    case ErrorCode::NonPositiveSigma: return "E_NON_POSITIVE_SIGMA";
    case ErrorCode::NonFiniteLoss: return "E_NON_FINITE_LOSS";
    case ErrorCode::ZeroNormalization: return "E_ZERO_NORMALIZATION";
    case ErrorCode::AllStatic: return "E_ALL_STATIC";
    case ErrorCode::IncompatibleCheckpoint: return "E_INCOMPATIBLE_CHECKPOINT";
    case ErrorCode::ConfigNotFound: return "E_CONFIG_NOT_FOUND";
    case ErrorCode::ConfigInvalid: return "E_CONFIG_INVALID";
    case ErrorCode::ShardNotFound: return "E_SHARD_NOT_FOUND";
    case ErrorCode::ImageUnreadable: return "E_IMAGE_UNREADABLE";
    case ErrorCode::Io: return "E_IO";
    case ErrorCode::InvalidArgument: return "E_INVALID_ARGUMENT";
  }
  return "E_UNKNOWN";
}

}  // namespace lm3d
