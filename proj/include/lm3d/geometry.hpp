#pragma once

// Planar transforms, 6D rotations and the pinhole camera. Everything here is
// double precision and pure; each differentiable kernel has a matching *_vjp
// (vector-Jacobian product) used by the model's backward pass.
//
// Coordinate conventions:
//   normalized image coords span [-1, 1] on both axes, x right, y down;
//   pixel i of a W-wide image has its center at (2i + 1) / W - 1;
//   camera frame is x right, y down, z forward (mm).

#include <array>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace lm3d::geometry {

using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Matrix23 = Eigen::Matrix<double, 2, 3>;

inline constexpr double kFixedFocalMm = 60.0;
inline constexpr double kSensorHalfWidthMm = 18.0;
inline constexpr double kNearPlaneMm = 1.0;
inline constexpr double kMinFocalMm = 1.01;
inline constexpr double kMinAbsDeterminant = 1e-8;

enum class TransformKind { similarity, affine };

/// Number of scalars parameterizing a transform of the given kind (4 or 6).
constexpr int param_count(TransformKind kind) noexcept {
  return kind == TransformKind::similarity ? 4 : 6;
}

class Affine2D;
Affine2D make_affine(TransformKind kind, std::span<const double> theta);

/// 2D similarity or affine transform in normalized image coordinates.
///
/// Similarity params are (s, alpha, tx, ty) with s > 0 and decode to
/// [[s cos a, -s sin a, tx], [s sin a, s cos a, ty]]. Affine params are the
/// six row-major entries of the 2x3 matrix. Construction rejects transforms
/// whose linear part has |det| <= 1e-8.
class Affine2D {
 public:
  Affine2D();  // identity similarity

  TransformKind kind() const noexcept { return kind_; }
  std::span<const double> params() const noexcept {
    return {params_.data(), static_cast<std::size_t>(param_count(kind_))};
  }
  const Matrix23& matrix() const noexcept { return matrix_; }

  Eigen::Vector2d apply(const Eigen::Vector2d& p) const {
    return matrix_.leftCols<2>() * p + matrix_.col(2);
  }

  static Affine2D similarity(double scale, double angle, double tx, double ty);
  static Affine2D from_matrix(const Matrix23& m);

 private:
  Affine2D(TransformKind kind, const std::array<double, 6>& params, const Matrix23& m);
  friend Affine2D make_affine(TransformKind kind, std::span<const double> theta);

  TransformKind kind_;
  std::array<double, 6> params_;
  Matrix23 matrix_;
};

/// Inverse transform; a similarity stays a similarity.
Affine2D invert(const Affine2D& a);

/// a(b(p)); the result is affine unless both inputs are similarities.
Affine2D compose(const Affine2D& a, const Affine2D& b);

Points2 apply_points(const Affine2D& a, const Eigen::Ref<const Points2>& pts);

/// Decodes params of the given kind into a 2x3 matrix without validation.
Matrix23 decode_matrix(TransformKind kind, std::span<const double> theta);

Matrix23 invert_matrix(const Matrix23& m);

struct ApplyPointsGrad {
  Matrix23 d_matrix;
  Points2 d_points;
};
ApplyPointsGrad apply_points_vjp(const Matrix23& m, const Eigen::Ref<const Points2>& pts,
                                 const Eigen::Ref<const Points2>& d_out);

/// Pulls a gradient on invert_matrix(m) back onto m.
Matrix23 invert_matrix_vjp(const Matrix23& m, const Matrix23& d_inverse);

/// Pulls a gradient on decode_matrix(kind, theta) back onto theta.
std::vector<double> decode_matrix_vjp(TransformKind kind, std::span<const double> theta,
                                      const Matrix23& d_matrix);

// --- rotations -------------------------------------------------------------

using Rot6d = std::array<double, 6>;  // (first column, second column), unnormalized

/// Gram-Schmidt decode; columns (e1, e2, e1 x e2). Throws DegenerateRotation.
Eigen::Matrix3d rot6d_to_matrix(std::span<const double, 6> r6);
Rot6d rot6d_vjp(std::span<const double, 6> r6, const Eigen::Matrix3d& d_rotation);
Rot6d matrix_to_rot6d(const Eigen::Matrix3d& r);

/// Geodesic angle between two rotations, radians.
double rotation_angle_between(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);

Eigen::Matrix3d euler_yxz_to_matrix(double yaw, double pitch, double roll);

// --- camera ----------------------------------------------------------------

/// Head pose plus focal displacement over the fixed 60 mm canonical focal.
struct PoseCamera {
  Rot6d rot6d{1, 0, 0, 0, 1, 0};
  Eigen::Vector3d translation{0, 0, 600};
  double focal_displacement = 0;

  Eigen::Matrix3d rotation() const { return rot6d_to_matrix(rot6d); }
  double effective_focal() const;
  Points3 to_camera(const Eigen::Ref<const Points3>& object_points) const;
  Eigen::Vector3d to_camera_point(const Eigen::Vector3d& object_point) const;
};

/// Pinhole projection to normalized screen units (+-1 is the sensor edge).
/// Throws BehindCamera if any z <= near plane.
Points2 project(const Eigen::Ref<const Points3>& camera_points, double focal_mm);
Eigen::Vector2d project_point(const Eigen::Vector3d& camera_point, double focal_mm);

struct ProjectGrad {
  Points3 d_points;
  double d_focal = 0;
};
ProjectGrad project_vjp(const Eigen::Ref<const Points3>& camera_points, double focal_mm,
                        const Eigen::Ref<const Points2>& d_out);

/// Inverse of project for a known depth.
Eigen::Vector3d unproject(const Eigen::Vector2d& normalized, double depth_mm, double focal_mm);

// --- landmark sets ---------------------------------------------------------

enum class CoordinateSpace { normalized, pixels };

struct LandmarkSet {
  CoordinateSpace space = CoordinateSpace::normalized;
  Points2 points2d;
  Eigen::VectorXd confidences;
  std::optional<Points3> points3d_canonical;
  std::optional<Points3> points3d_posed;
  std::optional<std::vector<bool>> visible;

  /// Throws InvalidArgument on non-positive confidences or size mismatches.
  void validate() const;
};

}  // namespace lm3d::geometry
