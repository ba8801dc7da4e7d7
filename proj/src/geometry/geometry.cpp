#include "lm3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lm3d/error.hpp"

namespace lm3d::geometry {

namespace {

constexpr double kMinRotationNorm = 1e-8;

double linear_determinant(const Matrix23& m) {
  return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
}

void require_invertible(const Matrix23& m) {
  const double det = linear_determinant(m);
  if (!(std::abs(det) > kMinAbsDeterminant)) {
    throw Error(ErrorCode::DegenerateTransform,
                "affine linear part is singular (det=" + std::to_string(det) + ")");
  }
}

}  // namespace

Affine2D::Affine2D()
    : kind_(TransformKind::similarity), params_{1, 0, 0, 0, 0, 0}, matrix_(Matrix23::Zero()) {
  matrix_(0, 0) = 1;
  matrix_(1, 1) = 1;
}

Affine2D::Affine2D(TransformKind kind, const std::array<double, 6>& params, const Matrix23& m)
    : kind_(kind), params_(params), matrix_(m) {}

Affine2D Affine2D::similarity(double scale, double angle, double tx, double ty) {
  const std::array<double, 4> theta{scale, angle, tx, ty};
  return make_affine(TransformKind::similarity, theta);
}

Affine2D Affine2D::from_matrix(const Matrix23& m) {
  const std::array<double, 6> theta{m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2)};
  return make_affine(TransformKind::affine, theta);
}

Matrix23 decode_matrix(TransformKind kind, std::span<const double> theta) {
  Matrix23 m;
  if (kind == TransformKind::similarity) {
    const double s = theta[0];
    const double c = std::cos(theta[1]);
    const double sn = std::sin(theta[1]);
    m << s * c, -s * sn, theta[2], s * sn, s * c, theta[3];
  } else {
    m << theta[0], theta[1], theta[2], theta[3], theta[4], theta[5];
  }
  return m;
}

Affine2D make_affine(TransformKind kind, std::span<const double> theta) {
  const auto expected = static_cast<std::size_t>(param_count(kind));
  if (theta.size() != expected) {
    throw Error(ErrorCode::ArityMismatch, "transform expects " + std::to_string(expected) +
                                              " params, got " + std::to_string(theta.size()));
  }
  for (double v : theta) {
    if (!std::isfinite(v)) throw Error(ErrorCode::DegenerateTransform, "non-finite transform param");
  }
  if (kind == TransformKind::similarity && !(theta[0] > 0)) {
    throw Error(ErrorCode::DegenerateTransform, "similarity scale must be positive");
  }
  const Matrix23 m = decode_matrix(kind, theta);
  require_invertible(m);
  std::array<double, 6> params{};
  std::copy(theta.begin(), theta.end(), params.begin());
  return Affine2D(kind, params, m);
}

Matrix23 invert_matrix(const Matrix23& m) {
  const Eigen::Matrix2d inv = m.leftCols<2>().inverse();
  Matrix23 out;
  out.leftCols<2>() = inv;
  out.col(2) = -inv * m.col(2);
  return out;
}

Affine2D invert(const Affine2D& a) {
  if (a.kind() == TransformKind::similarity) {
    const auto p = a.params();
    const double s = 1.0 / p[0];
    const double angle = -p[1];
    const Eigen::Vector2d t = -(Eigen::Rotation2Dd(angle).toRotationMatrix() * s) *
                              Eigen::Vector2d(p[2], p[3]);
    return Affine2D::similarity(s, angle, t.x(), t.y());
  }
  return Affine2D::from_matrix(invert_matrix(a.matrix()));
}

Affine2D compose(const Affine2D& a, const Affine2D& b) {
  if (a.kind() == TransformKind::similarity && b.kind() == TransformKind::similarity) {
    const auto pa = a.params();
    const auto pb = b.params();
    const Eigen::Vector2d t = a.apply(Eigen::Vector2d(pb[2], pb[3]));
    return Affine2D::similarity(pa[0] * pb[0], pa[1] + pb[1], t.x(), t.y());
  }
  Matrix23 m;
  m.leftCols<2>() = a.matrix().leftCols<2>() * b.matrix().leftCols<2>();
  m.col(2) = a.matrix().leftCols<2>() * b.matrix().col(2) + a.matrix().col(2);
  return Affine2D::from_matrix(m);
}

Points2 apply_points(const Affine2D& a, const Eigen::Ref<const Points2>& pts) {
  const Matrix23& m = a.matrix();
  Points2 out(pts.rows(), 2);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    out(i, 0) = m(0, 0) * pts(i, 0) + m(0, 1) * pts(i, 1) + m(0, 2);
    out(i, 1) = m(1, 0) * pts(i, 0) + m(1, 1) * pts(i, 1) + m(1, 2);
  }
  return out;
}

ApplyPointsGrad apply_points_vjp(const Matrix23& m, const Eigen::Ref<const Points2>& pts,
                                 const Eigen::Ref<const Points2>& d_out) {
  ApplyPointsGrad g{Matrix23::Zero(), Points2(pts.rows(), 2)};
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    for (int r = 0; r < 2; ++r) {
      g.d_matrix(r, 0) += d_out(i, r) * pts(i, 0);
      g.d_matrix(r, 1) += d_out(i, r) * pts(i, 1);
      g.d_matrix(r, 2) += d_out(i, r);
    }
    g.d_points(i, 0) = m(0, 0) * d_out(i, 0) + m(1, 0) * d_out(i, 1);
    g.d_points(i, 1) = m(0, 1) * d_out(i, 0) + m(1, 1) * d_out(i, 1);
  }
  return g;
}

Matrix23 invert_matrix_vjp(const Matrix23& m, const Matrix23& d_inverse) {
  // inv = [L^-1, -L^-1 t];  d(L^-1) = -L^-1 dL L^-1.
  const Eigen::Matrix2d li = m.leftCols<2>().inverse();
  const Eigen::Vector2d t = m.col(2);
  const Eigen::Matrix2d g_li = d_inverse.leftCols<2>();
  const Eigen::Vector2d g_ti = d_inverse.col(2);
  // ti = -li t  ->  dL(li) += -g_ti t^T ; dt += -li^T g_ti
  const Eigen::Matrix2d g_li_total = g_li - g_ti * t.transpose();
  Matrix23 dm;
  dm.leftCols<2>() = -li.transpose() * g_li_total * li.transpose();
  dm.col(2) = -li.transpose() * g_ti;
  return dm;
}

std::vector<double> decode_matrix_vjp(TransformKind kind, std::span<const double> theta,
                                      const Matrix23& d_matrix) {
  if (kind == TransformKind::affine) {
    return {d_matrix(0, 0), d_matrix(0, 1), d_matrix(0, 2),
            d_matrix(1, 0), d_matrix(1, 1), d_matrix(1, 2)};
  }
  const double s = theta[0];
  const double c = std::cos(theta[1]);
  const double sn = std::sin(theta[1]);
  const double ds = d_matrix(0, 0) * c - d_matrix(0, 1) * sn + d_matrix(1, 0) * sn +
                    d_matrix(1, 1) * c;
  const double da = s * (-d_matrix(0, 0) * sn - d_matrix(0, 1) * c + d_matrix(1, 0) * c -
                         d_matrix(1, 1) * sn);
  return {ds, da, d_matrix(0, 2), d_matrix(1, 2)};
}

// --- rotations -------------------------------------------------------------

Eigen::Matrix3d rot6d_to_matrix(std::span<const double, 6> r6) {
  const Eigen::Vector3d a1(r6[0], r6[1], r6[2]);
  const Eigen::Vector3d a2(r6[3], r6[4], r6[5]);
  const double n1 = a1.norm();
  if (!(n1 > kMinRotationNorm)) {
    throw Error(ErrorCode::DegenerateRotation, "6D rotation: first vector has near-zero norm");
  }
  const Eigen::Vector3d e1 = a1 / n1;
  const Eigen::Vector3d u = a2 - e1.dot(a2) * e1;
  const double nu = u.norm();
  if (!(nu > kMinRotationNorm)) {
    throw Error(ErrorCode::DegenerateRotation, "6D rotation: second vector is parallel to the first");
  }
  const Eigen::Vector3d e2 = u / nu;
  Eigen::Matrix3d r;
  r.col(0) = e1;
  r.col(1) = e2;
  r.col(2) = e1.cross(e2);
  return r;
}

Rot6d rot6d_vjp(std::span<const double, 6> r6, const Eigen::Matrix3d& d_rotation) {
  const Eigen::Vector3d a1(r6[0], r6[1], r6[2]);
  const Eigen::Vector3d a2(r6[3], r6[4], r6[5]);
  const double n1 = a1.norm();
  const Eigen::Vector3d e1 = a1 / n1;
  const Eigen::Vector3d u = a2 - e1.dot(a2) * e1;
  const double nu = u.norm();
  const Eigen::Vector3d e2 = u / nu;

  Eigen::Vector3d g1 = d_rotation.col(0);
  Eigen::Vector3d g2 = d_rotation.col(1);
  const Eigen::Vector3d g3 = d_rotation.col(2);
  g1 += e2.cross(g3);
  g2 += g3.cross(e1);

  const Eigen::Vector3d gu = (g2 - e2 * e2.dot(g2)) / nu;
  const Eigen::Vector3d ga2 = gu - e1 * e1.dot(gu);
  g1 += -e1.dot(a2) * gu - e1.dot(gu) * a2;
  const Eigen::Vector3d ga1 = (g1 - e1 * e1.dot(g1)) / n1;
  return {ga1.x(), ga1.y(), ga1.z(), ga2.x(), ga2.y(), ga2.z()};
}

Rot6d matrix_to_rot6d(const Eigen::Matrix3d& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

double rotation_angle_between(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

Eigen::Matrix3d euler_yxz_to_matrix(double yaw, double pitch, double roll) {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

// --- camera ----------------------------------------------------------------

double PoseCamera::effective_focal() const {
  return std::max(kFixedFocalMm + focal_displacement, kMinFocalMm);
}

Points3 PoseCamera::to_camera(const Eigen::Ref<const Points3>& object_points) const {
  const Eigen::Matrix3d r = rotation();
  Points3 out = object_points * r.transpose();
  out.rowwise() += translation.transpose();
  return out;
}

Eigen::Vector3d PoseCamera::to_camera_point(const Eigen::Vector3d& object_point) const {
  return rotation() * object_point + translation;
}

Eigen::Vector2d project_point(const Eigen::Vector3d& p, double focal_mm) {
  if (!(p.z() > kNearPlaneMm)) {
    throw Error(ErrorCode::BehindCamera, "point at z=" + std::to_string(p.z()) +
                                             " mm is behind the near plane");
  }
  const double k = focal_mm / kSensorHalfWidthMm;
  return {k * p.x() / p.z(), k * p.y() / p.z()};
}

Points2 project(const Eigen::Ref<const Points3>& pts, double focal_mm) {
  Points2 out(pts.rows(), 2);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    out.row(i) = project_point(Eigen::Vector3d(pts.row(i).transpose()), focal_mm).transpose();
  }
  return out;
}

ProjectGrad project_vjp(const Eigen::Ref<const Points3>& pts, double focal_mm,
                        const Eigen::Ref<const Points2>& d_out) {
  ProjectGrad g{Points3(pts.rows(), 3), 0.0};
  const double k = focal_mm / kSensorHalfWidthMm;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const double x = pts(i, 0);
    const double y = pts(i, 1);
    const double z = pts(i, 2);
    const double gx = d_out(i, 0);
    const double gy = d_out(i, 1);
    g.d_points(i, 0) = k * gx / z;
    g.d_points(i, 1) = k * gy / z;
    g.d_points(i, 2) = -k * (gx * x + gy * y) / (z * z);
    g.d_focal += (gx * x + gy * y) / (kSensorHalfWidthMm * z);
  }
  return g;
}

Eigen::Vector3d unproject(const Eigen::Vector2d& normalized, double depth_mm, double focal_mm) {
  const double k = focal_mm / kSensorHalfWidthMm;
  return {normalized.x() * depth_mm / k, normalized.y() * depth_mm / k, depth_mm};
}

// --- landmark sets ---------------------------------------------------------

void LandmarkSet::validate() const {
  const Eigen::Index k = points2d.rows();
  if (confidences.size() != k) {
    throw Error(ErrorCode::InvalidArgument, "landmark confidences do not match point count");
  }
  for (Eigen::Index i = 0; i < k; ++i) {
    if (!(confidences[i] > 0)) {
      throw Error(ErrorCode::InvalidArgument, "landmark confidence must be strictly positive");
    }
  }
  if (points3d_canonical && points3d_canonical->rows() != k) {
    throw Error(ErrorCode::InvalidArgument, "canonical 3D landmarks do not match point count");
  }
  if (points3d_posed && points3d_posed->rows() != k) {
    throw Error(ErrorCode::InvalidArgument, "posed 3D landmarks do not match point count");
  }
  if (visible && static_cast<Eigen::Index>(visible->size()) != k) {
    throw Error(ErrorCode::InvalidArgument, "visibility flags do not match point count");
  }
}

}  // namespace lm3d::geometry
