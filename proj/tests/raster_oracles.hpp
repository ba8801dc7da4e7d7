#pragma once

// Brute-force ray casting, the independent visibility oracle shared by the
// raster suite and the acceptance binary.

#include <cmath>

#include "lm3d/raster.hpp"

namespace lm3d::testing {

inline double moller_trumbore(const Eigen::Vector3d& dir, const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                              const Eigen::Vector3d& c) {
  const Eigen::Vector3d e1 = b - a;
  const Eigen::Vector3d e2 = c - a;
  const Eigen::Vector3d p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return -1;
  const double inv = 1.0 / det;
  const Eigen::Vector3d s = -a;
  const double u = s.dot(p) * inv;
  if (u < 0 || u > 1) return -1;
  const Eigen::Vector3d q = s.cross(e1);
  const double v = dir.dot(q) * inv;
  if (v < 0 || u + v > 1) return -1;
  return e2.dot(q) * inv;
}

// Ray from the camera center to the point: occluded if any triangle is hit
// more than eps (in z) in front of it.
inline bool raycast_visible(const geometry::Points3& cam, const geometry::Triangles& tris, const Eigen::Vector3d& p,
                            const Eigen::Vector3d& n) {
  if (n.dot(p) >= 0) return false;
  for (Eigen::Index f = 0; f < tris.rows(); ++f) {
    const double t = moller_trumbore(p, cam.row(tris(f, 0)).transpose(), cam.row(tris(f, 1)).transpose(),
                                     cam.row(tris(f, 2)).transpose());
    if (t > 0 && t * p.z() < p.z() - raster::kVisibilityEpsilonMm) return false;
  }
  return true;
}

}  // namespace lm3d::testing
