#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lm3d/geometry.hpp"

namespace lm3d::geometry {

using Triangles = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline constexpr int kDefaultPositionMapResolution = 256;
inline constexpr double kMinTriangleArea = 1e-9;

/// Raster of surface positions over UV space. Texel (row i, col j) sits at
/// uv = (j / (W - 1), i / (H - 1)), so the map spans [0,1]^2 corner to corner.
class PositionMap {
 public:
  PositionMap() = default;
  PositionMap(int height, int width);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  bool empty() const noexcept { return data_.empty(); }

  Eigen::Vector3d texel(int row, int col) const {
    const double* p = &data_[3 * (static_cast<std::size_t>(row) * width_ + col)];
    return {p[0], p[1], p[2]};
  }
  void set_texel(int row, int col, const Eigen::Vector3d& v) {
    double* p = &data_[3 * (static_cast<std::size_t>(row) * width_ + col)];
    p[0] = v.x();
    p[1] = v.y();
    p[2] = v.z();
  }

  /// Bilinear lookup; uv outside [0,1]^2 is clamped and reported via `clamped`.
  Eigen::Vector3d sample(double u, double v, bool* clamped = nullptr) const;

  /// Gradient of sample(u, v) with respect to (u, v): 3x2.
  Eigen::Matrix<double, 3, 2> jacobian(double u, double v) const;

  const std::vector<double>& data() const noexcept { return data_; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// Canonical face surface: triangle mesh with a UV chart and its baked
/// position map. Vertices double as the mean shape.
struct CanonicalMesh {
  Points3 vertices;
  Triangles triangles;
  Points2 uv;
  Points3 normals;
  PositionMap position_map;

  Eigen::Index vertex_count() const { return vertices.rows(); }
  Eigen::Index triangle_count() const { return triangles.rows(); }
};

/// Validates topology (non-degenerate triangles, uv in range, injective and
/// consistently oriented chart), computes normals and bakes the position map.
CanonicalMesh build_canonical_mesh(Points3 vertices, Triangles triangles, Points2 uv,
                                   int map_resolution = kDefaultPositionMapResolution);

/// Area-weighted vertex normals, oriented by triangle winding.
Points3 vertex_normals(const Eigen::Ref<const Points3>& vertices, const Triangles& triangles);

double triangle_area(const Eigen::Vector3d& a, const Eigen::Vector3d& b, const Eigen::Vector3d& c);
double surface_area(const Eigen::Ref<const Points3>& vertices, const Triangles& triangles);

/// Location of a uv on the chart: containing triangle and barycentrics.
struct UvHit {
  int triangle = -1;
  Eigen::Vector3d barycentric = Eigen::Vector3d::Zero();
};

/// Bucketed point location over a mesh's UV chart.
class UvLocator {
 public:
  explicit UvLocator(const CanonicalMesh& mesh, int buckets = 64);
  UvLocator(const Points2& uv, const Triangles& triangles, int buckets = 64);

  std::optional<UvHit> locate(double u, double v) const;

 private:
  Points2 uv_;
  Triangles triangles_;
  int buckets_;
  std::vector<std::vector<int>> cells_;
};

struct SampleStats {
  std::size_t clamped = 0;
};

/// Bilinear position-map lookup for N uv coordinates (N x 3, mm).
Points3 sample_position_map(const CanonicalMesh& mesh, const Eigen::Ref<const Points2>& uv,
                            SampleStats* stats = nullptr);

/// Pulls a gradient on the sampled positions back onto uv. Clamped
/// coordinates receive zero gradient.
Points2 sample_position_map_vjp(const CanonicalMesh& mesh, const Eigen::Ref<const Points2>& uv,
                                const Eigen::Ref<const Points3>& d_out);

/// Interpolates arbitrary per-vertex positions at uv via the chart.
std::optional<Eigen::Vector3d> interpolate_on_chart(const UvLocator& locator,
                                                    const Triangles& triangles,
                                                    const Eigen::Ref<const Points3>& values,
                                                    double u, double v);

/// SHA-1 (git blob form) of the position map contents.
std::string position_map_checksum(const PositionMap& map);

/// Writes <path> as Wavefront OBJ plus <path>.json sidecar (uv bounds,
/// position-map size and checksum).
void write_mesh(const CanonicalMesh& mesh, const std::filesystem::path& obj_path);

/// Reads OBJ + sidecar, rebakes the position map and verifies its checksum.
CanonicalMesh read_mesh(const std::filesystem::path& obj_path);

/// Writes an OBJ with canonical topology and the given vertex positions.
void write_obj(const std::filesystem::path& path, const Eigen::Ref<const Points3>& vertices,
               const Triangles& triangles, const Points2* uv = nullptr);

}  // namespace lm3d::geometry
