#pragma once

// Small deterministic software rasterizer. Used for data generation,
// visibility and texture unwrap; nothing here is differentiated.

#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "lm3d/geometry.hpp"
#include "lm3d/image.hpp"
#include "lm3d/mesh.hpp"

namespace lm3d::raster {

using geometry::Points2;
using geometry::Points3;
using geometry::Triangles;

inline constexpr double kVisibilityEpsilonMm = 2.0;

/// RGB texels over UV plus a per-texel coverage weight. Texel (i, j) has
/// its center at uv = ((j + 0.5) / W, (i + 0.5) / H).
struct TextureMap {
  Image texels;
  std::vector<float> weight;

  TextureMap() = default;
  TextureMap(int height, int width) : texels(height, width, 3), weight(static_cast<std::size_t>(height) * width, 0.0f) {}

  int height() const noexcept { return texels.height; }
  int width() const noexcept { return texels.width; }
  std::size_t covered() const;

  /// Bilinear color lookup at uv (clamped to the edge texels).
  Eigen::Vector3f sample(double u, double v) const;
};

struct RenderOptions {
  /// Maps projected sensor coordinates into frame coordinates.
  geometry::Affine2D screen;
  /// Surface color; white when absent.
  const TextureMap* albedo = nullptr;
  bool lit = true;
  /// Skips triangles whose winding faces away from the camera.
  bool cull_backfaces = true;
  float ambient = 0.3f;
};

struct RenderOutput {
  Image image;                 // H x W x 3, zero where nothing was drawn
  std::vector<double> depth;   // camera-frame z in mm, +inf where empty
  std::vector<int> triangle_id;
  geometry::Affine2D screen;
  double focal_mm = geometry::kFixedFocalMm;

  int height() const noexcept { return image.height; }
  int width() const noexcept { return image.width; }
  double depth_at(int y, int x) const { return depth[static_cast<std::size_t>(y) * width() + x]; }
  int triangle_at(int y, int x) const { return triangle_id[static_cast<std::size_t>(y) * width() + x]; }
  std::size_t covered_pixels() const;
};

/// Z-buffered, perspective-correct rendering of a posed mesh. Vertices are
/// object-frame; pose moves them into the camera frame. Triangles touching
/// the near plane are dropped. Equal depths resolve to the lower triangle
/// index. Throws EmptyRender if nothing is drawn.
RenderOutput rasterize(const Eigen::Ref<const Points3>& vertices, const Triangles& triangles,
                       const Points2& uv, const geometry::PoseCamera& pose, int height, int width,
                       const RenderOptions& options = {});
RenderOutput rasterize(const geometry::CanonicalMesh& mesh, const geometry::PoseCamera& pose,
                       int height, int width, const RenderOptions& options = {});

/// Where a camera-frame point lands on the render, in continuous pixels.
Eigen::Vector2d render_pixel(const RenderOutput& render, const Eigen::Vector3d& camera_point);

/// Depth test against the z-buffer (within 2 mm) plus a front-facing test.
/// Points and normals are camera-frame. Off-frame points are invisible.
std::vector<bool> estimate_visibility(const Eigen::Ref<const Points3>& points_posed,
                                      const Eigen::Ref<const Points3>& normals_posed,
                                      const RenderOutput& render, const geometry::PoseCamera& pose);

/// Reprojects image colors onto the UV chart. Weighted texels are those whose
/// surface point is visible; weight is the cosine to the viewer.
TextureMap unwrap_texture(const Image& image, const Eigen::Ref<const Points3>& vertices,
                          const Triangles& triangles, const Points2& uv,
                          const geometry::PoseCamera& pose, const RenderOutput& render,
                          int texture_height, int texture_width);
TextureMap unwrap_texture(const Image& image, const geometry::CanonicalMesh& mesh,
                          const geometry::PoseCamera& pose, const RenderOutput& render,
                          int texture_height = 128, int texture_width = 128);

/// Weighted per-texel mean; throws ShapeMismatch on differing resolutions.
TextureMap merge_textures(std::span<const TextureMap> maps);

/// Texels as PNG, weights (x255, clamped) as binary PGM.
void write_texture(const TextureMap& map, const std::filesystem::path& png_path,
                   const std::filesystem::path& pgm_path);
TextureMap read_texture(const std::filesystem::path& png_path, const std::filesystem::path& pgm_path);

}  // namespace lm3d::raster
