#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lm3d/geometry.hpp"
#include "lm3d/image.hpp"
#include "lm3d/mesh.hpp"
#include "lm3d/raster.hpp"
#include "lm3d/util.hpp"

namespace lm3d::synthgen {

using geometry::Points2;
using geometry::Points3;

enum class Background { flat, gradient, noise };
enum class Layout { dense, sparse51 };

std::string to_string(Background b);
std::string to_string(Layout l);
Layout layout_from_string(const std::string& name);

struct GenSpec {
  std::uint64_t seed = 0;
  int n_samples = 2000;
  int image_size = 96;
  int supersample = 2;
  int mesh_resolution = 64;
  int n_identity_basis = 8;
  int n_expression_basis = 6;
  double deformation_amplitude = 6.0;  // mm, per basis weight bound
  double yaw_deg = 45;                 // ranges are symmetric, +-
  double pitch_deg = 20;
  double roll_deg = 15;
  Eigen::Vector3d translation_range{25, 25, 0};  // +- mm around (0, 0, depth)
  double depth_min = 500;
  double depth_max = 700;
  double focal_min = 45;
  double focal_max = 75;
  double placement_scale_min = 0.4;  // face extent as a fraction of the frame
  double placement_scale_max = 0.9;
  double placement_rotation_deg = 20;
  double placement_translation = 0.25;  // fraction of the frame half-width
  double detector_jitter = 0.05;        // simulated detector box noise (fraction of box size)
  Background background = Background::gradient;
  Eigen::Vector2d annotation_uv_offset{0, 0};
  int dataset_id = 0;
  Layout layout = Layout::dense;
  int n_sequences = 0;
  int sequence_length = 24;

  /// Throws ConfigInvalid on empty or inverted ranges.
  void validate() const;
};

json to_json(const GenSpec& spec);
GenSpec gen_spec_from_json(const json& j);

/// Canonical head: partial ellipsoid (100 x 130 x 110 mm semi-axes) facing
/// -z, with a nose ridge, eye sockets, brow and lip relief. u runs along the
/// azimuth (0.5 is frontal, the edges reach +-170 degrees), v along the polar
/// angle from the crown (8..172 degrees). Vertex UVs are snapped onto
/// position-map texels.
geometry::CanonicalMesh make_canonical_mesh(int resolution,
                                            int map_resolution = geometry::kDefaultPositionMapResolution);

/// Analytic surface point of the canonical head at uv.
Eigen::Vector3d canonical_surface(double u, double v);

/// Smooth per-vertex displacement fields along the canonical normals:
/// n_identity global sinusoids followed by n_expression localized ones.
std::vector<Points3> deformation_basis(const geometry::CanonicalMesh& mesh, int n_identity,
                                       int n_expression);

/// Procedural albedo: skin, eyes, brows, lips.
raster::TextureMap make_albedo(int resolution = 256);

/// Query UVs of a named layout (dense: 20 x 20 grid; sparse51: 68-point
/// convention without the jawline).
Points2 layout_uv(Layout layout);

/// Outer eye-corner analogues, used for inter-ocular normalization.
inline constexpr std::array<double, 2> kLeftEyeOuterUv{0.35, 0.42};
inline constexpr std::array<double, 2> kRightEyeOuterUv{0.65, 0.42};
/// Indices of the outer eye corners inside the sparse51 layout.
inline constexpr int kSparseLeftEyeOuter = 19;
inline constexpr int kSparseRightEyeOuter = 28;

/// Everything shared by all samples of a shard.
struct FaceModel {
  geometry::CanonicalMesh mesh;
  std::vector<Points3> basis;
  raster::TextureMap albedo;
  Points2 layout;
  std::shared_ptr<const geometry::UvLocator> locator;
};

FaceModel make_face_model(const GenSpec& spec);

struct FaceInstance {
  Points3 vertices;
  geometry::PoseCamera pose;
  std::vector<double> weights;
};

/// Canonical vertices plus the weighted basis.
Points3 deform(const FaceModel& model, const std::vector<double>& weights);

/// Draws shape weights and a pose. Redraws shapes that fold triangles over;
/// throws RejectionExceeded after 100 consecutive failures.
FaceInstance sample_face(std::mt19937_64& rng, const GenSpec& spec, const FaceModel& model);

struct Sample {
  Image image;
  Points2 landmarks;  // full-frame normalized
  Points2 query_uv;   // nominal layout uv (annotation offset not included)
  int dataset_id = 0;
  geometry::PoseCamera gt_pose;
  geometry::Affine2D placement;  // sensor -> frame
  std::vector<double> shape_weights;
  std::vector<bool> visibility;
  std::array<double, 4> face_box{};  // x0, y0, x1, y1 in normalized frame coords
  double interocular = 0;            // normalized frame units
  int sequence_id = -1;
  int frame_index = -1;
};

/// Surface points (object frame) of an instance at the given uvs, shifted
/// by the annotation offset. Uses the mesh chart, so it matches the render.
Points3 surface_points(const FaceModel& model, const Points3& vertices, const Points2& uv,
                       const Eigen::Vector2d& offset);

/// Full-frame landmarks of an instance seen through a placement.
Points2 project_landmarks(const FaceModel& model, const Points3& vertices,
                          const geometry::PoseCamera& pose, const geometry::Affine2D& placement,
                          const Points2& uv, const Eigen::Vector2d& offset);

/// Renders one sample with a random placement and background.
Sample generate_sample(std::mt19937_64& rng, const GenSpec& spec, const FaceModel& model);

/// Renders a given face/pose/placement. Used by generate_sample and sequences.
Sample render_sample(std::mt19937_64& rng, const GenSpec& spec, const FaceModel& model,
                     const FaceInstance& face, const geometry::Affine2D& placement);

/// Placement that maps the face's projected extent to `extent` of the frame,
/// rotated by `angle` and centered at (tx, ty).
geometry::Affine2D make_placement(const Points3& camera_vertices, double focal, double extent,
                                  double angle, double tx, double ty);

/// Writes images/<idx>.png, index.jsonl and spec.json under out_dir.
/// Sample i uses child_rng(seed, i); sequence s uses child_rng(seed, 1 << 32 | s).
void generate_dataset(const GenSpec& spec, const std::filesystem::path& out_dir);

json sample_to_json(const Sample& sample, const std::string& image_path);

// --- loading ------------------------------------------------------------------

struct ShardRecord {
  std::string image_path;
  Points2 landmarks;
  Points2 query_uv;
  int dataset_id = 0;
  int sequence_id = -1;
  int frame_index = -1;
  std::vector<bool> visibility;
  std::array<double, 4> face_box{};
  double interocular = 0;
  geometry::PoseCamera gt_pose;
  geometry::Affine2D placement;
  std::vector<double> shape_weights;
};

struct Shard {
  std::filesystem::path dir;
  GenSpec spec;
  std::vector<ShardRecord> records;
  std::string index_sha1;
};

/// Reads spec.json and index.jsonl; images are loaded on demand. Throws
/// ShardNotFound.
Shard load_shard(const std::filesystem::path& dir);

ShardRecord record_from_json(const json& j);

}  // namespace lm3d::synthgen
