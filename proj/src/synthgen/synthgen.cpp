#include "lm3d/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "lm3d/error.hpp"

namespace lm3d::synthgen {

namespace {

constexpr double kSemiX = 100.0;
constexpr double kSemiY = 130.0;
constexpr double kSemiZ = 110.0;
// Chart angles, degrees: linear plus cubic terms, so the face keeps a dense
// near-uniform parameterization while the shell wraps almost all the way round.
constexpr double kAzimuthLinear = 120.0;
constexpr double kAzimuthCubic = 50.0;
constexpr double kPolarLinear = 65.0;
constexpr double kPolarCubic = 17.0;
constexpr int kMaxRejections = 100;

constexpr double kMaxFrameStep = 0.08;  // normalized units between frames

double deg(double d) { return d * std::numbers::pi / 180.0; }

double gauss2(double du, double dv, double su, double sv) {
  return std::exp(-0.5 * (du * du / (su * su) + dv * dv / (sv * sv)));
}

Eigen::Vector3d ellipsoid_point(double u, double v) {
  const double x = 2.0 * u - 1.0;
  const double y = 2.0 * v - 1.0;
  const double phi = deg(kAzimuthLinear * x + kAzimuthCubic * x * x * x);
  const double theta = deg(90.0 + kPolarLinear * y + kPolarCubic * y * y * y);
  return {kSemiX * std::sin(theta) * std::sin(phi), -kSemiY * std::cos(theta),
          -kSemiZ * std::sin(theta) * std::cos(phi)};
}

Eigen::Vector3d ellipsoid_normal(const Eigen::Vector3d& p) {
  return Eigen::Vector3d(p.x() / (kSemiX * kSemiX), p.y() / (kSemiY * kSemiY),
                         p.z() / (kSemiZ * kSemiZ))
      .normalized();
}

// Relief along the ellipsoid normal, mm.
double relief(double u, double v) {
  double h = 22.0 * gauss2(u - 0.5, v - 0.57, 0.028, 0.07);      // nose
  h += 5.0 * gauss2(u - 0.5, v - 0.85, 0.07, 0.04);              // chin
  h += 3.0 * gauss2(u - 0.5, v - 0.72, 0.05, 0.022);             // lips
  for (double side : {-1.0, 1.0}) {
    h -= 7.0 * gauss2(u - 0.5 - 0.1 * side, v - 0.42, 0.04, 0.03);  // eye socket
    h += 3.0 * gauss2(u - 0.5 - 0.1 * side, v - 0.355, 0.05, 0.018);  // brow ridge
    h += 4.0 * gauss2(u - 0.5 - 0.14 * side, v - 0.56, 0.04, 0.05);  // cheekbone
  }
  return h;
}

double smooth_inside(double signed_distance, double softness) {
  return std::clamp(0.5 - signed_distance / softness, 0.0, 1.0);
}

json points_to_json(const Points2& p) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i) arr.push_back({p(i, 0), p(i, 1)});
  return arr;
}

Points2 points_from_json(const json& arr) {
  Points2 p(static_cast<Eigen::Index>(arr.size()), 2);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    p(static_cast<Eigen::Index>(i), 0) = arr[i][0].get<double>();
    p(static_cast<Eigen::Index>(i), 1) = arr[i][1].get<double>();
  }
  return p;
}

json pose_to_json(const geometry::PoseCamera& pose) {
  return {{"rot6d", pose.rot6d},
          {"translation", {pose.translation.x(), pose.translation.y(), pose.translation.z()}},
          {"focal_displacement", pose.focal_displacement}};
}

geometry::PoseCamera pose_from_json(const json& j) {
  geometry::PoseCamera pose;
  pose.rot6d = j.at("rot6d").get<geometry::Rot6d>();
  const auto t = j.at("translation").get<std::array<double, 3>>();
  pose.translation = Eigen::Vector3d(t[0], t[1], t[2]);
  pose.focal_displacement = j.at("focal_displacement").get<double>();
  return pose;
}

Image make_background(std::mt19937_64& rng, Background kind, int size) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto color = [&] {
    return Eigen::Vector3f(static_cast<float>(unit(rng)), static_cast<float>(unit(rng)),
                           static_cast<float>(unit(rng)));
  };
  Image bg(size, size, 3);
  if (kind == Background::flat) {
    const Eigen::Vector3f c = color();
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int ch = 0; ch < 3; ++ch) bg.at(y, x, ch) = c[ch];
    return bg;
  }
  if (kind == Background::gradient) {
    const Eigen::Vector3f a = color();
    const Eigen::Vector3f b = color();
    const double angle = 2 * std::numbers::pi * unit(rng);
    const double cx = std::cos(angle);
    const double cy = std::sin(angle);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double t = 0.5 + 0.5 * (cx * to_normalized(x, size) + cy * to_normalized(y, size)) / std::sqrt(2.0);
        const Eigen::Vector3f c = a + static_cast<float>(t) * (b - a);
        for (int ch = 0; ch < 3; ++ch) bg.at(y, x, ch) = c[ch];
      }
    }
    return bg;
  }
  constexpr int kGrid = 6;
  Image coarse(kGrid, kGrid, 3);
  for (auto& v : coarse.data) v = static_cast<float>(unit(rng));
  std::normal_distribution<float> fine(0.0f, 0.04f);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Eigen::Vector3f c = coarse.sample((x + 0.5) * (kGrid - 1) / size, (y + 0.5) * (kGrid - 1) / size);
      for (int ch = 0; ch < 3; ++ch) bg.at(y, x, ch) = std::clamp(c[ch] + fine(rng), 0.0f, 1.0f);
    }
  }
  return bg;
}

// Any triangle whose normal turns against its canonical orientation, or
// collapses, counts as a fold.
bool has_fold(const geometry::CanonicalMesh& mesh, const Points3& vertices) {
  for (Eigen::Index f = 0; f < mesh.triangles.rows(); ++f) {
    const auto tri = mesh.triangles.row(f);
    const Eigen::Vector3d a0 = mesh.vertices.row(tri(0)).transpose();
    const Eigen::Vector3d n0 = (Eigen::Vector3d(mesh.vertices.row(tri(1)).transpose()) - a0)
                                   .cross(Eigen::Vector3d(mesh.vertices.row(tri(2)).transpose()) - a0);
    const Eigen::Vector3d a1 = vertices.row(tri(0)).transpose();
    const Eigen::Vector3d n1 = (Eigen::Vector3d(vertices.row(tri(1)).transpose()) - a1)
                                   .cross(Eigen::Vector3d(vertices.row(tri(2)).transpose()) - a1);
    if (0.5 * n1.norm() <= geometry::kMinTriangleArea || n0.dot(n1) <= 0) return true;
  }
  return false;
}

}  // namespace

std::string to_string(Background b) {
  switch (b) {
    case Background::flat: return "flat";
    case Background::gradient: return "gradient";
    case Background::noise: return "noise";
  }
  return "gradient";
}

std::string to_string(Layout l) { return l == Layout::dense ? "dense" : "sparse51"; }

Layout layout_from_string(const std::string& name) {
  if (name == "dense") return Layout::dense;
  if (name == "sparse51") return Layout::sparse51;
  throw Error(ErrorCode::ConfigInvalid, "unknown layout '" + name + "'");
}

void GenSpec::validate() const {
  const auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); };
  if (n_samples < 0) fail("n_samples must be non-negative");
  if (image_size < 16) fail("image_size must be at least 16");
  if (supersample < 1) fail("supersample must be positive");
  if (mesh_resolution < 16) fail("mesh_resolution must be at least 16");
  if (n_identity_basis < 0 || n_expression_basis < 0) fail("basis counts must be non-negative");
  if (deformation_amplitude < 0) fail("deformation_amplitude must be non-negative");
  if (yaw_deg < 0 || pitch_deg < 0 || roll_deg < 0) fail("pose ranges must be non-negative");
  if (!(depth_min > geometry::kNearPlaneMm + kSemiZ) || depth_max < depth_min) fail("bad depth range");
  if (!(focal_min > geometry::kMinFocalMm) || focal_max < focal_min) fail("bad focal range");
  if (!(placement_scale_min > 0) || placement_scale_max < placement_scale_min) fail("bad placement scale range");
  if (placement_rotation_deg < 0 || placement_translation < 0 || detector_jitter < 0) fail("bad placement noise");
  if (n_sequences < 0 || (n_sequences > 0 && sequence_length < 2)) fail("bad sequence settings");
}

json to_json(const GenSpec& s) {
  return {{"seed", s.seed},
          {"n_samples", s.n_samples},
          {"image_size", s.image_size},
          {"supersample", s.supersample},
          {"mesh_resolution", s.mesh_resolution},
          {"n_identity_basis", s.n_identity_basis},
          {"n_expression_basis", s.n_expression_basis},
          {"deformation_amplitude", s.deformation_amplitude},
          {"yaw_deg", s.yaw_deg},
          {"pitch_deg", s.pitch_deg},
          {"roll_deg", s.roll_deg},
          {"translation_range", {s.translation_range.x(), s.translation_range.y(), s.translation_range.z()}},
          {"depth_min", s.depth_min},
          {"depth_max", s.depth_max},
          {"focal_min", s.focal_min},
          {"focal_max", s.focal_max},
          {"placement_scale_min", s.placement_scale_min},
          {"placement_scale_max", s.placement_scale_max},
          {"placement_rotation_deg", s.placement_rotation_deg},
          {"placement_translation", s.placement_translation},
          {"detector_jitter", s.detector_jitter},
          {"background", to_string(s.background)},
          {"annotation_uv_offset", {s.annotation_uv_offset.x(), s.annotation_uv_offset.y()}},
          {"dataset_id", s.dataset_id},
          {"layout", to_string(s.layout)},
          {"n_sequences", s.n_sequences},
          {"sequence_length", s.sequence_length}};
}

GenSpec gen_spec_from_json(const json& j) {
  GenSpec s;
  try {
    const auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("seed", s.seed);
    get("n_samples", s.n_samples);
    get("image_size", s.image_size);
    get("supersample", s.supersample);
    get("mesh_resolution", s.mesh_resolution);
    get("n_identity_basis", s.n_identity_basis);
    get("n_expression_basis", s.n_expression_basis);
    get("deformation_amplitude", s.deformation_amplitude);
    get("yaw_deg", s.yaw_deg);
    get("pitch_deg", s.pitch_deg);
    get("roll_deg", s.roll_deg);
    get("depth_min", s.depth_min);
    get("depth_max", s.depth_max);
    get("focal_min", s.focal_min);
    get("focal_max", s.focal_max);
    get("placement_scale_min", s.placement_scale_min);
    get("placement_scale_max", s.placement_scale_max);
    get("placement_rotation_deg", s.placement_rotation_deg);
    get("placement_translation", s.placement_translation);
    get("detector_jitter", s.detector_jitter);
    get("dataset_id", s.dataset_id);
    get("n_sequences", s.n_sequences);
    get("sequence_length", s.sequence_length);
    if (j.contains("translation_range")) {
      const auto t = j.at("translation_range").get<std::array<double, 3>>();
      s.translation_range = Eigen::Vector3d(t[0], t[1], t[2]);
    }
    if (j.contains("annotation_uv_offset")) {
      const auto o = j.at("annotation_uv_offset").get<std::array<double, 2>>();
      s.annotation_uv_offset = Eigen::Vector2d(o[0], o[1]);
    }
    if (j.contains("background")) {
      const auto b = j.at("background").get<std::string>();
      if (b == "flat") s.background = Background::flat;
      else if (b == "gradient") s.background = Background::gradient;
      else if (b == "noise") s.background = Background::noise;
      else throw Error(ErrorCode::ConfigInvalid, "unknown background '" + b + "'");
    }
    if (j.contains("layout")) s.layout = layout_from_string(j.at("layout").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("generator spec: ") + e.what());
  }
  s.validate();
  return s;
}

// --- canonical head -----------------------------------------------------------

Eigen::Vector3d canonical_surface(double u, double v) {
  const Eigen::Vector3d p = ellipsoid_point(u, v);
  return p + relief(u, v) * ellipsoid_normal(p);
}

geometry::CanonicalMesh make_canonical_mesh(int resolution, int map_resolution) {
  if (resolution < 16) throw Error(ErrorCode::InvalidArgument, "mesh resolution must be >= 16");
  const int n = resolution + 1;
  const double texels = map_resolution - 1;
  Points3 vertices(n * n, 3);
  Points2 uv(n * n, 2);
  for (int i = 0; i < n; ++i) {
    const double v = std::round(i * texels / resolution) / texels;
    for (int j = 0; j < n; ++j) {
      const double u = std::round(j * texels / resolution) / texels;
      vertices.row(i * n + j) = canonical_surface(u, v).transpose();
      uv.row(i * n + j) << u, v;
    }
  }
  geometry::Triangles tris(2 * resolution * resolution, 3);
  int f = 0;
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      const int a = i * n + j;
      const int b = a + 1;
      const int c = a + n;
      const int d = c + 1;
      tris.row(f++) << a, c, b;  // outward-facing winding
      tris.row(f++) << b, c, d;
    }
  }
  return geometry::build_canonical_mesh(std::move(vertices), std::move(tris), std::move(uv), map_resolution);
}

std::vector<Points3> deformation_basis(const geometry::CanonicalMesh& mesh, int n_identity,
                                       int n_expression) {
  static constexpr std::array<std::array<int, 2>, 10> kFreq{
      {{0, 1}, {1, 0}, {1, 1}, {0, 2}, {2, 0}, {2, 1}, {1, 2}, {2, 2}, {3, 1}, {1, 3}}};
  static constexpr std::array<std::array<double, 2>, 6> kCenters{
      {{0.5, 0.72}, {0.4, 0.42}, {0.6, 0.42}, {0.4, 0.36}, {0.6, 0.36}, {0.5, 0.85}}};
  std::vector<Points3> basis;
  for (int k = 0; k < n_identity + n_expression; ++k) {
    Points3 field(mesh.vertex_count(), 3);
    for (Eigen::Index i = 0; i < mesh.vertex_count(); ++i) {
      const double u = mesh.uv(i, 0);
      const double v = mesh.uv(i, 1);
      double a;
      if (k < n_identity) {
        const auto fr = kFreq[static_cast<std::size_t>(k) % kFreq.size()];
        const double phase = (k / static_cast<int>(kFreq.size()) + k % 2) * std::numbers::pi / 2;
        a = std::cos(std::numbers::pi * fr[0] * (u - 0.5) * 2 + phase) *
            std::cos(std::numbers::pi * fr[1] * (v - 0.5) + phase);
      } else {
        const int e = k - n_identity;
        const auto c = kCenters[static_cast<std::size_t>(e) % kCenters.size()];
        a = gauss2(u - c[0], v - c[1], 0.06, 0.05) *
            std::cos(std::numbers::pi * (e / static_cast<int>(kCenters.size())) * (v - c[1]) * 10);
      }
      field.row(i) = a * ellipsoid_normal(ellipsoid_point(u, v)).transpose();
    }
    basis.push_back(std::move(field));
  }
  return basis;
}

raster::TextureMap make_albedo(int resolution) {
  raster::TextureMap tex(resolution, resolution);
  const Eigen::Vector3d skin(0.86, 0.66, 0.54);
  const Eigen::Vector3d hair(0.22, 0.15, 0.1);
  const Eigen::Vector3d sclera(0.95, 0.95, 0.93);
  const Eigen::Vector3d iris(0.18, 0.12, 0.08);
  const Eigen::Vector3d brow(0.25, 0.17, 0.12);
  const Eigen::Vector3d lips(0.72, 0.32, 0.32);
  const double soft = 1.5 / resolution;
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      const double u = (j + 0.5) / resolution;
      const double v = (i + 0.5) / resolution;
      Eigen::Vector3d c = skin;
      // hairline on the crown and temples
      const double hair_edge = 0.24 + 0.25 * std::pow(std::abs(u - 0.5) / 0.5, 2.0);
      c = c + smooth_inside(v - hair_edge, 3 * soft) * (hair - c);
      c = c + smooth_inside(std::min(u, 1 - u) - 0.1, 3 * soft) * (hair - c);
      for (double side : {-1.0, 1.0}) {
        const double eu = u - (0.5 + 0.1 * side);
        const double ev = v - 0.42;
        const double eye = std::sqrt(eu * eu / (0.05 * 0.05) + ev * ev / (0.018 * 0.018)) - 1.0;
        c = c + smooth_inside(eye * 0.018, soft) * (sclera - c);
        const double ir = std::sqrt(eu * eu + ev * ev * 4) - 0.016;
        c = c + smooth_inside(ir, soft) * smooth_inside(eye * 0.018, soft) * (iris - c);
        const double bu = u - (0.5 + 0.095 * side);
        const double bv = v - (0.352 + 2.0 * bu * bu);
        const double b = std::max(std::abs(bu) - 0.065, std::abs(bv) - 0.009);
        c = c + smooth_inside(b, soft) * (brow - c);
        const double nos = std::hypot(u - (0.5 + 0.022 * side), (v - 0.638) * 1.6) - 0.01;
        c = c + smooth_inside(nos, soft) * 0.7 * (iris - c);
      }
      const double mu = u - 0.5;
      const double mv = v - 0.72;
      const double lip = std::sqrt(mu * mu / (0.08 * 0.08) + mv * mv / (0.032 * 0.032)) - 1.0;
      c = c + smooth_inside(lip * 0.03, soft) * (lips - c);
      const double line = std::abs(mv - 30.0 * mu * mu * 0.02) - 0.004;
      c = c + smooth_inside(line, soft) * smooth_inside(std::abs(mu) - 0.075, soft) * 0.8 * (iris - c);
      for (int ch = 0; ch < 3; ++ch) tex.texels.at(i, j, ch) = static_cast<float>(c[ch]);
      tex.weight[static_cast<std::size_t>(i) * resolution + j] = 1.0f;
    }
  }
  return tex;
}

Points2 layout_uv(Layout layout) {
  if (layout == Layout::dense) {
    constexpr int kSide = 20;
    Points2 uv(kSide * kSide, 2);
    for (int i = 0; i < kSide; ++i) {
      for (int j = 0; j < kSide; ++j) {
        uv.row(i * kSide + j) << 0.25 + 0.5 * j / (kSide - 1), 0.2 + 0.65 * i / (kSide - 1);
      }
    }
    return uv;
  }
  // 68-point order with the 17 jaw points removed.
  static constexpr double kSparse[51][2] = {
      // brows, image-left then image-right, outer to outer
      {0.33, 0.36}, {0.36, 0.345}, {0.395, 0.338}, {0.43, 0.34}, {0.46, 0.35},
      {0.54, 0.35}, {0.57, 0.34}, {0.605, 0.338}, {0.64, 0.345}, {0.67, 0.36},
      // nose bridge, top to tip
      {0.5, 0.44}, {0.5, 0.49}, {0.5, 0.54}, {0.5, 0.59},
      // nose base
      {0.46, 0.635}, {0.48, 0.645}, {0.5, 0.65}, {0.52, 0.645}, {0.54, 0.635},
      // image-left eye: outer, upper outer, upper inner, inner, lower inner, lower outer
      {0.35, 0.42}, {0.38, 0.405}, {0.42, 0.405}, {0.45, 0.42}, {0.42, 0.435}, {0.38, 0.435},
      // image-right eye: inner, upper inner, upper outer, outer, lower outer, lower inner
      {0.55, 0.42}, {0.58, 0.405}, {0.62, 0.405}, {0.65, 0.42}, {0.62, 0.435}, {0.58, 0.435},
      // outer lips, clockwise from the image-left corner
      {0.42, 0.72}, {0.445, 0.7}, {0.475, 0.69}, {0.5, 0.695}, {0.525, 0.69}, {0.555, 0.7},
      {0.58, 0.72}, {0.555, 0.745}, {0.525, 0.755}, {0.5, 0.757}, {0.475, 0.755}, {0.445, 0.745},
      // inner lips
      {0.44, 0.72}, {0.475, 0.712}, {0.5, 0.713}, {0.525, 0.712}, {0.56, 0.72},
      {0.525, 0.728}, {0.5, 0.73}, {0.475, 0.728}};
  Points2 uv(51, 2);
  for (int k = 0; k < 51; ++k) uv.row(k) << kSparse[k][0], kSparse[k][1];
  return uv;
}

FaceModel make_face_model(const GenSpec& spec) {
  FaceModel model;
  model.mesh = make_canonical_mesh(spec.mesh_resolution);
  model.basis = deformation_basis(model.mesh, spec.n_identity_basis, spec.n_expression_basis);
  model.albedo = make_albedo();
  model.layout = layout_uv(spec.layout);
  model.locator = std::make_shared<geometry::UvLocator>(model.mesh);
  return model;
}

// --- sampling -----------------------------------------------------------------

Points3 deform(const FaceModel& model, const std::vector<double>& weights) {
  Points3 v = model.mesh.vertices;
  for (std::size_t k = 0; k < weights.size() && k < model.basis.size(); ++k) {
    if (weights[k] != 0.0) v += weights[k] * model.basis[k];
  }
  return v;
}

FaceInstance sample_face(std::mt19937_64& rng, const GenSpec& spec, const FaceModel& model) {
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  FaceInstance face;
  int rejected = 0;
  for (;;) {
    face.weights.assign(model.basis.size(), 0.0);
    for (auto& w : face.weights) w = spec.deformation_amplitude * sym(rng);
    face.vertices = deform(model, face.weights);
    if (spec.deformation_amplitude == 0.0 || !has_fold(model.mesh, face.vertices)) break;
    if (++rejected >= kMaxRejections) {
      throw Error(ErrorCode::RejectionExceeded, "100 consecutive shape draws folded the mesh");
    }
  }
  const double yaw = deg(spec.yaw_deg) * sym(rng);
  const double pitch = deg(spec.pitch_deg) * sym(rng);
  const double roll = deg(spec.roll_deg) * sym(rng);
  face.pose.rot6d = geometry::matrix_to_rot6d(geometry::euler_yxz_to_matrix(yaw, pitch, roll));
  std::uniform_real_distribution<double> depth(spec.depth_min, spec.depth_max);
  face.pose.translation = Eigen::Vector3d(spec.translation_range.x() * sym(rng),
                                          spec.translation_range.y() * sym(rng),
                                          depth(rng) + spec.translation_range.z() * sym(rng));
  std::uniform_real_distribution<double> focal(spec.focal_min, spec.focal_max);
  face.pose.focal_displacement = focal(rng) - geometry::kFixedFocalMm;
  return face;
}

Points3 surface_points(const FaceModel& model, const Points3& vertices, const Points2& uv,
                       const Eigen::Vector2d& offset) {
  Points3 out(uv.rows(), 3);
  for (Eigen::Index k = 0; k < uv.rows(); ++k) {
    const double u = std::clamp(uv(k, 0) + offset.x(), 0.0, 1.0);
    const double v = std::clamp(uv(k, 1) + offset.y(), 0.0, 1.0);
    const auto p = geometry::interpolate_on_chart(*model.locator, model.mesh.triangles, vertices, u, v);
    if (!p) throw Error(ErrorCode::InvalidArgument, "query uv is off the chart");
    out.row(k) = p->transpose();
  }
  return out;
}

Points2 project_landmarks(const FaceModel& model, const Points3& vertices,
                          const geometry::PoseCamera& pose, const geometry::Affine2D& placement,
                          const Points2& uv, const Eigen::Vector2d& offset) {
  const Points3 cam = pose.to_camera(surface_points(model, vertices, uv, offset));
  return geometry::apply_points(placement, geometry::project(cam, pose.effective_focal()));
}

geometry::Affine2D make_placement(const Points3& camera_vertices, double focal, double extent,
                                  double angle, double tx, double ty) {
  Eigen::Vector2d lo = Eigen::Vector2d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector2d hi = -lo;
  for (Eigen::Index i = 0; i < camera_vertices.rows(); ++i) {
    if (camera_vertices(i, 2) <= geometry::kNearPlaneMm) continue;
    const Eigen::Vector2d q = geometry::project_point(camera_vertices.row(i).transpose(), focal);
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
  const double size = (hi - lo).maxCoeff();
  if (!(size > 0)) throw Error(ErrorCode::EmptyRender, "face projects to nothing");
  const double s = 2.0 * extent / size;
  const Eigen::Vector2d center = 0.5 * (lo + hi);
  const Eigen::Vector2d t = Eigen::Vector2d(tx, ty) - s * (Eigen::Rotation2Dd(angle) * center);
  return geometry::Affine2D::similarity(s, angle, t.x(), t.y());
}

Sample render_sample(std::mt19937_64& rng, const GenSpec& spec, const FaceModel& model,
                     const FaceInstance& face, const geometry::Affine2D& placement) {
  const int size = spec.image_size;
  const int big = size * spec.supersample;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  raster::RenderOptions options;
  options.screen = placement;
  options.albedo = &model.albedo;
  options.ambient = static_cast<float>(0.25 + 0.2 * unit(rng));
  const raster::RenderOutput render =
      raster::rasterize(face.vertices, model.mesh.triangles, model.mesh.uv, face.pose, big, big, options);

  const Eigen::Vector3f tint(static_cast<float>(0.75 + 0.3 * unit(rng)),
                             static_cast<float>(0.75 + 0.3 * unit(rng)),
                             static_cast<float>(0.75 + 0.3 * unit(rng)));
  Image frame = make_background(rng, spec.background, big);
  int x0 = big, y0 = big, x1 = -1, y1 = -1;
  for (int y = 0; y < big; ++y) {
    for (int x = 0; x < big; ++x) {
      if (render.triangle_at(y, x) < 0) continue;
      for (int c = 0; c < 3; ++c) frame.at(y, x, c) = std::min(1.0f, render.image.at(y, x, c) * tint[c]);
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }

  Sample s;
  s.image = downsample(frame, spec.supersample);
  s.query_uv = model.layout;
  s.dataset_id = spec.dataset_id;
  s.gt_pose = face.pose;
  s.placement = placement;
  s.shape_weights = face.weights;
  s.face_box = {2.0 * x0 / big - 1.0, 2.0 * y0 / big - 1.0, 2.0 * (x1 + 1) / big - 1.0,
                2.0 * (y1 + 1) / big - 1.0};
  s.landmarks = project_landmarks(model, face.vertices, face.pose, placement, model.layout,
                                  spec.annotation_uv_offset);

  const Points3 normals = geometry::vertex_normals(face.vertices, model.mesh.triangles);
  const Points3 pts = surface_points(model, face.vertices, model.layout, spec.annotation_uv_offset);
  const Points3 nrm = surface_points(model, normals, model.layout, spec.annotation_uv_offset);
  const Eigen::Matrix3d r = face.pose.rotation();
  const Points3 cam = face.pose.to_camera(pts);
  const Points3 cam_n = nrm * r.transpose();
  s.visibility = raster::estimate_visibility(cam, cam_n, render, face.pose);

  Points2 eyes(2, 2);
  eyes << kLeftEyeOuterUv[0], kLeftEyeOuterUv[1], kRightEyeOuterUv[0], kRightEyeOuterUv[1];
  const Points2 eye2d = project_landmarks(model, face.vertices, face.pose, placement, eyes, Eigen::Vector2d::Zero());
  s.interocular = (eye2d.row(0) - eye2d.row(1)).norm();
  return s;
}

Sample generate_sample(std::mt19937_64& rng, const GenSpec& spec, const FaceModel& model) {
  const FaceInstance face = sample_face(rng, spec, model);
  const Points3 cam = face.pose.to_camera(face.vertices);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  geometry::Affine2D placement;
  for (int attempt = 0;; ++attempt) {
    const double extent = spec.placement_scale_min + (spec.placement_scale_max - spec.placement_scale_min) * unit(rng);
    const double angle = deg(spec.placement_rotation_deg) * sym(rng);
    const double tx = spec.placement_translation * sym(rng);
    const double ty = spec.placement_translation * sym(rng);
    placement = make_placement(cam, face.pose.effective_focal(), extent, angle, tx, ty);
    const Points2 lm = project_landmarks(model, face.vertices, face.pose, placement, model.layout,
                                         spec.annotation_uv_offset);
    if (lm.cwiseAbs().maxCoeff() <= 1.2 || attempt >= kMaxRejections) break;
  }
  return render_sample(rng, spec, model, face, placement);
}

json sample_to_json(const Sample& s, const std::string& image_path) {
  json vis = json::array();
  for (bool b : s.visibility) vis.push_back(b ? 1 : 0);
  const auto p = s.placement.params();
  return {{"image", image_path},
          {"landmarks", points_to_json(s.landmarks)},
          {"uv", points_to_json(s.query_uv)},
          {"dataset_id", s.dataset_id},
          {"sequence_id", s.sequence_id},
          {"frame_index", s.frame_index},
          {"visibility", vis},
          {"face_box", s.face_box},
          {"interocular", s.interocular},
          {"gt_pose", pose_to_json(s.gt_pose)},
          {"placement", std::vector<double>(p.begin(), p.end())},
          {"shape", s.shape_weights}};
}

void generate_dataset(const GenSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "images");
  const FaceModel model = make_face_model(spec);
  std::ostringstream index;
  const auto emit = [&](const Sample& s, int idx) {
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << idx << ".png";
    write_png(out_dir / name.str(), s.image);
    index << sample_to_json(s, name.str()).dump() << '\n';
  };
  for (int i = 0; i < spec.n_samples; ++i) {
    auto rng = child_rng(spec.seed, static_cast<std::uint64_t>(i));
    emit(generate_sample(rng, spec, model), i);
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  for (int q = 0; q < spec.n_sequences; ++q) {
    auto rng = child_rng(spec.seed, (std::uint64_t{1} << 32) | static_cast<std::uint64_t>(q));
    FaceInstance face = sample_face(rng, spec, model);
    // Smooth head motion: start and end angles within the pose ranges, then
    // interpolated with an ease-in/out profile.
    const Eigen::Vector3d a0(deg(spec.yaw_deg) * sym(rng), deg(spec.pitch_deg) * sym(rng), deg(spec.roll_deg) * sym(rng));
    const Eigen::Vector3d a1(deg(spec.yaw_deg) * sym(rng), deg(spec.pitch_deg) * sym(rng), deg(spec.roll_deg) * sym(rng));
    const Eigen::Vector3d t0 = face.pose.translation;
    const Eigen::Vector3d t1 = t0 + Eigen::Vector3d(20 * sym(rng), 20 * sym(rng), 40 * sym(rng));
    const double mid_extent = 0.5 * (spec.placement_scale_min + spec.placement_scale_max);
    const double e0 = mid_extent + 0.1 * sym(rng);
    const double e1 = mid_extent + 0.1 * sym(rng);
    const double r0 = deg(spec.placement_rotation_deg) * 0.5 * sym(rng);
    const double r1 = deg(spec.placement_rotation_deg) * 0.5 * sym(rng);
    const Eigen::Vector2d p0(0.5 * spec.placement_translation * sym(rng), 0.5 * spec.placement_translation * sym(rng));
    const Eigen::Vector2d p1(0.5 * spec.placement_translation * sym(rng), 0.5 * spec.placement_translation * sym(rng));
    const auto look = child_rng(spec.seed, (std::uint64_t{1} << 32) | static_cast<std::uint64_t>(q), 1);
    // Frame f at motion scale lambda; lambda shrinks the excursion from the
    // start state until consecutive landmarks move less than kMaxFrameStep.
    const auto frame_at = [&](int f, double lambda) {
      const double t = static_cast<double>(f) / (spec.sequence_length - 1);
      const double w = lambda * t * t * (3 - 2 * t);
      FaceInstance moved = face;
      const Eigen::Vector3d a = a0 + w * (a1 - a0);
      moved.pose.rot6d = geometry::matrix_to_rot6d(geometry::euler_yxz_to_matrix(a.x(), a.y(), a.z()));
      moved.pose.translation = t0 + w * (t1 - t0);
      // Framing follows the face, as a camera operator would.
      const Points3 cam = moved.pose.to_camera(moved.vertices);
      const Eigen::Vector2d pc = p0 + w * (p1 - p0);
      const geometry::Affine2D placement = make_placement(
          cam, moved.pose.effective_focal(), e0 + w * (e1 - e0), r0 + w * (r1 - r0), pc.x(), pc.y());
      return std::pair{moved, placement};
    };
    double lambda = 1.0;
    for (int attempt = 0; attempt < 20; ++attempt) {
      double worst = 0;
      Points2 prev;
      for (int f = 0; f < spec.sequence_length; ++f) {
        const auto [moved, placement] = frame_at(f, lambda);
        const Points2 lm = project_landmarks(model, moved.vertices, moved.pose, placement, model.layout,
                                             spec.annotation_uv_offset);
        if (f > 0) worst = std::max(worst, (lm - prev).rowwise().norm().maxCoeff());
        prev = lm;
      }
      if (worst < kMaxFrameStep) break;
      lambda *= 0.7;
    }
    for (int f = 0; f < spec.sequence_length; ++f) {
      const auto [moved, placement] = frame_at(f, lambda);
      auto frame_rng = look;
      Sample s = render_sample(frame_rng, spec, model, moved, placement);
      s.sequence_id = q;
      s.frame_index = f;
      emit(s, spec.n_samples + q * spec.sequence_length + f);
    }
  }
  write_file_atomic(out_dir / "index.jsonl", index.str());
  write_file_atomic(out_dir / "spec.json", to_json(spec).dump(2) + "\n");
}

// --- loading ------------------------------------------------------------------

ShardRecord record_from_json(const json& j) {
  ShardRecord r;
  r.image_path = j.at("image").get<std::string>();
  r.landmarks = points_from_json(j.at("landmarks"));
  r.query_uv = points_from_json(j.at("uv"));
  r.dataset_id = j.at("dataset_id").get<int>();
  r.sequence_id = j.value("sequence_id", -1);
  r.frame_index = j.value("frame_index", -1);
  for (const auto& v : j.at("visibility")) r.visibility.push_back(v.get<int>() != 0);
  r.face_box = j.at("face_box").get<std::array<double, 4>>();
  r.interocular = j.at("interocular").get<double>();
  r.gt_pose = pose_from_json(j.at("gt_pose"));
  const auto p = j.at("placement").get<std::vector<double>>();
  r.placement = geometry::make_affine(geometry::TransformKind::similarity, p);
  r.shape_weights = j.at("shape").get<std::vector<double>>();
  return r;
}

Shard load_shard(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.jsonl";
  if (!std::filesystem::exists(index_path) || !std::filesystem::exists(dir / "spec.json")) {
    throw Error(ErrorCode::ShardNotFound, "no shard at " + dir.string());
  }
  Shard shard;
  shard.dir = dir;
  shard.spec = gen_spec_from_json(read_json_file(dir / "spec.json"));
  const std::string text = read_text_file(index_path);
  shard.index_sha1 = git_blob_sha1(text);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      shard.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Io, index_path.string() + ": " + e.what());
    }
  }
  return shard;
}

}  // namespace lm3d::synthgen
