#include "lm3d/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lm3d/error.hpp"
#include "lm3d/util.hpp"

namespace lm3d::geometry {

namespace {

constexpr double kBaryTolerance = 1e-9;

double signed_uv_area(const Points2& uv, const Triangles& t, Eigen::Index f) {
  const Eigen::Vector2d a = uv.row(t(f, 0)).transpose();
  const Eigen::Vector2d b = uv.row(t(f, 1)).transpose();
  const Eigen::Vector2d c = uv.row(t(f, 2)).transpose();
  return 0.5 * ((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
}

Eigen::Vector3d barycentric_2d(const Eigen::Vector2d& p, const Eigen::Vector2d& a,
                               const Eigen::Vector2d& b, const Eigen::Vector2d& c) {
  const double det = (b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y());
  const double l1 = ((p.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (p.y() - a.y())) / det;
  const double l2 = ((b.x() - a.x()) * (p.y() - a.y()) - (p.x() - a.x()) * (b.y() - a.y())) / det;
  return {1.0 - l1 - l2, l1, l2};
}

void fill_uncovered(PositionMap& map, std::vector<char>& covered) {
  const int h = map.height();
  const int w = map.width();
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<char> next = covered;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (covered[i * w + j]) continue;
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        int n = 0;
        for (auto [di, dj] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          const int ni = i + di;
          const int nj = j + dj;
          if (ni < 0 || nj < 0 || ni >= h || nj >= w || !covered[ni * w + nj]) continue;
          acc += map.texel(ni, nj);
          ++n;
        }
        if (n > 0) {
          map.set_texel(i, j, acc / n);
          next[i * w + j] = 1;
          changed = true;
        }
      }
    }
    covered.swap(next);
  }
}

PositionMap bake_position_map(const Points3& vertices, const Triangles& triangles,
                              const Points2& uv, int resolution) {
  PositionMap map(resolution, resolution);
  std::vector<char> covered(static_cast<std::size_t>(resolution) * resolution, 0);
  std::vector<unsigned char> interior_hits(covered.size(), 0);
  const double scale = resolution - 1;
  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    const Eigen::Vector2d a = uv.row(triangles(f, 0)).transpose() * scale;
    const Eigen::Vector2d b = uv.row(triangles(f, 1)).transpose() * scale;
    const Eigen::Vector2d c = uv.row(triangles(f, 2)).transpose() * scale;
    const int j0 = std::max(0, static_cast<int>(std::floor(std::min({a.x(), b.x(), c.x()}))));
    const int j1 = std::min(resolution - 1, static_cast<int>(std::ceil(std::max({a.x(), b.x(), c.x()}))));
    const int i0 = std::max(0, static_cast<int>(std::floor(std::min({a.y(), b.y(), c.y()}))));
    const int i1 = std::min(resolution - 1, static_cast<int>(std::ceil(std::max({a.y(), b.y(), c.y()}))));
    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        const Eigen::Vector3d w = barycentric_2d(Eigen::Vector2d(j, i), a, b, c);
        if (w.minCoeff() < -kBaryTolerance) continue;
        const std::size_t idx = static_cast<std::size_t>(i) * resolution + j;
        if (w.minCoeff() > 1e-6) {
          if (++interior_hits[idx] > 1) {
            throw Error(ErrorCode::InvalidArgument, "UV chart is not injective (overlapping triangles)");
          }
        }
        if (covered[idx]) continue;
        covered[idx] = 1;
        const Eigen::Vector3d p = w[0] * vertices.row(triangles(f, 0)).transpose() +
                                  w[1] * vertices.row(triangles(f, 1)).transpose() +
                                  w[2] * vertices.row(triangles(f, 2)).transpose();
        map.set_texel(i, j, p);
      }
    }
  }
  fill_uncovered(map, covered);
  return map;
}

}  // namespace

PositionMap::PositionMap(int height, int width)
    : height_(height), width_(width),
      data_(3 * static_cast<std::size_t>(height) * width, 0.0) {}

Eigen::Vector3d PositionMap::sample(double u, double v, bool* clamped) const {
  const double cu = std::clamp(u, 0.0, 1.0);
  const double cv = std::clamp(v, 0.0, 1.0);
  if (clamped) *clamped = (cu != u) || (cv != v);
  const double x = cu * (width_ - 1);
  const double y = cv * (height_ - 1);
  const int j0 = std::min(static_cast<int>(x), width_ - 2);
  const int i0 = std::min(static_cast<int>(y), height_ - 2);
  const double fx = x - j0;
  const double fy = y - i0;
  return (1 - fy) * ((1 - fx) * texel(i0, j0) + fx * texel(i0, j0 + 1)) +
         fy * ((1 - fx) * texel(i0 + 1, j0) + fx * texel(i0 + 1, j0 + 1));
}

Eigen::Matrix<double, 3, 2> PositionMap::jacobian(double u, double v) const {
  Eigen::Matrix<double, 3, 2> jac = Eigen::Matrix<double, 3, 2>::Zero();
  const bool u_in = u >= 0.0 && u <= 1.0;
  const bool v_in = v >= 0.0 && v <= 1.0;
  const double x = std::clamp(u, 0.0, 1.0) * (width_ - 1);
  const double y = std::clamp(v, 0.0, 1.0) * (height_ - 1);
  const int j0 = std::min(static_cast<int>(x), width_ - 2);
  const int i0 = std::min(static_cast<int>(y), height_ - 2);
  const double fx = x - j0;
  const double fy = y - i0;
  if (u_in) {
    jac.col(0) = (width_ - 1) * ((1 - fy) * (texel(i0, j0 + 1) - texel(i0, j0)) +
                                 fy * (texel(i0 + 1, j0 + 1) - texel(i0 + 1, j0)));
  }
  if (v_in) {
    jac.col(1) = (height_ - 1) * ((1 - fx) * (texel(i0 + 1, j0) - texel(i0, j0)) +
                                  fx * (texel(i0 + 1, j0 + 1) - texel(i0, j0 + 1)));
  }
  return jac;
}

double triangle_area(const Eigen::Vector3d& a, const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

double surface_area(const Eigen::Ref<const Points3>& vertices, const Triangles& triangles) {
  double total = 0;
  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    total += triangle_area(vertices.row(triangles(f, 0)).transpose(),
                           vertices.row(triangles(f, 1)).transpose(),
                           vertices.row(triangles(f, 2)).transpose());
  }
  return total;
}

Points3 vertex_normals(const Eigen::Ref<const Points3>& vertices, const Triangles& triangles) {
  Points3 normals = Points3::Zero(vertices.rows(), 3);
  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    const Eigen::Vector3d a = vertices.row(triangles(f, 0)).transpose();
    const Eigen::Vector3d b = vertices.row(triangles(f, 1)).transpose();
    const Eigen::Vector3d c = vertices.row(triangles(f, 2)).transpose();
    const Eigen::Vector3d n = (b - a).cross(c - a);  // length = 2 * area
    for (int k = 0; k < 3; ++k) normals.row(triangles(f, k)) += n.transpose();
  }
  for (Eigen::Index i = 0; i < normals.rows(); ++i) {
    const double len = normals.row(i).norm();
    if (len > 0) normals.row(i) /= len;
  }
  return normals;
}

CanonicalMesh build_canonical_mesh(Points3 vertices, Triangles triangles, Points2 uv,
                                   int map_resolution) {
  if (uv.rows() != vertices.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "uv count does not match vertex count");
  }
  if (map_resolution < 2) throw Error(ErrorCode::InvalidArgument, "position map too small");
  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    for (int k = 0; k < 3; ++k) {
      if (triangles(f, k) < 0 || triangles(f, k) >= vertices.rows()) {
        throw Error(ErrorCode::InvalidArgument, "triangle index out of range");
      }
    }
    const double area = triangle_area(vertices.row(triangles(f, 0)).transpose(),
                                      vertices.row(triangles(f, 1)).transpose(),
                                      vertices.row(triangles(f, 2)).transpose());
    if (!(area > kMinTriangleArea)) {
      throw Error(ErrorCode::InvalidArgument, "degenerate triangle " + std::to_string(f));
    }
  }
  if (uv.size() > 0 && (uv.minCoeff() < 0.0 || uv.maxCoeff() > 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "uv coordinates must lie in [0,1]^2");
  }
  int orientation = 0;
  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    const double a = signed_uv_area(uv, triangles, f);
    const int s = a > 0 ? 1 : (a < 0 ? -1 : 0);
    if (s == 0) throw Error(ErrorCode::InvalidArgument, "degenerate triangle in UV chart");
    if (orientation == 0) orientation = s;
    if (s != orientation) {
      throw Error(ErrorCode::InvalidArgument, "UV chart is folded (mixed triangle orientation)");
    }
  }

  CanonicalMesh mesh;
  mesh.normals = vertex_normals(vertices, triangles);
  mesh.position_map = bake_position_map(vertices, triangles, uv, map_resolution);
  mesh.vertices = std::move(vertices);
  mesh.triangles = std::move(triangles);
  mesh.uv = std::move(uv);
  return mesh;
}

// --- uv location -------------------------------------------------------------

UvLocator::UvLocator(const CanonicalMesh& mesh, int buckets)
    : UvLocator(mesh.uv, mesh.triangles, buckets) {}

UvLocator::UvLocator(const Points2& uv, const Triangles& triangles, int buckets)
    : uv_(uv), triangles_(triangles), buckets_(buckets),
      cells_(static_cast<std::size_t>(buckets) * buckets) {
  for (Eigen::Index f = 0; f < triangles_.rows(); ++f) {
    double umin = 1, umax = 0, vmin = 1, vmax = 0;
    for (int k = 0; k < 3; ++k) {
      umin = std::min(umin, uv_(triangles_(f, k), 0));
      umax = std::max(umax, uv_(triangles_(f, k), 0));
      vmin = std::min(vmin, uv_(triangles_(f, k), 1));
      vmax = std::max(vmax, uv_(triangles_(f, k), 1));
    }
    const auto cell = [&](double t) {
      return std::clamp(static_cast<int>(std::floor(t * buckets_)), 0, buckets_ - 1);
    };
    for (int i = cell(vmin); i <= cell(vmax); ++i) {
      for (int j = cell(umin); j <= cell(umax); ++j) {
        cells_[static_cast<std::size_t>(i) * buckets_ + j].push_back(static_cast<int>(f));
      }
    }
  }
}

std::optional<UvHit> UvLocator::locate(double u, double v) const {
  if (u < 0 || u > 1 || v < 0 || v > 1) return std::nullopt;
  const int j = std::clamp(static_cast<int>(std::floor(u * buckets_)), 0, buckets_ - 1);
  const int i = std::clamp(static_cast<int>(std::floor(v * buckets_)), 0, buckets_ - 1);
  const Eigen::Vector2d p(u, v);
  for (int f : cells_[static_cast<std::size_t>(i) * buckets_ + j]) {
    const Eigen::Vector3d w = barycentric_2d(p, uv_.row(triangles_(f, 0)).transpose(),
                                             uv_.row(triangles_(f, 1)).transpose(),
                                             uv_.row(triangles_(f, 2)).transpose());
    if (w.minCoeff() >= -kBaryTolerance) return UvHit{f, w};
  }
  return std::nullopt;
}

std::optional<Eigen::Vector3d> interpolate_on_chart(const UvLocator& locator,
                                                    const Triangles& triangles,
                                                    const Eigen::Ref<const Points3>& values,
                                                    double u, double v) {
  const auto hit = locator.locate(u, v);
  if (!hit) return std::nullopt;
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  for (int k = 0; k < 3; ++k) {
    p += hit->barycentric[k] * values.row(triangles(hit->triangle, k)).transpose();
  }
  return p;
}

// --- position-map sampling ----------------------------------------------------

Points3 sample_position_map(const CanonicalMesh& mesh, const Eigen::Ref<const Points2>& uv,
                            SampleStats* stats) {
  Points3 out(uv.rows(), 3);
  for (Eigen::Index i = 0; i < uv.rows(); ++i) {
    bool clamped = false;
    out.row(i) = mesh.position_map.sample(uv(i, 0), uv(i, 1), &clamped).transpose();
    if (clamped && stats) ++stats->clamped;
  }
  return out;
}

Points2 sample_position_map_vjp(const CanonicalMesh& mesh, const Eigen::Ref<const Points2>& uv,
                                const Eigen::Ref<const Points3>& d_out) {
  Points2 d_uv(uv.rows(), 2);
  for (Eigen::Index i = 0; i < uv.rows(); ++i) {
    const auto jac = mesh.position_map.jacobian(uv(i, 0), uv(i, 1));
    d_uv.row(i) = (jac.transpose() * d_out.row(i).transpose()).transpose();
  }
  return d_uv;
}

// --- interchange -------------------------------------------------------------

std::string position_map_checksum(const PositionMap& map) {
  const auto& d = map.data();
  return git_blob_sha1(std::string_view(reinterpret_cast<const char*>(d.data()),
                                        d.size() * sizeof(double)));
}

void write_obj(const std::filesystem::path& path, const Eigen::Ref<const Points3>& vertices,
               const Triangles& triangles, const Points2* uv) {
  std::ostringstream out;
  char buf[128];
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", vertices(i, 0), vertices(i, 1),
                  vertices(i, 2));
    out << buf;
  }
  if (uv) {
    for (Eigen::Index i = 0; i < uv->rows(); ++i) {
      std::snprintf(buf, sizeof(buf), "vt %.17g %.17g\n", (*uv)(i, 0), (*uv)(i, 1));
      out << buf;
    }
  }
  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    out << 'f';
    for (int k = 0; k < 3; ++k) {
      const int idx = triangles(f, k) + 1;
      out << ' ' << idx;
      if (uv) out << '/' << idx;
    }
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

void write_mesh(const CanonicalMesh& mesh, const std::filesystem::path& obj_path) {
  write_obj(obj_path, mesh.vertices, mesh.triangles, &mesh.uv);
  json meta;
  meta["format"] = "lm3d-canonical-mesh";
  meta["version"] = 1;
  meta["vertex_count"] = mesh.vertex_count();
  meta["triangle_count"] = mesh.triangle_count();
  meta["uv_bounds"] = {mesh.uv.col(0).minCoeff(), mesh.uv.col(1).minCoeff(),
                       mesh.uv.col(0).maxCoeff(), mesh.uv.col(1).maxCoeff()};
  meta["position_map"] = {{"height", mesh.position_map.height()},
                          {"width", mesh.position_map.width()},
                          {"sha1", position_map_checksum(mesh.position_map)}};
  std::filesystem::path sidecar = obj_path;
  sidecar += ".json";
  write_file_atomic(sidecar, meta.dump(2) + "\n");
}

CanonicalMesh read_mesh(const std::filesystem::path& obj_path) {
  std::filesystem::path sidecar = obj_path;
  sidecar += ".json";
  const json meta = read_json_file(sidecar);
  std::istringstream in(read_text_file(obj_path));
  std::vector<Eigen::Vector3d> verts;
  std::vector<Eigen::Vector2d> uvs;
  std::vector<Eigen::Vector3i> faces;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Eigen::Vector3d v;
      ls >> v.x() >> v.y() >> v.z();
      verts.push_back(v);
    } else if (tag == "vt") {
      Eigen::Vector2d t;
      ls >> t.x() >> t.y();
      uvs.push_back(t);
    } else if (tag == "f") {
      Eigen::Vector3i f;
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        ls >> tok;
        f[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      faces.push_back(f);
    }
  }
  if (uvs.size() != verts.size()) {
    throw Error(ErrorCode::Io, obj_path.string() + ": expected one vt per vertex");
  }
  Points3 v(static_cast<Eigen::Index>(verts.size()), 3);
  Points2 uv(static_cast<Eigen::Index>(uvs.size()), 2);
  Triangles t(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  for (std::size_t i = 0; i < uvs.size(); ++i) uv.row(static_cast<Eigen::Index>(i)) = uvs[i].transpose();
  for (std::size_t i = 0; i < faces.size(); ++i) t.row(static_cast<Eigen::Index>(i)) = faces[i].transpose();

  const int res = meta.at("position_map").at("width").get<int>();
  CanonicalMesh mesh = build_canonical_mesh(std::move(v), std::move(t), std::move(uv), res);
  const std::string expected = meta.at("position_map").at("sha1").get<std::string>();
  if (position_map_checksum(mesh.position_map) != expected) {
    throw Error(ErrorCode::Io, obj_path.string() + ": position map checksum mismatch");
  }
  return mesh;
}

}  // namespace lm3d::geometry
