#include "lm3d/raster.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>

#include "lm3d/error.hpp"

namespace lm3d::raster {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct ScreenVertex {
  double x = 0;
  double y = 0;
  double z = 0;
  bool valid = false;
};

ScreenVertex to_screen(const Eigen::Vector3d& cam, double focal, const geometry::Affine2D& screen,
                       int height, int width) {
  ScreenVertex s;
  s.z = cam.z();
  if (!(cam.z() > geometry::kNearPlaneMm)) return s;
  const double k = focal / geometry::kSensorHalfWidthMm;
  const Eigen::Vector2d frame = screen.apply(Eigen::Vector2d(k * cam.x() / cam.z(), k * cam.y() / cam.z()));
  s.x = to_pixel(frame.x(), width);
  s.y = to_pixel(frame.y(), height);
  s.valid = true;
  return s;
}

// Samples the z-buffer around a continuous pixel position: the farthest of
// the (up to four) surrounding pixel centers, so that a point lying on the
// surface is not occluded by its own slope between samples.
double sample_depth(const RenderOutput& render, double px, double py) {
  const int x0 = static_cast<int>(std::floor(px));
  const int y0 = static_cast<int>(std::floor(py));
  double depth = -kInf;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int x = std::clamp(x0 + dx, 0, render.width() - 1);
      const int y = std::clamp(y0 + dy, 0, render.height() - 1);
      depth = std::max(depth, render.depth_at(y, x));
    }
  }
  return depth;
}

bool is_visible(const RenderOutput& render, const Eigen::Vector3d& point,
                const Eigen::Vector3d& normal) {
  if (!(point.z() > geometry::kNearPlaneMm)) return false;
  if (!(normal.dot(point.normalized()) < 0.0)) return false;
  const Eigen::Vector2d px = render_pixel(render, point);
  if (px.x() < -0.5 || px.y() < -0.5 || px.x() > render.width() - 0.5 ||
      px.y() > render.height() - 0.5) {
    return false;
  }
  return point.z() <= sample_depth(render, px.x(), px.y()) + kVisibilityEpsilonMm;
}

// Bilinear lookup restricted to pixels whose depth belongs to the same
// surface, so silhouettes and occluders do not bleed into the texel.
Eigen::Vector3f sample_surface_color(const Image& image, const RenderOutput& render,
                                     const Eigen::Vector2d& px, double z) {
  constexpr double kSameSurfaceMm = 4 * kVisibilityEpsilonMm;
  const int x0 = static_cast<int>(std::floor(px.x()));
  const int y0 = static_cast<int>(std::floor(px.y()));
  const double fx = px.x() - x0;
  const double fy = px.y() - y0;
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double total = 0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int xi = std::clamp(x0 + dx, 0, render.width() - 1);
      const int yi = std::clamp(y0 + dy, 0, render.height() - 1);
      if (!(std::abs(render.depth_at(yi, xi) - z) <= kSameSurfaceMm)) continue;
      const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) + 1e-9;
      for (int c = 0; c < 3; ++c) acc[c] += w * image.at(yi, xi, c);
      total += w;
    }
  }
  if (total == 0) return image.sample(px.x(), px.y());
  return (acc / total).cast<float>();
}

}  // namespace

std::size_t TextureMap::covered() const {
  return static_cast<std::size_t>(std::count_if(weight.begin(), weight.end(), [](float w) { return w > 0; }));
}

Eigen::Vector3f TextureMap::sample(double u, double v) const {
  const double x = std::clamp(u * width() - 0.5, 0.0, width() - 1.0);
  const double y = std::clamp(v * height() - 0.5, 0.0, height() - 1.0);
  return texels.sample(x, y);
}

std::size_t RenderOutput::covered_pixels() const {
  return static_cast<std::size_t>(std::count_if(triangle_id.begin(), triangle_id.end(), [](int t) { return t >= 0; }));
}

RenderOutput rasterize(const Eigen::Ref<const Points3>& vertices, const Triangles& triangles,
                       const Points2& uv, const geometry::PoseCamera& pose, int height, int width,
                       const RenderOptions& options) {
  if (options.albedo && uv.rows() != vertices.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "textured render needs one uv per vertex");
  }
  const Points3 cam = pose.to_camera(vertices);
  const double focal = pose.effective_focal();
  std::vector<ScreenVertex> sv(static_cast<std::size_t>(cam.rows()));
  for (Eigen::Index i = 0; i < cam.rows(); ++i) {
    sv[static_cast<std::size_t>(i)] = to_screen(cam.row(i).transpose(), focal, options.screen, height, width);
  }

  RenderOutput out;
  out.image = Image(height, width, 3);
  out.depth.assign(static_cast<std::size_t>(height) * width, kInf);
  out.triangle_id.assign(static_cast<std::size_t>(height) * width, -1);
  out.screen = options.screen;
  out.focal_mm = focal;
  std::vector<Eigen::Vector3d> bary(static_cast<std::size_t>(height) * width);

  for (Eigen::Index f = 0; f < triangles.rows(); ++f) {
    const ScreenVertex& a = sv[static_cast<std::size_t>(triangles(f, 0))];
    const ScreenVertex& b = sv[static_cast<std::size_t>(triangles(f, 1))];
    const ScreenVertex& c = sv[static_cast<std::size_t>(triangles(f, 2))];
    if (!a.valid || !b.valid || !c.valid) continue;
    if (options.cull_backfaces) {
      const Eigen::Vector3d p0 = cam.row(triangles(f, 0)).transpose();
      const Eigen::Vector3d n = (Eigen::Vector3d(cam.row(triangles(f, 1)).transpose()) - p0)
                                    .cross(Eigen::Vector3d(cam.row(triangles(f, 2)).transpose()) - p0);
      if (n.dot(p0) >= 0) continue;
    }
    const double area = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
    if (std::abs(area) < 1e-12) continue;
    const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x, b.x, c.x}))));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(std::max({a.x, b.x, c.x}))));
    const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y, b.y, c.y}))));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(std::max({a.y, b.y, c.y}))));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double w0 = ((b.x - x) * (c.y - y) - (c.x - x) * (b.y - y)) / area;
        const double w1 = ((c.x - x) * (a.y - y) - (a.x - x) * (c.y - y)) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double p0 = w0 / a.z;
        const double p1 = w1 / b.z;
        const double p2 = w2 / c.z;
        const double z = 1.0 / (p0 + p1 + p2);
        const std::size_t idx = static_cast<std::size_t>(y) * width + x;
        if (z < out.depth[idx]) {
          out.depth[idx] = z;
          out.triangle_id[idx] = static_cast<int>(f);
          bary[idx] = Eigen::Vector3d(p0 * z, p1 * z, p2 * z);
        }
      }
    }
  }
  if (out.covered_pixels() == 0) throw Error(ErrorCode::EmptyRender, "no triangle covers any pixel");

  const Points3 normals = options.lit ? geometry::vertex_normals(cam, triangles) : Points3();
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * width + x;
      const int f = out.triangle_id[idx];
      if (f < 0) continue;
      const Eigen::Vector3d& w = bary[idx];
      Eigen::Vector3f color = Eigen::Vector3f::Ones();
      if (options.albedo) {
        Eigen::Vector2d t = Eigen::Vector2d::Zero();
        for (int k = 0; k < 3; ++k) t += w[k] * uv.row(triangles(f, k)).transpose();
        color = options.albedo->sample(t.x(), t.y());
      }
      if (options.lit) {
        Eigen::Vector3d n = Eigen::Vector3d::Zero();
        Eigen::Vector3d p = Eigen::Vector3d::Zero();
        for (int k = 0; k < 3; ++k) {
          n += w[k] * normals.row(triangles(f, k)).transpose();
          p += w[k] * cam.row(triangles(f, k)).transpose();
        }
        const double lambert = std::max(0.0, -n.normalized().dot(p.normalized()));
        color *= options.ambient + (1.0f - options.ambient) * static_cast<float>(lambert);
      }
      for (int ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = color[ch];
    }
  }
  return out;
}

RenderOutput rasterize(const geometry::CanonicalMesh& mesh, const geometry::PoseCamera& pose,
                       int height, int width, const RenderOptions& options) {
  return rasterize(mesh.vertices, mesh.triangles, mesh.uv, pose, height, width, options);
}

Eigen::Vector2d render_pixel(const RenderOutput& render, const Eigen::Vector3d& p) {
  const double k = render.focal_mm / geometry::kSensorHalfWidthMm;
  const Eigen::Vector2d frame = render.screen.apply(Eigen::Vector2d(k * p.x() / p.z(), k * p.y() / p.z()));
  return {to_pixel(frame.x(), render.width()), to_pixel(frame.y(), render.height())};
}

std::vector<bool> estimate_visibility(const Eigen::Ref<const Points3>& points_posed,
                                      const Eigen::Ref<const Points3>& normals_posed,
                                      const RenderOutput& render, const geometry::PoseCamera&) {
  if (points_posed.rows() != normals_posed.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "points and normals differ in count");
  }
  std::vector<bool> visible(static_cast<std::size_t>(points_posed.rows()));
  for (Eigen::Index i = 0; i < points_posed.rows(); ++i) {
    visible[static_cast<std::size_t>(i)] =
        is_visible(render, points_posed.row(i).transpose(), normals_posed.row(i).transpose());
  }
  return visible;
}

TextureMap unwrap_texture(const Image& image, const Eigen::Ref<const Points3>& vertices,
                          const Triangles& triangles, const Points2& uv,
                          const geometry::PoseCamera& pose, const RenderOutput& render,
                          int texture_height, int texture_width) {
  if (image.height != render.height() || image.width != render.width()) {
    throw Error(ErrorCode::ShapeMismatch, "image and render differ in resolution");
  }
  TextureMap tex(texture_height, texture_width);
  const geometry::UvLocator locator(uv, triangles);
  const Points3 cam = pose.to_camera(vertices);
  const Points3 normals = geometry::vertex_normals(cam, triangles);
  for (int i = 0; i < texture_height; ++i) {
    for (int j = 0; j < texture_width; ++j) {
      const auto hit = locator.locate((j + 0.5) / texture_width, (i + 0.5) / texture_height);
      if (!hit) continue;
      Eigen::Vector3d p = Eigen::Vector3d::Zero();
      Eigen::Vector3d n = Eigen::Vector3d::Zero();
      for (int k = 0; k < 3; ++k) {
        p += hit->barycentric[k] * cam.row(triangles(hit->triangle, k)).transpose();
        n += hit->barycentric[k] * normals.row(triangles(hit->triangle, k)).transpose();
      }
      n.normalize();
      if (!is_visible(render, p, n)) continue;
      const Eigen::Vector2d px = render_pixel(render, p);
      const Eigen::Vector3f color = sample_surface_color(image, render, px, p.z());
      for (int c = 0; c < 3; ++c) tex.texels.at(i, j, c) = color[c];
      tex.weight[static_cast<std::size_t>(i) * texture_width + j] =
          static_cast<float>(std::max(0.0, -n.dot(p.normalized())));
    }
  }
  return tex;
}

TextureMap unwrap_texture(const Image& image, const geometry::CanonicalMesh& mesh,
                          const geometry::PoseCamera& pose, const RenderOutput& render,
                          int texture_height, int texture_width) {
  return unwrap_texture(image, mesh.vertices, mesh.triangles, mesh.uv, pose, render,
                        texture_height, texture_width);
}

TextureMap merge_textures(std::span<const TextureMap> maps) {
  if (maps.empty()) throw Error(ErrorCode::InvalidArgument, "no textures to merge");
  const int h = maps[0].height();
  const int w = maps[0].width();
  for (const auto& m : maps) {
    if (m.height() != h || m.width() != w) {
      throw Error(ErrorCode::ShapeMismatch, "texture resolutions differ");
    }
  }
  TextureMap out(h, w);
  for (std::size_t t = 0; t < out.weight.size(); ++t) {
    double total = 0;
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (const auto& m : maps) {
      const double wt = m.weight[t];
      if (wt <= 0) continue;
      total += wt;
      for (int c = 0; c < 3; ++c) acc[c] += wt * m.texels.data[3 * t + c];
    }
    out.weight[t] = static_cast<float>(total);
    if (total > 0) {
      for (int c = 0; c < 3; ++c) out.texels.data[3 * t + c] = static_cast<float>(acc[c] / total);
    }
  }
  return out;
}

void write_texture(const TextureMap& map, const std::filesystem::path& png_path,
                   const std::filesystem::path& pgm_path) {
  write_png(png_path, map.texels);
  cv::Mat weights(map.height(), map.width(), CV_8UC1);
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) {
      const float w = map.weight[static_cast<std::size_t>(i) * map.width() + j];
      weights.at<unsigned char>(i, j) =
          static_cast<unsigned char>(std::lround(std::clamp(w, 0.0f, 1.0f) * 255.0f));
    }
  }
  if (pgm_path.has_parent_path()) std::filesystem::create_directories(pgm_path.parent_path());
  if (!cv::imwrite(pgm_path.string(), weights)) {
    throw Error(ErrorCode::Io, "cannot write " + pgm_path.string());
  }
}

TextureMap read_texture(const std::filesystem::path& png_path, const std::filesystem::path& pgm_path) {
  TextureMap map;
  map.texels = read_png(png_path);
  const cv::Mat weights = cv::imread(pgm_path.string(), cv::IMREAD_GRAYSCALE);
  if (weights.empty() || weights.rows != map.height() || weights.cols != map.width()) {
    throw Error(ErrorCode::ImageUnreadable, "cannot read weights " + pgm_path.string());
  }
  map.weight.resize(static_cast<std::size_t>(map.height()) * map.width());
  for (int i = 0; i < map.height(); ++i) {
    for (int j = 0; j < map.width(); ++j) {
      map.weight[static_cast<std::size_t>(i) * map.width() + j] = weights.at<unsigned char>(i, j) / 255.0f;
    }
  }
  return map;
}

}  // namespace lm3d::raster
