#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "lm3d/error.hpp"
#include "lm3d/mesh.hpp"
#include "lm3d/synthgen.hpp"
#include "lm3d/util.hpp"

using namespace lm3d;
using namespace lm3d::geometry;

namespace {

const CanonicalMesh& head32() {
  static const CanonicalMesh mesh = synthgen::make_canonical_mesh(32);
  return mesh;
}

// Brute-force barycentric surface point: scans every triangle.
std::optional<Eigen::Vector3d> oracle_surface_point(const CanonicalMesh& m, double u, double v) {
  for (Eigen::Index f = 0; f < m.triangles.rows(); ++f) {
    const Eigen::Vector2d a = m.uv.row(m.triangles(f, 0)).transpose();
    const Eigen::Vector2d b = m.uv.row(m.triangles(f, 1)).transpose();
    const Eigen::Vector2d c = m.uv.row(m.triangles(f, 2)).transpose();
    Eigen::Matrix2d t;
    t.col(0) = b - a;
    t.col(1) = c - a;
    const Eigen::Vector2d l = t.inverse() * (Eigen::Vector2d(u, v) - a);
    const double w0 = 1 - l.x() - l.y();
    if (w0 < -1e-12 || l.x() < -1e-12 || l.y() < -1e-12) continue;
    return Eigen::Vector3d(w0 * m.vertices.row(m.triangles(f, 0)).transpose() +
                           l.x() * m.vertices.row(m.triangles(f, 1)).transpose() +
                           l.y() * m.vertices.row(m.triangles(f, 2)).transpose());
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("canonical mesh satisfies its invariants") {
  const auto& m = head32();
  CHECK(m.vertex_count() == 33 * 33);
  CHECK(m.triangle_count() == 2 * 32 * 32);
  for (Eigen::Index f = 0; f < m.triangle_count(); ++f) {
    CHECK(triangle_area(m.vertices.row(m.triangles(f, 0)).transpose(),
                        m.vertices.row(m.triangles(f, 1)).transpose(),
                        m.vertices.row(m.triangles(f, 2)).transpose()) > 1e-9);
  }
  CHECK(m.uv.minCoeff() >= 0.0);
  CHECK(m.uv.maxCoeff() <= 1.0);
  double worst = 0;
  for (Eigen::Index i = 0; i < m.vertex_count(); ++i) {
    worst = std::max(worst, (m.position_map.sample(m.uv(i, 0), m.uv(i, 1)) -
                             m.vertices.row(i).transpose()).norm());
  }
  CHECK(worst <= 1e-3);
  // normals point away from the head center
  for (Eigen::Index i = 0; i < m.vertex_count(); i += 17) {
    CHECK(m.normals.row(i).dot(m.vertices.row(i)) > 0);
  }
}

TEST_CASE("canonical mesh is deterministic") {
  const auto a = synthgen::make_canonical_mesh(32);
  CHECK(a.vertices == head32().vertices);
  CHECK(a.position_map.data() == head32().position_map.data());
}

TEST_CASE("canonical surface area matches quadrature of the analytic surface") {
  constexpr int kN = 600;
  double area = 0;
  const double h = 1.0 / kN;
  for (int i = 0; i < kN; ++i) {
    for (int j = 0; j < kN; ++j) {
      const double u = (j + 0.5) * h;
      const double v = (i + 0.5) * h;
      const Eigen::Vector3d du = (synthgen::canonical_surface(u + 1e-6, v) -
                                  synthgen::canonical_surface(u - 1e-6, v)) / 2e-6;
      const Eigen::Vector3d dv = (synthgen::canonical_surface(u, v + 1e-6) -
                                  synthgen::canonical_surface(u, v - 1e-6)) / 2e-6;
      area += du.cross(dv).norm() * h * h;
    }
  }
  const double mesh_area = surface_area(head32().vertices, head32().triangles);
  CHECK(std::abs(mesh_area - area) / area < 0.10);
}

TEST_CASE("position map bilinearity and barycentric oracle") {
  const auto& m = head32();
  const auto& pm = m.position_map;
  const double step = 1.0 / (pm.width() - 1);
  const Eigen::Vector3d mid = pm.sample(100.5 * step, 40 * step);
  CHECK((mid - 0.5 * (pm.texel(40, 100) + pm.texel(40, 101))).norm() < 1e-12);

  double spacing = 0;
  for (int i = 0; i + 1 < pm.height(); ++i) {
    for (int j = 0; j + 1 < pm.width(); ++j) {
      spacing = std::max({spacing, (pm.texel(i, j + 1) - pm.texel(i, j)).norm(),
                          (pm.texel(i + 1, j) - pm.texel(i, j)).norm()});
    }
  }
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0;
  for (int k = 0; k < 1000; ++k) {
    const double a = u(rng);
    const double b = u(rng);
    const auto oracle = oracle_surface_point(m, a, b);
    REQUIRE(oracle.has_value());
    worst = std::max(worst, (pm.sample(a, b) - *oracle).norm());
  }
  CHECK(worst < 2 * spacing);
}

TEST_CASE("sample_position_map clamps and counts out-of-range uv") {
  Points2 uv(3, 2);
  uv << 0.5, 0.5, -0.2, 0.5, 0.5, 1.3;
  SampleStats stats;
  const Points3 p = sample_position_map(head32(), uv, &stats);
  CHECK(stats.clamped == 2);
  CHECK((p.row(1).transpose() - head32().position_map.sample(0.0, 0.5)).norm() == 0.0);
  const Points2 g = sample_position_map_vjp(head32(), uv, Points3::Ones(3, 3));
  CHECK(g(1, 0) == 0.0);
  CHECK(g(2, 1) == 0.0);
}

TEST_CASE("sample_position_map gradient matches finite differences") {
  const auto& m = head32();
  const int texels = m.position_map.width() - 1;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> cell(0.0, texels - 1.0);
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  std::uniform_real_distribution<double> w(-1, 1);
  constexpr double kStep = 1e-5;
  for (int trial = 0; trial < 100; ++trial) {
    Points2 uv(4, 2);
    Points3 g(4, 3);
    for (int k = 0; k < 4; ++k) {
      // interior of a texel cell: away from the bilinear kinks
      uv(k, 0) = (std::floor(cell(rng)) + frac(rng)) / texels;
      uv(k, 1) = (std::floor(cell(rng)) + frac(rng)) / texels;
      g.row(k) << w(rng), w(rng), w(rng);
    }
    const Points2 an = sample_position_map_vjp(m, uv, g);
    Eigen::VectorXd a(8), n(8);
    for (int i = 0; i < 8; ++i) {
      Points2 up = uv;
      Points2 um = uv;
      up.data()[i] += kStep;
      um.data()[i] -= kStep;
      a(i) = an.data()[i];
      n(i) = ((sample_position_map(m, up).array() * g.array()).sum() -
              (sample_position_map(m, um).array() * g.array()).sum()) / (2 * kStep);
    }
    CHECK((a - n).norm() / std::max(a.norm(), n.norm()) < 1e-4);
  }
}

TEST_CASE("uv locator agrees with chart interpolation of vertices") {
  const auto& m = head32();
  const UvLocator locator(m);
  for (Eigen::Index i = 0; i < m.vertex_count(); i += 37) {
    const auto p = interpolate_on_chart(locator, m.triangles, m.vertices, m.uv(i, 0), m.uv(i, 1));
    REQUIRE(p.has_value());
    CHECK((*p - m.vertices.row(i).transpose()).norm() < 1e-9);
  }
  CHECK_FALSE(locator.locate(1.5, 0.5).has_value());
}

TEST_CASE("build_canonical_mesh rejects invalid charts") {
  Points3 v(4, 3);
  v << 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0;
  Points2 uv(4, 2);
  uv << 0, 0, 1, 0, 0, 1, 1, 1;
  Triangles ok(2, 3);
  ok << 0, 1, 2, 1, 3, 2;
  CHECK_NOTHROW(build_canonical_mesh(v, ok, uv, 16));

  Triangles overlap(2, 3);
  overlap << 0, 1, 2, 0, 1, 3;  // second triangle covers part of the first
  Points3 v2 = v;
  v2(3, 2) = 1.0;
  CHECK_THROWS_AS(build_canonical_mesh(v2, overlap, uv, 16), Error);

  Points3 degenerate = v;
  degenerate.row(2) = degenerate.row(0);
  CHECK_THROWS_AS(build_canonical_mesh(degenerate, ok, uv, 16), Error);

  Points2 bad_uv = uv;
  bad_uv(3, 0) = 1.5;
  CHECK_THROWS_AS(build_canonical_mesh(v, ok, bad_uv, 16), Error);
}

TEST_CASE("mesh interchange round trip verifies the position-map checksum") {
  const auto dir = std::filesystem::temp_directory_path() / "lm3d_mesh_test";
  std::filesystem::remove_all(dir);
  const auto path = dir / "head.obj";
  write_mesh(head32(), path);
  const CanonicalMesh back = read_mesh(path);
  CHECK(back.vertices == head32().vertices);
  CHECK(back.triangles == head32().triangles);
  CHECK(position_map_checksum(back.position_map) == position_map_checksum(head32().position_map));

  auto meta = read_json_file(dir / "head.obj.json");
  meta["position_map"]["sha1"] = std::string(40, '0');
  write_file_atomic(dir / "head.obj.json", meta.dump());
  CHECK_THROWS_AS(read_mesh(path), Error);
  std::filesystem::remove_all(dir);
}
