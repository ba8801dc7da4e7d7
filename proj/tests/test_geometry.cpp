#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "lm3d/error.hpp"
#include "lm3d/geometry.hpp"

using namespace lm3d;
using namespace lm3d::geometry;

namespace {

Affine2D random_affine(std::mt19937_64& rng, bool similarity) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (;;) {
    try {
      if (similarity) {
        return Affine2D::similarity(std::exp(0.7 * u(rng)), std::numbers::pi * u(rng), u(rng),
                                    u(rng));
      }
      std::array<double, 6> t{1 + 0.5 * u(rng), 0.5 * u(rng), u(rng),
                              0.5 * u(rng),     1 + 0.5 * u(rng), u(rng)};
      if (std::abs(t[0] * t[4] - t[1] * t[3]) < 0.05) continue;
      return make_affine(TransformKind::affine, t);
    } catch (const Error&) {
    }
  }
}

Eigen::Matrix3d augmented(const Matrix23& m) {
  Eigen::Matrix3d a = Eigen::Matrix3d::Identity();
  a.topRows<2>() = m;
  return a;
}

}  // namespace

TEST_CASE("make_affine decodes similarity and affine parameters") {
  const double id_sim[] = {1, 0, 0, 0};
  CHECK(make_affine(TransformKind::similarity, id_sim).matrix().isApprox(Matrix23::Identity()));

  const double rot[] = {2, std::numbers::pi / 2, 0, 0};
  Matrix23 expected;
  expected << 0, -2, 0, 2, 0, 0;
  CHECK((make_affine(TransformKind::similarity, rot).matrix() - expected).cwiseAbs().maxCoeff() <
        1e-15);

  const double id_aff[] = {1, 0, 0, 0, 1, 0};
  CHECK(make_affine(TransformKind::affine, id_aff).matrix() == Matrix23::Identity());
}

TEST_CASE("make_affine rejects bad arity and degenerate matrices") {
  const double five[] = {1, 0, 0, 0, 1};
  try {
    make_affine(TransformKind::affine, five);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ArityMismatch);
  }
  const double singular[] = {1, 2, 0, 2, 4, 0};
  try {
    make_affine(TransformKind::affine, singular);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateTransform);
  }
  const double zero_scale[] = {0, 0.3, 0, 0};
  CHECK_THROWS_AS(make_affine(TransformKind::similarity, zero_scale), Error);
}

TEST_CASE("invert examples") {
  CHECK(invert(Affine2D()).matrix().isApprox(Matrix23::Identity()));

  const auto t = Affine2D::similarity(1, 0, 0.3, -0.1);
  const auto ti = invert(t);
  CHECK(ti.matrix()(0, 2) == doctest::Approx(-0.3));
  CHECK(ti.matrix()(1, 2) == doctest::Approx(0.1));
  CHECK(ti.kind() == TransformKind::similarity);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int k = 0; k < 20; ++k) {
    const auto a = random_affine(rng, k % 2 == 0);
    const auto b = invert(a);
    CHECK((augmented(b.matrix()) * augmented(a.matrix()) - Eigen::Matrix3d::Identity())
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK((invert(b).matrix() - a.matrix()).cwiseAbs().maxCoeff() < 1e-12);
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
      const Eigen::Vector2d p(u(rng), u(rng));
      worst = std::max(worst, (b.apply(a.apply(p)) - p).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("apply_points examples") {
  Points2 p(1, 2);
  p << 0.5, -0.5;
  CHECK(apply_points(Affine2D(), p) == p);

  Points2 origin = Points2::Zero(1, 2);
  const auto shifted = apply_points(Affine2D::similarity(1, 0, 0.1, 0.2), origin);
  CHECK(shifted(0, 0) == doctest::Approx(0.1));
  CHECK(shifted(0, 1) == doctest::Approx(0.2));

  Points2 q(1, 2);
  q << 0.25, 0;
  const auto scaled = apply_points(Affine2D::similarity(2, 0, 0, 0), q);
  CHECK(scaled(0, 0) == doctest::Approx(0.5));
  CHECK(scaled(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("compose matches matrix product") {
  std::mt19937_64 rng(3);
  const auto a = random_affine(rng, true);
  const auto b = random_affine(rng, false);
  const auto c = compose(a, b);
  CHECK((augmented(c.matrix()) - augmented(a.matrix()) * augmented(b.matrix()))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
  CHECK(compose(a, random_affine(rng, true)).kind() == TransformKind::similarity);
}

TEST_CASE("rot6d_to_matrix examples") {
  const double id[] = {1, 0, 0, 0, 1, 0};
  CHECK(rot6d_to_matrix(std::span<const double, 6>(id)) == Eigen::Matrix3d::Identity());
  const double scaled[] = {2, 0, 0, 0, 3, 0};
  CHECK(rot6d_to_matrix(std::span<const double, 6>(scaled)).isApprox(Eigen::Matrix3d::Identity()));
  const double swapped[] = {0, 1, 0, 1, 0, 0};
  const auto r = rot6d_to_matrix(std::span<const double, 6>(swapped));
  Eigen::Matrix3d expected;
  expected << 0, 1, 0, 1, 0, 0, 0, 0, -1;
  CHECK((r - expected).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(r.determinant() == doctest::Approx(1.0));

  const double degenerate[] = {0, 0, 0, 0, 1, 0};
  CHECK_THROWS_AS(rot6d_to_matrix(std::span<const double, 6>(degenerate)), Error);
  const double parallel[] = {1, 0, 0, 2, 0, 0};
  try {
    rot6d_to_matrix(std::span<const double, 6>(parallel));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateRotation);
  }
}

TEST_CASE("matrix_to_rot6d round trip and geodesic angle") {
  const auto r = euler_yxz_to_matrix(0.3, -0.2, 0.1);
  const auto r6 = matrix_to_rot6d(r);
  CHECK((rot6d_to_matrix(std::span<const double, 6>(r6)) - r).cwiseAbs().maxCoeff() < 1e-14);
  const auto rz = euler_yxz_to_matrix(0, 0, 0.25);
  CHECK(rotation_angle_between(Eigen::Matrix3d::Identity(), rz) == doctest::Approx(0.25));
}

TEST_CASE("project examples") {
  CHECK(project_point(Eigen::Vector3d(0, 0, 600), 60).norm() == 0.0);
  const auto p = project_point(Eigen::Vector3d(180, 0, 600), 60);
  CHECK(std::abs(p.x() - 1.0) < 1e-12);
  CHECK(p.y() == 0.0);
  const Eigen::Vector3d q(12.5, -40, 333);
  CHECK((project_point(q, 52) - project_point(2.0 * q, 52)).cwiseAbs().maxCoeff() < 1e-15);
  try {
    project_point(Eigen::Vector3d(0, 0, 0.5), 60);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BehindCamera);
  }
  const Eigen::Vector3d back = unproject(project_point(q, 52), q.z(), 52);
  CHECK((back - q).norm() < 1e-9);
}

TEST_CASE("PoseCamera defaults and focal clamp") {
  PoseCamera pose;
  CHECK(pose.effective_focal() == 60.0);
  CHECK(pose.to_camera_point(Eigen::Vector3d(1, 2, 3)).isApprox(Eigen::Vector3d(1, 2, 603)));
  pose.focal_displacement = -100;
  CHECK(pose.effective_focal() > 1.0);
}

TEST_CASE("LandmarkSet validation") {
  LandmarkSet set;
  set.points2d = Points2::Zero(2, 2);
  set.confidences = Eigen::VectorXd::Ones(2);
  CHECK_NOTHROW(set.validate());
  set.confidences(1) = 0;
  CHECK_THROWS_AS(set.validate(), Error);
}

// --- invariants -------------------------------------------------------------

TEST_CASE("affine round trip over random transforms") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-3, 3);
  double worst = 0;
  for (int k = 0; k < 10000; ++k) {
    const auto a = random_affine(rng, k % 2 == 0);
    Points2 p(1, 2);
    p << u(rng), u(rng);
    worst = std::max(worst, (apply_points(invert(a), apply_points(a, p)) - p).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("rot6d orthonormality over random inputs") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-10, 10);
  int tested = 0;
  double worst_orth = 0;
  double worst_det = 0;
  while (tested < 10000) {
    Rot6d r6;
    for (auto& x : r6) x = u(rng);
    Eigen::Matrix3d r;
    try {
      r = rot6d_to_matrix(std::span<const double, 6>(r6));
    } catch (const Error&) {
      continue;
    }
    ++tested;
    worst_orth = std::max(worst_orth,
                          (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff());
    worst_det = std::max(worst_det, std::abs(r.determinant() - 1.0));
  }
  CHECK(worst_orth < 1e-6);
  CHECK(worst_det < 1e-6);
}

TEST_CASE("projection is invariant to positive scaling") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-200, 200);
  std::uniform_real_distribution<double> s(0.1, 10);
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Vector3d p(u(rng), u(rng), 300 + u(rng));
    const double scale = s(rng);
    CHECK((project_point(p, 60) - project_point(scale * p, 60)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

// --- finite-difference gradient checks ---------------------------------------

namespace {

constexpr double kStep = 1e-5;

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& n) {
  const double denom = std::max({a.norm(), n.norm(), 1e-12});
  return (a - n).norm() / denom;
}

}  // namespace

TEST_CASE("apply_points gradient matches finite differences") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const bool sim = trial % 2 == 0;
    const auto a = random_affine(rng, sim);
    const auto kind = a.kind();
    std::vector<double> theta(a.params().begin(), a.params().end());
    Points2 pts(5, 2);
    Points2 w(5, 2);
    for (int i = 0; i < 10; ++i) {
      pts.data()[i] = u(rng);
      w.data()[i] = u(rng);
    }
    const auto loss = [&](const std::vector<double>& th, const Points2& p) {
      const Matrix23 m = decode_matrix(kind, th);
      Points2 out = (p * m.leftCols<2>().transpose()).rowwise() + m.col(2).transpose();
      return (out.array() * w.array()).sum();
    };
    const auto g = apply_points_vjp(decode_matrix(kind, theta), pts, w);
    const auto d_theta = decode_matrix_vjp(kind, theta, g.d_matrix);

    Eigen::VectorXd an(theta.size()), nu(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
      auto tp = theta;
      auto tm = theta;
      tp[i] += kStep;
      tm[i] -= kStep;
      an(static_cast<Eigen::Index>(i)) = d_theta[i];
      nu(static_cast<Eigen::Index>(i)) = (loss(tp, pts) - loss(tm, pts)) / (2 * kStep);
    }
    CHECK(rel_err(an, nu) < 1e-4);

    Eigen::VectorXd anp(10), nup(10);
    for (int i = 0; i < 10; ++i) {
      Points2 pp = pts;
      Points2 pm = pts;
      pp.data()[i] += kStep;
      pm.data()[i] -= kStep;
      anp(i) = g.d_points.data()[i];
      nup(i) = (loss(theta, pp) - loss(theta, pm)) / (2 * kStep);
    }
    CHECK(rel_err(anp, nup) < 1e-4);
  }
}

TEST_CASE("invert_matrix gradient matches finite differences") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix23 m = random_affine(rng, false).matrix();
    Matrix23 w;
    for (int i = 0; i < 6; ++i) w.data()[i] = u(rng);
    const Matrix23 an = invert_matrix_vjp(m, w);
    Eigen::VectorXd a(6), n(6);
    for (int i = 0; i < 6; ++i) {
      Matrix23 mp = m;
      Matrix23 mm = m;
      mp.data()[i] += kStep;
      mm.data()[i] -= kStep;
      a(i) = an.data()[i];
      n(i) = ((invert_matrix(mp).array() * w.array()).sum() -
              (invert_matrix(mm).array() * w.array()).sum()) /
             (2 * kStep);
    }
    CHECK(rel_err(a, n) < 1e-4);
  }
}

TEST_CASE("rot6d gradient matches finite differences") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 100; ++trial) {
    Rot6d r6;
    for (auto& x : r6) x = u(rng);
    Eigen::Matrix3d w;
    for (int i = 0; i < 9; ++i) w.data()[i] = u(rng);
    Eigen::Matrix3d r;
    try {
      r = rot6d_to_matrix(std::span<const double, 6>(r6));
    } catch (const Error&) {
      continue;
    }
    const Rot6d g = rot6d_vjp(std::span<const double, 6>(r6), w);
    Eigen::VectorXd a(6), n(6);
    for (int i = 0; i < 6; ++i) {
      Rot6d rp = r6;
      Rot6d rm = r6;
      rp[static_cast<std::size_t>(i)] += kStep;
      rm[static_cast<std::size_t>(i)] -= kStep;
      a(i) = g[static_cast<std::size_t>(i)];
      n(i) = ((rot6d_to_matrix(std::span<const double, 6>(rp)).array() * w.array()).sum() -
              (rot6d_to_matrix(std::span<const double, 6>(rm)).array() * w.array()).sum()) /
             (2 * kStep);
    }
    CHECK(rel_err(a, n) < 1e-4);
  }
}

TEST_CASE("project gradient matches finite differences") {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    Points3 pts(4, 3);
    for (int i = 0; i < 4; ++i) pts.row(i) << 150 * u(rng), 150 * u(rng), 500 + 100 * u(rng);
    Points2 w(4, 2);
    for (int i = 0; i < 8; ++i) w.data()[i] = u(rng);
    const double f = 60 + 20 * u(rng);
    const auto loss = [&](const Points3& p, double focal) {
      return (project(p, focal).array() * w.array()).sum();
    };
    const auto g = project_vjp(pts, f, w);
    Eigen::VectorXd a(13), n(13);
    for (int i = 0; i < 12; ++i) {
      Points3 pp = pts;
      Points3 pm = pts;
      pp.data()[i] += kStep;
      pm.data()[i] -= kStep;
      a(i) = g.d_points.data()[i];
      n(i) = (loss(pp, f) - loss(pm, f)) / (2 * kStep);
    }
    a(12) = g.d_focal;
    n(12) = (loss(pts, f + kStep) - loss(pts, f - kStep)) / (2 * kStep);
    CHECK(rel_err(a, n) < 1e-4);
  }
}
