#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lm3d/error.hpp"
#include "lm3d/model.hpp"

using namespace lm3d;
using namespace lm3d::model;
using geometry::Affine2D;
using geometry::Points2;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Image img(h, w, 3);
  for (auto& v : img.data) v = u(rng);
  return img;
}

ModelConfig small_config() {
  ModelConfig c;
  c.predictor_width = 64;
  c.mesh_resolution = 24;
  return c;
}

Points2 random_uv(int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 0.8);
  Points2 uv(k, 2);
  for (int i = 0; i < k; ++i) uv.row(i) << u(rng), u(rng);
  return uv;
}

}  // namespace

TEST_CASE("resample: identity reproduces the input exactly") {
  const Image img = random_image(20, 20, 1);
  const Image out = resample(img, Affine2D(), 20, 20);
  CHECK(out.data == img.data);
}

TEST_CASE("resample: a two-pixel translation shifts the image") {
  const Image img = random_image(32, 32, 2);
  // output at p reads the input at p + 2 pixels in x
  const Affine2D shift = Affine2D::similarity(1, 0, 2.0 * 2 / 32, 0);
  const Image out = resample(img, shift, 32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x + 2 < 32; ++x) {
      for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == doctest::Approx(img.at(y, x + 2, c)).epsilon(1e-6));
    }
    CHECK(out.at(y, 31, 0) == 0.0f);
  }
}

TEST_CASE("resample: gradient with respect to the transform matches finite differences") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> sym(-1, 1);
  const Image img = random_image(24, 24, 3);
  const Mat<double> x = image_matrix<double>(img);
  for (int trial = 0; trial < 20; ++trial) {
    const Affine2D a = geometry::make_affine(geometry::TransformKind::affine,
                                             std::vector<double>{0.7 + 0.1 * sym(rng), 0.1 * sym(rng), 0.05 * sym(rng),
                                                                 0.1 * sym(rng), 0.7 + 0.1 * sym(rng), 0.05 * sym(rng)});
    Mat<double> w = Mat<double>::NullaryExpr(12 * 12, 3, [&] { return sym(rng); });
    const auto g = resample_vjp(x, 24, 24, a.matrix(), 12, 12, w, true);
    Eigen::VectorXd an(6), nu(6);
    for (int i = 0; i < 6; ++i) {
      geometry::Matrix23 up = a.matrix();
      geometry::Matrix23 dn = a.matrix();
      up(i / 3, i % 3) += 1e-7;
      dn(i / 3, i % 3) -= 1e-7;
      nu(i) = ((resample(x, 24, 24, up, 12, 12).array() - resample(x, 24, 24, dn, 12, 12).array()) * w.array()).sum() / 2e-7;
      an(i) = g.d_matrix(i / 3, i % 3);
    }
    CHECK((an - nu).norm() / std::max(an.norm(), nu.norm()) < 1e-4);
  }
}

TEST_CASE("fresh model: identity STN, rest pose, undeformed queries, mean face") {
  const ModelConfig cfg = small_config();
  const Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 7);
  const Image img = random_image(96, 96, 9);
  const Affine2D theta = m.stn_forward(img);
  const auto& mat = theta.matrix();
  CHECK((mat - Affine2D().matrix()).norm() == 0.0);

  const auto [f, pose] = m.encode_image(resample(img, Affine2D(), cfg.crop_size, cfg.crop_size));
  CHECK(f.size() == cfg.feature_width);
  CHECK(pose.rotation().isIdentity(0));
  CHECK(pose.translation == Eigen::Vector3d(0, 0, 600));
  CHECK(pose.focal_displacement == 0.0);

  const Points2 uv = random_uv(10, 3);
  CHECK(m.deform_query(uv, 1) == uv);

  const auto out = m.forward(img, uv, 1, nullptr, Mode::eval);
  Points3 mean = geometry::sample_position_map(m.mesh(), uv);
  mean.col(2).array() += 600;
  const Points2 expected = geometry::project(mean, geometry::kFixedFocalMm);
  CHECK((out.landmarks_norm - expected).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(out.landmarks_full.allFinite());
  CHECK((out.confidence.array() > 0).all());
}

TEST_CASE("zero queries still produce a transform and a pose") {
  const ModelConfig cfg = small_config();
  const Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 1);
  const auto out = m.forward(random_image(96, 96, 2), Points2(0, 2), 0, nullptr, Mode::eval);
  CHECK(out.landmarks_full.rows() == 0);
  CHECK(out.confidence.size() == 0);
  CHECK(out.features.size() == cfg.feature_width);
  CHECK(out.gamma.translation.z() == 600.0);
}

TEST_CASE("restoration, query independence, positivity and finiteness") {
  ModelConfig cfg = small_config();
  Model<double> m(cfg, canonical_mesh(cfg.mesh_resolution), 4);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> sym(-1, 1);
  m.visit([&](const std::string&, nn::Tensor<double>& t) {
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] += 0.05 * sym(rng);
  });
  const Image img = random_image(96, 96, 6);
  const Points2 uv = random_uv(12, 7);
  const auto out = m.forward(img, uv, 0, nullptr, Mode::eval);
  CHECK(out.landmarks_full == geometry::apply_points(geometry::invert(out.theta), out.landmarks_norm));
  CHECK((out.confidence.array() > 0).all());

  // subset and permutation
  Points2 sub(3, 2);
  sub.row(0) = uv.row(5);
  sub.row(1) = uv.row(0);
  sub.row(2) = uv.row(11);
  const auto part = m.forward(img, sub, 0, nullptr, Mode::eval);
  const int idx[3] = {5, 0, 11};
  for (int i = 0; i < 3; ++i) {
    CHECK((part.landmarks_full.row(i) - out.landmarks_full.row(idx[i])).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(part.confidence(i) - out.confidence(idx[i])) < 1e-12);
  }

  // extreme inputs stay finite
  Image wild = random_image(96, 96, 10);
  for (auto& v : wild.data) v = v * 50 - 25;
  const auto w = m.forward(wild, uv, 1, nullptr, Mode::eval);
  CHECK(w.landmarks_full.allFinite());
  CHECK(w.confidence.allFinite());
  CHECK((w.confidence.array() > 0).all());
}

TEST_CASE("small uv perturbations move landmarks continuously") {
  const ModelConfig cfg = small_config();
  const Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 2);
  const Image img = random_image(96, 96, 3);
  const Points2 uv = random_uv(20, 4);
  Points2 moved = uv;
  moved.col(0).array() += 1e-3;
  const auto a = m.forward(img, uv, 0, nullptr, Mode::eval);
  const auto b = m.forward(img, moved, 0, nullptr, Mode::eval);
  const double slope = (a.landmarks_full - b.landmarks_full).rowwise().norm().maxCoeff() / 1e-3;
  CHECK(slope < 50);
}

TEST_CASE("points behind the camera: eval throws, training clamps") {
  const ModelConfig cfg = small_config();
  Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 3);
  m.visit([](const std::string& g, nn::Tensor<float>& t) {
    if (g == "gamma" && t.name == "gamma.bias") t.value(0, 8) = -10.0f;  // T_z = 600 - 1000
  });
  const Image img = random_image(96, 96, 5);
  const Points2 uv = random_uv(4, 6);
  try {
    m.forward(img, uv, 0, nullptr, Mode::eval);
    FAIL("expected BehindCamera");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BehindCamera);
  }
  const auto out = m.forward(img, uv, 0, nullptr, Mode::train);
  CHECK(out.landmarks_full.allFinite());
  CHECK((out.posed_points.col(2).array() < 0).all());
}

TEST_CASE("detector-crop models require a crop") {
  const ModelConfig cfg = variant_config("baseline_2d", small_config());
  const Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 1);
  CHECK_THROWS_AS(m.forward(random_image(96, 96, 1), random_uv(2, 1), 0, nullptr, Mode::eval), Error);
  const Affine2D crop = Affine2D::similarity(1.5, 0.1, 0.1, -0.1);
  const auto out = m.forward(random_image(96, 96, 1), random_uv(2, 1), 0, &crop, Mode::eval);
  CHECK((out.theta.matrix() - crop.matrix()).norm() == 0.0);
}

TEST_CASE("variants configure the pipeline") {
  for (const auto& name : variant_names()) {
    const ModelConfig cfg = variant_config(name, small_config());
    Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 1);
    std::set<std::string> groups;
    m.visit([&](const std::string& g, nn::Tensor<float>&) { groups.insert(g); });
    CHECK(groups.count("stn") == (cfg.normalizer != Normalizer::detector_crop));
    CHECK(groups.count("gamma") == (cfg.head == Head::landmarks_3d));
    CHECK(groups.count("deformer") == cfg.query_deformer);
  }
  CHECK_THROWS_AS(variant_config("nope"), Error);
  CHECK(to_json(model_config_from_json(to_json(small_config()))) == to_json(small_config()));
}

TEST_CASE("full-pipeline gradients match finite differences for every group") {
  const Normalizer normalizers[] = {Normalizer::stn_affine, Normalizer::stn_similarity, Normalizer::detector_crop};
  const Head heads[] = {Head::landmarks_3d, Head::direct_2d};
  std::map<std::string, double> worst;
  for (int trial = 0; trial < 30; ++trial) {
    const auto cfg = testing::tiny_config(normalizers[trial % 3], heads[(trial / 3) % 2]);
    const auto r = testing::check_pipeline_gradients(cfg, 1000 + static_cast<std::uint64_t>(trial));
    for (const auto& [g, e] : r.rel_error) worst[g] = std::max(worst[g], e);
  }
  for (const auto& [g, e] : worst) {
    INFO(g);
    CHECK(e < 1e-4);
  }
  CHECK(worst.size() == 7);
}

TEST_CASE("dense-mesh visibility of a fresh model") {
  const ModelConfig cfg = small_config();
  const Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 1);
  Points2 uv(2, 2);
  uv << 0.5, 0.57, 0.03, 0.5;  // nose tip, back of the head
  const auto vis = predict_visibility(m, random_image(96, 96, 1), uv, 0, nullptr);
  CHECK(vis[0]);
  CHECK_FALSE(vis[1]);
  const auto dense = predict_dense_mesh(m, random_image(96, 96, 1), 0, nullptr);
  CHECK(dense.posed_points.rows() == m.mesh().vertex_count());
}

TEST_CASE("checkpoint round trip and rejection") {
  const auto dir = std::filesystem::temp_directory_path() / "lm3d_ckpt_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const ModelConfig cfg = small_config();
  Model<float> m(cfg, canonical_mesh(cfg.mesh_resolution), 11);
  m.visit([](const std::string&, nn::Tensor<float>& t) { t.value.array() += 0.01f; });
  save_checkpoint(m, dir / "a.ckpt", {{"note", "x"}});
  json manifest;
  const Model<float> back = load_checkpoint(dir / "a.ckpt", &manifest);
  CHECK(manifest["extra"]["note"] == "x");
  const Image img = random_image(96, 96, 12);
  const Points2 uv = random_uv(6, 13);
  CHECK(back.forward(img, uv, 1, nullptr, Mode::eval).landmarks_full ==
        m.forward(img, uv, 1, nullptr, Mode::eval).landmarks_full);

  const auto expect_incompatible = [&](const std::filesystem::path& p) {
    try {
      load_checkpoint(p);
      FAIL("expected IncompatibleCheckpoint");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::IncompatibleCheckpoint);
    }
  };
  // arity disagreement between manifest and the model it describes
  std::filesystem::copy_file(dir / "a.ckpt", dir / "b.ckpt");
  json bad = manifest;
  bad["config"]["predictor_width"] = 32;
  write_file_atomic(dir / "b.ckpt.json", bad.dump());
  expect_incompatible(dir / "b.ckpt");

  bad = manifest;
  bad["arrays"][0]["rows"] = 999;
  write_file_atomic(dir / "b.ckpt.json", bad.dump());
  expect_incompatible(dir / "b.ckpt");

  bad = manifest;
  bad["f_fixed"] = 50.0;
  write_file_atomic(dir / "b.ckpt.json", bad.dump());
  expect_incompatible(dir / "b.ckpt");

  bad = manifest;
  bad["sha1"] = std::string(40, 'f');
  write_file_atomic(dir / "b.ckpt.json", bad.dump());
  expect_incompatible(dir / "b.ckpt");

  expect_incompatible(dir / "missing.ckpt");
  std::filesystem::remove_all(dir);
}
