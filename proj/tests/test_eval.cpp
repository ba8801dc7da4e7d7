#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "doctest.h"
#include "lm3d/error.hpp"
#include "lm3d/eval.hpp"
#include "lm3d/synthgen.hpp"

using namespace lm3d;
using namespace lm3d::eval;
using geometry::Affine2D;
using geometry::Points2;

namespace {

namespace fs = std::filesystem;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Values on a 1/1024 grid so sums and differences are exact.
Points2 grid_points(std::mt19937_64& rng, int k) {
  std::uniform_int_distribution<int> d(-1024, 1024);
  return Points2::NullaryExpr(k, 2, [&] { return d(rng) / 1024.0; });
}

model::ModelConfig tiny_model(const std::string& variant) {
  model::ModelConfig c;
  c.stn_input = 32;
  c.crop_size = 32;
  c.stn_widths = {8, 16};
  c.stn_hidden = 16;
  c.encoder_widths = {8, 16};
  c.feature_width = 32;
  c.mlp_width = 16;
  c.query_feature_width = 16;
  c.predictor_width = 32;
  c.predictor_depth = 2;
  c.mesh_resolution = 24;
  return model::variant_config(variant, c);
}

struct Shards {
  fs::path train0, train1, test0, test1;
};

const Shards& shards() {
  static const Shards s = [] {
    const fs::path root = fs::temp_directory_path() / "lm3d_eval_shards";
    fs::remove_all(root);
    Shards out{root / "train0", root / "train1", root / "test0", root / "test1"};
    for (int d = 0; d < 2; ++d) {
      synthgen::GenSpec g;
      g.image_size = 64;
      g.mesh_resolution = 24;
      g.dataset_id = d;
      if (d == 1) {
        g.layout = synthgen::Layout::sparse51;
        g.annotation_uv_offset = {0.02, 0};
      }
      g.seed = 10 + static_cast<std::uint64_t>(d);
      g.n_samples = 8;
      synthgen::generate_dataset(g, d == 0 ? out.train0 : out.train1);
      g.seed = 20 + static_cast<std::uint64_t>(d);
      g.n_samples = 4;
      g.n_sequences = 1;
      g.sequence_length = 5;
      synthgen::generate_dataset(g, d == 0 ? out.test0 : out.test1);
    }
    return out;
  }();
  return s;
}

}  // namespace

TEST_CASE("nme: hand values, scale and similarity invariance, errors") {
  Points2 gt(2, 2);
  gt << 10, 20, 30, 40;
  CHECK(nme(gt, gt, 100) == 0.0);
  Points2 pred = gt;
  pred.rowwise() += Eigen::RowVector2d(3, 4);
  CHECK(nme(pred, gt, 100) == 5.0);
  CHECK(nme(2 * pred, 2 * gt, 200) == 5.0);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 100; ++i) {
    const Points2 a = Points2::NullaryExpr(7, 2, [&] { return u(rng); });
    const Points2 b = Points2::NullaryExpr(7, 2, [&] { return u(rng); });
    const double s = 0.5 + std::abs(u(rng));
    const Affine2D g = Affine2D::similarity(s, 3 * u(rng), u(rng), u(rng));
    CHECK(nme(geometry::apply_points(g, a), geometry::apply_points(g, b), 0.3 * s) ==
          doctest::Approx(nme(a, b, 0.3)).epsilon(1e-12));
  }
  CHECK(code_of([&] { nme(pred, gt, 0); }) == ErrorCode::ZeroNormalization);
  CHECK(code_of([&] { nme(Points2(0, 2), Points2(0, 2), 1); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("temporal error: hand values, offset invariance, static handling") {
  std::vector<Points2> gt(2, Points2::Zero(1, 2)), pred(2, Points2::Zero(1, 2));
  gt[1] << 10, 0;
  pred[1] << 0, 12;
  CHECK(temporal_error(gt, gt).value == 0.0);
  const TemporalResult r = temporal_error(pred, gt);
  CHECK(r.value == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(r.counted == 1);

  // mixed: one moving landmark (speed 4 vs 5), one static landmark
  std::vector<Points2> g2(3, Points2::Zero(2, 2)), p2(3, Points2::Zero(2, 2));
  g2[1].row(0) << 4, 0;
  g2[2].row(0) << 8, 0;
  p2[1].row(0) << 5, 0;
  p2[2].row(0) << 10, 0;
  const TemporalResult mixed = temporal_error(p2, g2);
  CHECK(mixed.counted == 2);
  CHECK(mixed.skipped == 2);
  CHECK(mixed.value == doctest::Approx(0.25).epsilon(1e-15));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Points2> g, p, shifted;
    const Points2 offset = grid_points(rng, 1).replicate(6, 1);
    for (int t = 0; t < 8; ++t) {
      g.push_back(grid_points(rng, 6));
      p.push_back(grid_points(rng, 6));
      shifted.push_back(p.back() + offset);
    }
    CHECK(temporal_error(shifted, g).value == temporal_error(p, g).value);
  }

  std::vector<Points2> still(4, Points2::Zero(3, 2));
  CHECK(code_of([&] { temporal_error(still, still); }) == ErrorCode::AllStatic);
  CHECK(code_of([&] { temporal_error({Points2::Zero(1, 2)}, {Points2::Zero(1, 2)}); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("visibility scores") {
  const std::vector<bool> gt{true, false, true, false};
  auto s = visibility_scores(gt, gt);
  CHECK(*s.precision == 1.0);
  CHECK(*s.recall == 1.0);
  s = visibility_scores({true, true, true, true}, gt);
  CHECK(*s.precision == 0.5);
  CHECK(*s.recall == 1.0);
  s = visibility_scores({false, false, false, false}, gt);
  CHECK(*s.recall == 0.0);
  CHECK_FALSE(s.precision.has_value());
  CHECK(to_json(s)["precision"] == "undefined");

  VisibilityScores sum = visibility_scores({true, false}, {true, true});
  sum += visibility_scores({true, true}, {false, true});
  CHECK(*sum.precision == doctest::Approx(2.0 / 3));
  CHECK(*sum.recall == doctest::Approx(2.0 / 3));
}

TEST_CASE("region-of-interest corners and their motion") {
  const auto c = roi_corners(Affine2D());
  CHECK(c[0] == Eigen::Vector2d(-1, -1));
  CHECK(c[2] == Eigen::Vector2d(1, 1));
  // crop of half the frame centered at (0.2, 0)
  const auto h = roi_corners(Affine2D::similarity(2, 0, -0.4, 0));
  CHECK((h[0] - Eigen::Vector2d(-0.3, -0.5)).norm() < 1e-15);
  std::vector<std::array<Eigen::Vector2d, 4>> track;
  for (int t = 0; t < 5; ++t) track.push_back(roi_corners(Affine2D::similarity(2, 0, -0.1 * t, 0)));
  CHECK(mean_corner_displacement(track) == doctest::Approx(0.05));
}

TEST_CASE("ordering verdicts") {
  EvalReport r;
  const auto add = [&](const std::string& n, double nme, double temporal) {
    VariantSummary v;
    v.name = n;
    v.nme_mean = nme;
    v.temporal_mean = temporal;
    r.variants.push_back(v);
  };
  add("baseline_2d", 5.0, 0.3);
  add("stn_sim", 5.05, 0.3);
  add("stn_affine", 4.8, 0.3);
  add("full", 4.5, 0.2);
  json v = ordering_verdicts(r);
  CHECK(v["pass"] == true);
  CHECK(v["checks"].size() == 6);  // 2 singles vs baseline, full vs 2 singles, affine vs sim, temporal
  r.variants[0].nme_mean = 4.9;   // stn_sim now exceeds baseline by more than 0.1
  CHECK(ordering_verdicts(r)["pass"] == false);
}

TEST_CASE("plots: empty report fails without files, flat focal trace, determinism") {
  const fs::path dir = fs::temp_directory_path() / "lm3d_plot_test";
  fs::remove_all(dir);
  CHECK(code_of([&] { emit_plots(EvalReport{}, dir); }) == ErrorCode::InvalidArgument);
  CHECK_FALSE(fs::exists(dir));

  EvalReport r;
  VariantSummary v;
  v.name = "full";
  RunResult run;
  run.checkpoint_sha1 = "0123456789abcdef0123456789abcdef01234567";
  ShardEval s;
  s.error_histogram.assign(61, 0.0);
  s.error_histogram[2] = 1;
  s.error_histogram[4] = 2;
  SequenceTrace seq;
  seq.sequence_id = 0;
  seq.focal.assign(10, 63.5);
  for (int t = 0; t < 10; ++t) {
    seq.roi.push_back(roi_corners(Affine2D::similarity(1.5, 0, 0.01 * t, 0)));
    seq.box_roi.push_back(roi_corners(Affine2D::similarity(1.5, 0, 0.03 * (t % 2), 0)));
  }
  s.sequences.push_back(seq);
  run.shards.push_back(s);
  run.nme = 3;
  v.runs.push_back(run);
  summarize(v);
  r.variants.push_back(v);

  const auto files = emit_plots(r, dir);
  CHECK(report_tag(r) == "0123456789ab");
  std::set<std::string> names;
  for (const auto& f : files) {
    CHECK(fs::exists(f));
    CHECK(f.filename().string().find("0123456789ab") != std::string::npos);
    names.insert(f.filename().string());
  }
  CHECK(names.count("focal_full_0123456789ab.svg") == 1);
  CHECK(names.count("nme_bars_0123456789ab.png") == 1);

  const json series = json::parse(slurp(dir / "series_0123456789ab.json"));
  bool found = false;
  for (const auto& c : series["charts"]) {
    if (c["file_stem"] != "focal_full_0123456789ab") continue;
    found = true;
    for (const auto& y : c["series"][0]["y"]) CHECK(y.get<double>() == 63.5);
  }
  CHECK(found);

  // every vertex of the focal polyline sits at the same height
  const std::string svg = slurp(dir / "focal_full_0123456789ab.svg");
  const std::smatch m = [&] {
    std::smatch out;
    std::regex_search(svg, out, std::regex("points=\"([^\"]*)\""));
    return out;
  }();
  REQUIRE(m.size() == 2);
  std::istringstream pts(m[1].str());
  std::set<std::string> ys;
  int count = 0;
  for (std::string p; pts >> p; ++count) ys.insert(p.substr(p.find(',') + 1));
  CHECK(count == 10);
  CHECK(ys.size() == 1);

  const std::string before = slurp(dir / "nme_bars_0123456789ab.png");
  emit_plots(r, dir);
  CHECK(slurp(dir / "nme_bars_0123456789ab.png") == before);
}

TEST_CASE("evaluating an initial checkpoint gives finite, large errors") {
  const fs::path dir = fs::temp_directory_path() / "lm3d_eval_init";
  fs::remove_all(dir);
  fs::create_directories(dir);
  model::ModelConfig cfg = tiny_model("full");
  model::Model<float> m(cfg, model::canonical_mesh(cfg.mesh_resolution), 1);
  model::save_checkpoint(m, dir / "init.ckpt");

  EvalOptions opt;
  opt.visibility_samples = 2;
  const RunResult r = evaluate_checkpoint(dir / "init.ckpt", {shards().test0, shards().test1}, opt);
  REQUIRE(r.shards.size() == 2);
  CHECK(std::isfinite(r.nme));
  CHECK(r.nme > 10);
  CHECK(r.shards[0].samples == 4);
  CHECK(r.shards[1].landmark_nme.size() == 51);
  REQUIRE(r.shards[0].sequences.size() == 1);
  CHECK(r.shards[0].sequences[0].focal.size() == 5);
  CHECK(r.shards[0].sequences[0].roi_displacement == 0.0);  // identity STN at init
  CHECK(r.shards[0].sequences[0].box_displacement > 0.0);
  CHECK(r.temporal_error.has_value());
  REQUIRE(r.shards[0].visibility.has_value());
  CHECK(r.shards[0].visibility->true_positive + r.shards[0].visibility->false_negative > 0);

  const RunResult again = evaluate_checkpoint(dir / "init.ckpt", {shards().test0, shards().test1}, opt);
  CHECK(again.nme == r.nme);
  CHECK(*again.temporal_error == *r.temporal_error);
}

TEST_CASE("ablation: single variant and seed is a pure function of its inputs") {
  const fs::path root = fs::temp_directory_path() / "lm3d_ablation_test";
  fs::remove_all(root);
  AblationConfig a;
  a.base.epochs = 1;
  a.base.batch_size = 4;
  a.base.lr = 1e-3;
  a.base.queries_per_sample = 8;
  a.base.validation_queries = 8;
  a.base.shards = {shards().train0, shards().train1};
  a.base.model = tiny_model("full");
  a.test_shards = {shards().test0, shards().test1};
  a.variants = {"baseline_2d"};
  a.seeds = {4};
  a.out_dir = root / "one";
  const EvalReport first = run_ablation(a);
  REQUIRE(first.variants.size() == 1);
  REQUIRE(first.variants[0].runs.size() == 1);
  CHECK(std::isfinite(first.variants[0].nme_mean));
  CHECK(fs::exists(root / "one" / "baseline_2d" / "seed_4" / "result.json"));
  CHECK(to_json(report_from_json(to_json(first))) == to_json(first));

  a.out_dir = root / "two";
  const EvalReport second = run_ablation(a);
  CHECK(second.variants[0].runs[0].checkpoint_sha1 == first.variants[0].runs[0].checkpoint_sha1);
  CHECK(second.variants[0].nme_mean == first.variants[0].nme_mean);
  CHECK(to_json(second)["variants"][0]["runs"][0]["shards"] == to_json(first)["variants"][0]["runs"][0]["shards"]);
}
