#include "lm3d/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "lm3d/error.hpp"
#include "lm3d/image.hpp"
#include "lm3d/synthgen.hpp"
#include "plot.hpp"

namespace lm3d::eval {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kEvalCropStream = 0xE7A1;
constexpr double kHistogramMax = 30.0;  // % inter-ocular
constexpr int kHistogramBins = 60;

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json to_json(const TemporalResult& t) {
  return {{"value", t.value}, {"counted", t.counted}, {"skipped", t.skipped}};
}

json corners_json(const std::vector<std::array<Eigen::Vector2d, 4>>& corners) {
  json out = json::array();
  for (const auto& q : corners) {
    json quad = json::array();
    for (const auto& c : q) quad.push_back({c.x(), c.y()});
    out.push_back(quad);
  }
  return out;
}

std::vector<double> per_frame_displacement(const std::vector<std::array<Eigen::Vector2d, 4>>& corners) {
  std::vector<double> out;
  for (std::size_t t = 0; t + 1 < corners.size(); ++t) {
    double d = 0;
    for (int c = 0; c < 4; ++c) d += (corners[t + 1][c] - corners[t][c]).norm() / 4.0;
    out.push_back(d);
  }
  return out;
}

std::vector<double> histogram(const std::vector<double>& errors) {
  std::vector<double> counts(kHistogramBins + 1, 0.0);  // last bin: overflow
  for (double e : errors) {
    const int b = static_cast<int>(e / kHistogramMax * kHistogramBins);
    counts[static_cast<std::size_t>(std::clamp(b, 0, kHistogramBins))] += 1;
  }
  return counts;
}

geometry::Affine2D jittered_box_crop(const std::array<double, 4>& box, double jitter, std::uint64_t seed, int dataset,
                                     int sample) {
  auto rng = child_rng(seed, kEvalCropStream, static_cast<std::uint64_t>(dataset), static_cast<std::uint64_t>(sample));
  return training::detector_crop(box, rng, jitter);
}

// Forward in eval mode; a prediction through the near plane is re-run with
// the training-mode depth clamp so the sample still gets a finite score.
model::PipelineOutput predict(const model::Model<float>& m, const Image& image, const Points2& uv, int dataset,
                              const geometry::Affine2D* crop, int& behind_camera) {
  try {
    return m.forward(image, uv, dataset, crop, model::Mode::eval);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::BehindCamera) throw;
    ++behind_camera;
    return m.forward(image, uv, dataset, crop, model::Mode::train);
  }
}

}  // namespace

// --- metrics ------------------------------------------------------------------

double nme(const Points2& pred, const Points2& gt, double norm_distance) {
  if (pred.rows() == 0 || pred.rows() != gt.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "nme needs matching non-empty landmark sets");
  }
  if (!(norm_distance > 0)) throw Error(ErrorCode::ZeroNormalization, "normalization distance must be positive");
  return 100.0 * (pred - gt).rowwise().norm().mean() / norm_distance;
}

TemporalResult temporal_error(const std::vector<Points2>& pred, const std::vector<Points2>& gt, double eps) {
  if (pred.size() != gt.size() || pred.size() < 2) {
    throw Error(ErrorCode::ShapeMismatch, "temporal error needs two or more matching frames");
  }
  const Eigen::Index k = gt.front().rows();
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (k == 0 || gt[t].rows() != k || pred[t].rows() != k) {
      throw Error(ErrorCode::ShapeMismatch, "every frame needs the same non-empty landmark set");
    }
  }
  TemporalResult r;
  double sum = 0;
  for (std::size_t t = 0; t + 1 < gt.size(); ++t) {
    const Eigen::VectorXd dg = (gt[t + 1] - gt[t]).rowwise().norm();
    const Eigen::VectorXd dp = (pred[t + 1] - pred[t]).rowwise().norm();
    for (Eigen::Index i = 0; i < k; ++i) {
      if (dg(i) < eps) {
        ++r.skipped;
        continue;
      }
      sum += std::abs(dp(i) - dg(i)) / std::max(dg(i), eps);
      ++r.counted;
    }
  }
  if (r.counted == 0) throw Error(ErrorCode::AllStatic, "every ground-truth velocity is below the static threshold");
  r.value = sum / static_cast<double>(r.counted);
  return r;
}

VisibilityScores visibility_scores(const std::vector<bool>& pred, const std::vector<bool>& gt) {
  if (pred.size() != gt.size()) throw Error(ErrorCode::ShapeMismatch, "visibility vectors differ in size");
  VisibilityScores s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && gt[i]) ++s.true_positive;
    else if (pred[i]) ++s.false_positive;
    else if (gt[i]) ++s.false_negative;
    else ++s.true_negative;
  }
  const long predicted = s.true_positive + s.false_positive;
  const long actual = s.true_positive + s.false_negative;
  if (predicted > 0) s.precision = static_cast<double>(s.true_positive) / static_cast<double>(predicted);
  if (actual > 0) s.recall = static_cast<double>(s.true_positive) / static_cast<double>(actual);
  return s;
}

VisibilityScores& operator+=(VisibilityScores& a, const VisibilityScores& b) {
  a.true_positive += b.true_positive;
  a.false_positive += b.false_positive;
  a.false_negative += b.false_negative;
  a.true_negative += b.true_negative;
  const long predicted = a.true_positive + a.false_positive;
  const long actual = a.true_positive + a.false_negative;
  a.precision.reset();
  a.recall.reset();
  if (predicted > 0) a.precision = static_cast<double>(a.true_positive) / static_cast<double>(predicted);
  if (actual > 0) a.recall = static_cast<double>(a.true_positive) / static_cast<double>(actual);
  return a;
}

json to_json(const VisibilityScores& s) {
  return {{"precision", s.precision ? json(*s.precision) : json("undefined")},
          {"recall", s.recall ? json(*s.recall) : json("undefined")},
          {"true_positive", s.true_positive},
          {"false_positive", s.false_positive},
          {"false_negative", s.false_negative},
          {"true_negative", s.true_negative}};
}

// --- shard evaluation ---------------------------------------------------------

std::array<Eigen::Vector2d, 4> roi_corners(const geometry::Affine2D& theta) {
  Points2 crop(4, 2);
  crop << -1, -1, 1, -1, 1, 1, -1, 1;
  const Points2 frame = geometry::apply_points(geometry::invert(theta), crop);
  std::array<Eigen::Vector2d, 4> out;
  for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = frame.row(i).transpose();
  return out;
}

double mean_corner_displacement(const std::vector<std::array<Eigen::Vector2d, 4>>& corners) {
  const auto d = per_frame_displacement(corners);
  if (d.empty()) return 0;
  double s = 0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

std::optional<geometry::Affine2D> detector_crop_for(const model::Model<float>& m, const std::array<double, 4>& box,
                                                    double jitter, std::uint64_t seed, int dataset, int sample) {
  if (m.config().normalizer != model::Normalizer::detector_crop) return std::nullopt;
  return jittered_box_crop(box, jitter, seed, dataset, sample);
}

ShardEval evaluate_shard(const model::Model<float>& m, const fs::path& shard_dir, int dataset_index,
                         const EvalOptions& options) {
  if (dataset_index < 0 || dataset_index >= m.config().n_datasets) {
    throw Error(ErrorCode::InvalidArgument, "dataset index out of range for this checkpoint");
  }
  const synthgen::Shard shard = synthgen::load_shard(shard_dir);
  const double jitter = shard.spec.detector_jitter;
  ShardEval e;
  e.shard = shard_dir.string();
  e.index_sha1 = shard.index_sha1;
  e.dataset_index = dataset_index;

  std::vector<int> iid;
  std::map<int, std::vector<int>> sequences;
  for (std::size_t i = 0; i < shard.records.size(); ++i) {
    const auto& r = shard.records[i];
    if (r.sequence_id < 0) iid.push_back(static_cast<int>(i));
    else sequences[r.sequence_id].push_back(static_cast<int>(i));
  }
  if (options.max_samples > 0 && static_cast<int>(iid.size()) > options.max_samples) iid.resize(static_cast<std::size_t>(options.max_samples));

  double total = 0;
  std::vector<double> errors;
  VisibilityScores vis;
  for (std::size_t n = 0; n < iid.size(); ++n) {
    const int i = iid[n];
    const auto& r = shard.records[static_cast<std::size_t>(i)];
    const Image image = read_png(shard_dir / r.image_path);
    const auto crop = detector_crop_for(m, r.face_box, jitter, options.seed, dataset_index, i);
    const auto out = predict(m, image, r.query_uv, dataset_index, crop ? &*crop : nullptr, e.behind_camera);
    if (!(r.interocular > 0)) throw Error(ErrorCode::ZeroNormalization, "record without inter-ocular distance");
    const Eigen::VectorXd err = (out.landmarks_full - r.landmarks).rowwise().norm() * (100.0 / r.interocular);
    if (e.landmark_nme.empty()) e.landmark_nme.assign(static_cast<std::size_t>(err.size()), 0.0);
    if (e.landmark_nme.size() != static_cast<std::size_t>(err.size())) {
      throw Error(ErrorCode::ShapeMismatch, "records of a shard use different layouts");
    }
    for (Eigen::Index k = 0; k < err.size(); ++k) {
      e.landmark_nme[static_cast<std::size_t>(k)] += err(k);
      errors.push_back(err(k));
    }
    total += err.mean();
    if (static_cast<int>(n) < options.visibility_samples) {
      vis += visibility_scores(model::predict_visibility(m, image, r.query_uv, dataset_index, crop ? &*crop : nullptr,
                                                         options.visibility_render_size),
                               r.visibility);
    }
  }
  e.samples = static_cast<int>(iid.size());
  e.error_histogram = histogram(errors);
  if (e.samples > 0) {
    e.nme = total / e.samples;
    for (auto& v : e.landmark_nme) v /= e.samples;
  }
  if (options.visibility_samples > 0 && e.samples > 0) e.visibility = vis;

  if (options.temporal) {
    double pooled = 0;
    long counted = 0, skipped = 0;
    for (auto& [id, frames] : sequences) {
      std::sort(frames.begin(), frames.end(), [&](int a, int b) {
        return shard.records[static_cast<std::size_t>(a)].frame_index < shard.records[static_cast<std::size_t>(b)].frame_index;
      });
      SequenceTrace trace;
      trace.sequence_id = id;
      std::vector<Points2> pred, gt;
      for (int i : frames) {
        const auto& r = shard.records[static_cast<std::size_t>(i)];
        const Image image = read_png(shard_dir / r.image_path);
        const auto crop = detector_crop_for(m, r.face_box, jitter, options.seed, dataset_index, i);
        const auto out = predict(m, image, r.query_uv, dataset_index, crop ? &*crop : nullptr, e.behind_camera);
        pred.push_back(out.landmarks_full);
        gt.push_back(r.landmarks);
        trace.focal.push_back(out.gamma.effective_focal());
        trace.roi.push_back(roi_corners(out.theta));
        trace.box_roi.push_back(roi_corners(jittered_box_crop(r.face_box, jitter, options.seed, dataset_index, i)));
      }
      trace.roi_displacement = mean_corner_displacement(trace.roi);
      trace.box_displacement = mean_corner_displacement(trace.box_roi);
      if (pred.size() >= 2) {
        try {
          trace.temporal = temporal_error(pred, gt);
          pooled += trace.temporal->value * static_cast<double>(trace.temporal->counted);
          counted += trace.temporal->counted;
          skipped += trace.temporal->skipped;
        } catch (const Error& err) {
          if (err.code() != ErrorCode::AllStatic) throw;
        }
      }
      e.sequences.push_back(std::move(trace));
    }
    if (counted > 0) e.temporal = TemporalResult{pooled / static_cast<double>(counted), counted, skipped};
  }
  return e;
}

json to_json(const ShardEval& e, bool with_traces) {
  json j = {{"shard", e.shard},
            {"index_sha1", e.index_sha1},
            {"dataset_index", e.dataset_index},
            {"samples", e.samples},
            {"nme", e.nme},
            {"landmark_nme", e.landmark_nme},
            {"error_histogram",
             {{"bin_width", kHistogramMax / kHistogramBins}, {"counts", e.error_histogram}, {"last_bin", "overflow"}}},
            {"behind_camera", e.behind_camera},
            {"temporal", e.temporal ? to_json(*e.temporal) : json(nullptr)},
            {"visibility", e.visibility ? to_json(*e.visibility) : json(nullptr)}};
  json seqs = json::array();
  for (const auto& s : e.sequences) {
    json t = {{"sequence_id", s.sequence_id},
              {"roi_displacement", s.roi_displacement},
              {"box_displacement", s.box_displacement},
              {"temporal", s.temporal ? to_json(*s.temporal) : json(nullptr)}};
    if (with_traces) {
      t["focal"] = s.focal;
      t["roi"] = corners_json(s.roi);
      t["box_roi"] = corners_json(s.box_roi);
      t["roi_frame_displacement"] = per_frame_displacement(s.roi);
      t["box_frame_displacement"] = per_frame_displacement(s.box_roi);
    }
    seqs.push_back(t);
  }
  j["sequences"] = seqs;
  return j;
}

// --- reports ------------------------------------------------------------------

namespace {

json run_json(const RunResult& r) {
  json shards = json::array();
  for (const auto& s : r.shards) shards.push_back(to_json(s));
  return {{"variant", r.variant},
          {"seed", r.seed},
          {"checkpoint", r.checkpoint},
          {"checkpoint_sha1", r.checkpoint_sha1},
          {"nme", r.nme},
          {"temporal_error", optional_number(r.temporal_error)},
          {"shards", shards}};
}

}  // namespace

RunResult evaluate_checkpoint(const fs::path& checkpoint, const std::vector<fs::path>& shards,
                              const EvalOptions& options) {
  json manifest;
  const model::Model<float> m = model::load_checkpoint(checkpoint, &manifest);
  RunResult r;
  r.checkpoint = checkpoint.string();
  r.checkpoint_sha1 = manifest.at("sha1").get<std::string>();
  double total = 0, pooled = 0;
  long samples = 0, counted = 0;
  for (std::size_t d = 0; d < shards.size(); ++d) {
    r.shards.push_back(evaluate_shard(m, shards[d], static_cast<int>(d), options));
    const auto& s = r.shards.back();
    total += s.nme * s.samples;
    samples += s.samples;
    if (s.temporal) {
      pooled += s.temporal->value * static_cast<double>(s.temporal->counted);
      counted += s.temporal->counted;
    }
  }
  r.nme = samples > 0 ? total / static_cast<double>(samples) : std::numeric_limits<double>::quiet_NaN();
  if (counted > 0) r.temporal_error = pooled / static_cast<double>(counted);
  return r;
}

void summarize(VariantSummary& v) {
  double nme = 0, temporal = 0;
  int with_temporal = 0;
  for (const auto& r : v.runs) {
    nme += r.nme;
    if (r.temporal_error) {
      temporal += *r.temporal_error;
      ++with_temporal;
    }
  }
  v.nme_mean = v.runs.empty() ? std::numeric_limits<double>::quiet_NaN() : nme / static_cast<double>(v.runs.size());
  v.temporal_mean.reset();
  if (with_temporal > 0 && with_temporal == static_cast<int>(v.runs.size())) v.temporal_mean = temporal / with_temporal;
}

json to_json(const EvalReport& r) {
  json variants = json::array();
  for (const auto& v : r.variants) {
    json runs = json::array();
    for (const auto& run : v.runs) runs.push_back(run_json(run));
    variants.push_back(
        {{"name", v.name}, {"nme_mean", v.nme_mean}, {"temporal_mean", optional_number(v.temporal_mean)}, {"runs", runs}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"tag", report_tag(r)},
          {"metadata", r.metadata},
          {"variants", variants},
          {"verdicts", r.verdicts}};
}

std::string report_tag(const EvalReport& r) {
  std::vector<std::string> hashes;
  for (const auto& v : r.variants) {
    for (const auto& run : v.runs) hashes.push_back(run.checkpoint_sha1);
  }
  if (hashes.empty()) return "empty";
  if (hashes.size() == 1) return hashes.front().substr(0, 12);
  std::string joined;
  for (const auto& h : hashes) joined += h + "\n";
  return git_blob_sha1(joined).substr(0, 12);
}

json ordering_verdicts(const EvalReport& r, double tolerance) {
  std::map<std::string, const VariantSummary*> by_name;
  for (const auto& v : r.variants) by_name[v.name] = &v;
  json checks = json::array();
  bool all = true;
  const auto judge = [&](const std::string& lhs, const std::string& rhs, bool temporal, double tol) {
    if (!by_name.count(lhs) || !by_name.count(rhs)) return;
    const auto* a = by_name[lhs];
    const auto* b = by_name[rhs];
    json c = {{"lhs", lhs}, {"rhs", rhs}, {"metric", temporal ? "temporal_error" : "nme"}, {"tolerance", tol}};
    if (temporal && (!a->temporal_mean || !b->temporal_mean)) {
      c["pass"] = false;
      c["reason"] = "temporal error unavailable";
    } else {
      const double x = temporal ? *a->temporal_mean : a->nme_mean;
      const double y = temporal ? *b->temporal_mean : b->nme_mean;
      c["lhs_value"] = x;
      c["rhs_value"] = y;
      c["pass"] = x <= y + tol;
    }
    all = all && c["pass"].get<bool>();
    checks.push_back(c);
  };
  const std::vector<std::string> singles{"stn_sim", "stn_affine", "3d_fixed_focal", "3d_learned_focal", "query_deformer"};
  for (const auto& s : singles) judge(s, "baseline_2d", false, tolerance);
  for (const auto& s : singles) judge("full", s, false, tolerance);
  judge("stn_affine", "stn_sim", false, tolerance);
  judge("full", "baseline_2d", true, 0.0);
  return {{"checks", checks}, {"pass", all}};
}

EvalReport run_ablation(const AblationConfig& config) {
  if (config.variants.empty() || config.seeds.empty()) {
    throw Error(ErrorCode::ConfigInvalid, "ablation needs at least one variant and one seed");
  }
  EvalReport report;
  json shard_hashes = json::array();
  for (const auto& s : config.test_shards) shard_hashes.push_back({{"path", s.string()}, {"index_sha1", synthgen::load_shard(s).index_sha1}});
  report.metadata = {{"base_config", training::to_json(config.base)},
                     {"seeds", config.seeds},
                     {"variants", config.variants},
                     {"test_shards", shard_hashes},
                     {"eval_seed", config.options.seed}};
  for (const auto& name : config.variants) {
    VariantSummary v;
    v.name = name;
    for (std::uint64_t seed : config.seeds) {
      training::TrainConfig c = config.base;
      c.seed = seed;
      c.model = model::variant_config(name, config.base.model);
      c.out_dir = config.out_dir / name / ("seed_" + std::to_string(seed));
      const fs::path result_path = c.out_dir / "result.json";
      fs::path checkpoint = c.out_dir / "best.ckpt";
      bool trained = false;
      if (fs::exists(result_path) && fs::exists(checkpoint)) {
        const json prev = read_json_file(result_path);
        trained = prev.value("train_config", json()) == training::to_json(c);
      }
      if (!trained) checkpoint = training::fit(c).best;
      RunResult run = evaluate_checkpoint(checkpoint, config.test_shards, config.options);
      run.variant = name;
      run.seed = seed;
      json persisted = run_json(run);
      persisted["train_config"] = training::to_json(c);
      write_file_atomic(result_path, persisted.dump(1));
      v.runs.push_back(std::move(run));
    }
    summarize(v);
    report.variants.push_back(std::move(v));
  }
  report.verdicts = ordering_verdicts(report);
  fs::create_directories(config.out_dir);
  write_file_atomic(config.out_dir / ("report_" + report_tag(report) + ".json"), to_json(report).dump(1));
  return report;
}

std::vector<fs::path> emit_plots(const EvalReport& r, const fs::path& out_dir) {
  if (r.variants.empty()) throw Error(ErrorCode::InvalidArgument, "cannot plot a report without variants");
  const std::string tag = report_tag(r);
  std::vector<fs::path> files;
  json charts = json::array();
  const auto emit = [&](const plot::Chart& c, const std::string& stem) {
    for (auto& p : plot::write_chart(c, out_dir / (stem + "_" + tag))) files.push_back(p);
    json j = plot::to_json(c);
    j["file_stem"] = stem + "_" + tag;
    charts.push_back(j);
  };

  plot::Chart bars{"NME by variant (seed mean)", "variant", "NME (% inter-ocular)", plot::Kind::bar, {}, {}};
  plot::Series nme_series{"NME", {}, {}};
  plot::Series temporal_series{"temporal error", {}, {}};
  bool any_temporal = false;
  for (std::size_t i = 0; i < r.variants.size(); ++i) {
    const auto& v = r.variants[i];
    bars.categories.push_back(v.name);
    nme_series.x.push_back(static_cast<double>(i));
    nme_series.y.push_back(v.nme_mean);
    temporal_series.x.push_back(static_cast<double>(i));
    temporal_series.y.push_back(v.temporal_mean ? *v.temporal_mean : std::numeric_limits<double>::quiet_NaN());
    any_temporal = any_temporal || v.temporal_mean.has_value();
  }
  bars.series.push_back(nme_series);
  emit(bars, "nme_bars");
  if (any_temporal) {
    plot::Chart t{"Temporal error by variant (seed mean)", "variant", "E_temporal", plot::Kind::bar, bars.categories, {temporal_series}};
    emit(t, "temporal_bars");
  }

  plot::Chart hist{"Per-landmark error histogram", "error (% inter-ocular)", "fraction", plot::Kind::line, {}, {}};
  for (const auto& v : r.variants) {
    std::vector<double> counts(kHistogramBins + 1, 0.0);
    for (const auto& run : v.runs) {
      for (const auto& s : run.shards) {
        for (std::size_t b = 0; b < counts.size() && b < s.error_histogram.size(); ++b) counts[b] += s.error_histogram[b];
      }
    }
    double n = 0;
    for (double c : counts) n += c;
    if (n == 0) continue;
    plot::Series s{v.name, {}, {}};
    for (int b = 0; b < kHistogramBins; ++b) {
      s.x.push_back((b + 0.5) * kHistogramMax / kHistogramBins);
      s.y.push_back(counts[static_cast<std::size_t>(b)] / n);
    }
    hist.series.push_back(s);
  }
  if (!hist.series.empty()) emit(hist, "error_histogram");

  for (const auto& v : r.variants) {
    if (v.runs.empty()) continue;
    const auto& run = v.runs.front();
    plot::Chart focal{"Effective focal length per sequence (" + v.name + ")", "frame", "focal (mm)", plot::Kind::line, {}, {}};
    plot::Chart roi{"Region-of-interest corner motion (" + v.name + ")", "frame", "mean corner displacement",
                    plot::Kind::line, {}, {}};
    for (const auto& s : run.shards) {
      for (const auto& seq : s.sequences) {
        plot::Series f{"d" + std::to_string(s.dataset_index) + " seq " + std::to_string(seq.sequence_id), {}, seq.focal};
        for (std::size_t t = 0; t < seq.focal.size(); ++t) f.x.push_back(static_cast<double>(t));
        focal.series.push_back(f);
        if (roi.series.empty()) {
          const auto model_d = per_frame_displacement(seq.roi);
          const auto box_d = per_frame_displacement(seq.box_roi);
          plot::Series a{"model RoI", {}, model_d};
          plot::Series b{"jittered box", {}, box_d};
          for (std::size_t t = 0; t < model_d.size(); ++t) a.x.push_back(static_cast<double>(t)), b.x.push_back(static_cast<double>(t));
          roi.series = {a, b};
        }
      }
    }
    if (!focal.series.empty()) emit(focal, "focal_" + v.name);
    if (!roi.series.empty()) emit(roi, "roi_" + v.name);
  }

  fs::create_directories(out_dir);
  const fs::path series = out_dir / ("series_" + tag + ".json");
  write_file_atomic(series, json{{"schema_version", kReportSchemaVersion}, {"tag", tag}, {"charts", charts}}.dump(1));
  files.push_back(series);
  return files;
}

// --- report parsing -----------------------------------------------------------

namespace {

std::optional<double> number_or_none(const json& j) {
  if (j.is_number()) return j.get<double>();
  return std::nullopt;
}

std::optional<TemporalResult> temporal_from_json(const json& j) {
  if (!j.is_object()) return std::nullopt;
  return TemporalResult{j.at("value").get<double>(), j.at("counted").get<long>(), j.at("skipped").get<long>()};
}

std::vector<std::array<Eigen::Vector2d, 4>> corners_from_json(const json& j) {
  std::vector<std::array<Eigen::Vector2d, 4>> out;
  for (const auto& quad : j) {
    std::array<Eigen::Vector2d, 4> q;
    for (std::size_t c = 0; c < 4; ++c) q[c] = {quad.at(c).at(0).get<double>(), quad.at(c).at(1).get<double>()};
    out.push_back(q);
  }
  return out;
}

ShardEval shard_from_json(const json& j) {
  ShardEval e;
  e.shard = j.at("shard").get<std::string>();
  e.index_sha1 = j.at("index_sha1").get<std::string>();
  e.dataset_index = j.at("dataset_index").get<int>();
  e.samples = j.at("samples").get<int>();
  e.nme = j.at("nme").get<double>();
  e.landmark_nme = j.at("landmark_nme").get<std::vector<double>>();
  e.error_histogram = j.at("error_histogram").at("counts").get<std::vector<double>>();
  e.behind_camera = j.at("behind_camera").get<int>();
  e.temporal = temporal_from_json(j.at("temporal"));
  if (j.at("visibility").is_object()) {
    const json& v = j.at("visibility");
    VisibilityScores s;
    s.true_positive = v.at("true_positive").get<long>();
    s.false_positive = v.at("false_positive").get<long>();
    s.false_negative = v.at("false_negative").get<long>();
    s.true_negative = v.at("true_negative").get<long>();
    s.precision = number_or_none(v.at("precision"));
    s.recall = number_or_none(v.at("recall"));
    e.visibility = s;
  }
  for (const auto& t : j.at("sequences")) {
    SequenceTrace s;
    s.sequence_id = t.at("sequence_id").get<int>();
    s.roi_displacement = t.at("roi_displacement").get<double>();
    s.box_displacement = t.at("box_displacement").get<double>();
    s.temporal = temporal_from_json(t.at("temporal"));
    if (t.contains("focal")) s.focal = t.at("focal").get<std::vector<double>>();
    if (t.contains("roi")) s.roi = corners_from_json(t.at("roi"));
    if (t.contains("box_roi")) s.box_roi = corners_from_json(t.at("box_roi"));
    e.sequences.push_back(std::move(s));
  }
  return e;
}

}  // namespace

EvalReport report_from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
      throw Error(ErrorCode::ConfigInvalid, "unsupported report schema version");
    }
    EvalReport r;
    r.metadata = j.at("metadata");
    r.verdicts = j.at("verdicts");
    for (const auto& v : j.at("variants")) {
      VariantSummary s;
      s.name = v.at("name").get<std::string>();
      s.nme_mean = v.at("nme_mean").is_number() ? v.at("nme_mean").get<double>() : std::numeric_limits<double>::quiet_NaN();
      s.temporal_mean = number_or_none(v.at("temporal_mean"));
      for (const auto& run : v.at("runs")) {
        RunResult rr;
        rr.variant = run.at("variant").get<std::string>();
        rr.seed = run.at("seed").get<std::uint64_t>();
        rr.checkpoint = run.at("checkpoint").get<std::string>();
        rr.checkpoint_sha1 = run.at("checkpoint_sha1").get<std::string>();
        rr.nme = run.at("nme").is_number() ? run.at("nme").get<double>() : std::numeric_limits<double>::quiet_NaN();
        rr.temporal_error = number_or_none(run.at("temporal_error"));
        for (const auto& sh : run.at("shards")) rr.shards.push_back(shard_from_json(sh));
        s.runs.push_back(std::move(rr));
      }
      r.variants.push_back(std::move(s));
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("malformed report: ") + e.what());
  }
}

AblationConfig ablation_config_from_json(const json& j, const fs::path& base_dir) {
  AblationConfig a;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "train") a.base = training::train_config_from_json(*it);
      else if (k == "test_shards") {
        for (const auto& s : *it) a.test_shards.emplace_back(s.get<std::string>());
      } else if (k == "variants") a.variants = it->get<std::vector<std::string>>();
      else if (k == "seeds") a.seeds = it->get<std::vector<std::uint64_t>>();
      else if (k == "out_dir") a.out_dir = it->get<std::string>();
      else if (k == "eval_seed") a.options.seed = it->get<std::uint64_t>();
      else if (k == "max_samples") a.options.max_samples = it->get<int>();
      else if (k == "visibility_samples") a.options.visibility_samples = it->get<int>();
      else throw Error(ErrorCode::ConfigInvalid, "unknown ablation field " + k);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("ablation config: ") + e.what());
  }
  if (!j.contains("train")) throw Error(ErrorCode::ConfigInvalid, "ablation config needs a train section");
  if (a.variants.empty()) a.variants = model::variant_names();
  for (const auto& v : a.variants) model::variant_config(v);
  const auto rebase = [&](fs::path& p) {
    if (p.is_relative()) p = base_dir / p;
  };
  for (auto& s : a.base.shards) rebase(s);
  for (auto& s : a.test_shards) rebase(s);
  rebase(a.out_dir);
  if (a.test_shards.empty()) throw Error(ErrorCode::ConfigInvalid, "ablation config needs test shards");
  return a;
}

}  // namespace lm3d::eval
