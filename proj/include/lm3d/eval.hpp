#pragma once

// Metrics, shard evaluation of a trained model, the ablation harness and
// plot emission.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lm3d/geometry.hpp"
#include "lm3d/model.hpp"
#include "lm3d/training.hpp"
#include "lm3d/util.hpp"

namespace lm3d::eval {

using geometry::Points2;

inline constexpr int kReportSchemaVersion = 1;
inline constexpr double kStaticVelocity = 1e-3;  // normalized units per frame

// --- metrics ------------------------------------------------------------------

/// 100 * mean_k |pred_k - gt_k| / norm_distance. Throws ZeroNormalization
/// (norm_distance <= 0) and ShapeMismatch (K = 0 or differing sizes).
double nme(const Points2& pred, const Points2& gt, double norm_distance);

struct TemporalResult {
  double value = 0;
  long counted = 0;  // terms in the mean
  long skipped = 0;  // terms whose gt speed is below eps
};

/// Mean over frames t and landmarks k of | |dp| - |dg| | / max(|dg|, eps),
/// with dx = x(t+1) - x(t); terms with |dg| < eps are skipped and counted.
/// Throws AllStatic when every term is skipped, ShapeMismatch for T < 2.
TemporalResult temporal_error(const std::vector<Points2>& pred, const std::vector<Points2>& gt,
                              double eps = kStaticVelocity);

struct VisibilityScores {
  std::optional<double> precision;  // absent when nothing is predicted visible
  std::optional<double> recall;     // absent when nothing is visible
  long true_positive = 0, false_positive = 0, false_negative = 0, true_negative = 0;
};

VisibilityScores visibility_scores(const std::vector<bool>& pred, const std::vector<bool>& gt);
VisibilityScores& operator+=(VisibilityScores& a, const VisibilityScores& b);
/// Undefined scores serialize as the string "undefined".
json to_json(const VisibilityScores& s);

// --- shard evaluation ---------------------------------------------------------

struct EvalOptions {
  std::uint64_t seed = 0;        // detector-crop jitter stream
  int max_samples = 0;           // i.i.d. samples evaluated per shard (0: all)
  bool temporal = true;          // sequences: temporal error and traces
  int visibility_samples = 0;    // i.i.d. samples scored for visibility (0: skip)
  int visibility_render_size = 192;
};

/// Corners of a frame -> crop transform's region of interest, in frame
/// coordinates (crop corners (-1,-1), (1,-1), (1,1), (-1,1) mapped back).
std::array<Eigen::Vector2d, 4> roi_corners(const geometry::Affine2D& theta);

/// Mean over consecutive frames and the four corners of the corner motion.
double mean_corner_displacement(const std::vector<std::array<Eigen::Vector2d, 4>>& corners);

struct SequenceTrace {
  int sequence_id = -1;
  std::vector<double> focal;  // effective focal length per frame, mm
  std::vector<std::array<Eigen::Vector2d, 4>> roi;       // model region of interest
  std::vector<std::array<Eigen::Vector2d, 4>> box_roi;   // jittered gt-box crop
  double roi_displacement = 0;
  double box_displacement = 0;
  std::optional<TemporalResult> temporal;
};

struct ShardEval {
  std::string shard;
  std::string index_sha1;
  int dataset_index = 0;
  int samples = 0;
  double nme = 0;                     // mean over i.i.d. samples
  std::vector<double> landmark_nme;   // per landmark, mean over samples
  std::vector<double> error_histogram;  // per-landmark errors, 0.5% bins up to 30%, last bin overflow
  int behind_camera = 0;              // samples evaluated with the depth clamp
  std::optional<TemporalResult> temporal;  // pooled over sequences
  std::optional<VisibilityScores> visibility;
  std::vector<SequenceTrace> sequences;
};

/// The model crop for a record: the STN's own for STN variants, otherwise
/// the stored face box jittered like a detector (deterministic per sample).
std::optional<geometry::Affine2D> detector_crop_for(const model::Model<float>& m, const std::array<double, 4>& box,
                                                    double jitter, std::uint64_t seed, int dataset, int sample);

ShardEval evaluate_shard(const model::Model<float>& m, const std::filesystem::path& shard, int dataset_index,
                         const EvalOptions& options);

json to_json(const ShardEval& e, bool with_traces = true);

// --- reports ------------------------------------------------------------------

struct RunResult {
  std::string variant;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string checkpoint_sha1;
  std::vector<ShardEval> shards;
  double nme = 0;                         // mean over all evaluated i.i.d. samples
  std::optional<double> temporal_error;   // mean over pooled sequence terms
};

struct VariantSummary {
  std::string name;
  std::vector<RunResult> runs;
  double nme_mean = 0;
  std::optional<double> temporal_mean;
};

struct EvalReport {
  json metadata = json::object();
  std::vector<VariantSummary> variants;
  json verdicts = json::object();
};

json to_json(const EvalReport& r);
/// Inverse of to_json (metadata and verdicts are kept as JSON).
EvalReport report_from_json(const json& j);
/// Short tag embedded in output file names: the checkpoint hash prefix for
/// single-run reports, a hash of all checkpoint hashes otherwise.
std::string report_tag(const EvalReport& r);

RunResult evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::vector<std::filesystem::path>& shards,
                              const EvalOptions& options);
void summarize(VariantSummary& v);

/// Ordering verdicts: every single-extension variant <= baseline + tol,
/// full <= every single-extension variant + tol, stn_affine <= stn_sim + tol,
/// full temporal <= baseline temporal. Only pairs present are judged.
json ordering_verdicts(const EvalReport& r, double tolerance = 0.1);

struct AblationConfig {
  training::TrainConfig base;            // shards, budget and the model base
  std::vector<std::filesystem::path> test_shards;  // dataset index = position
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out_dir = "runs/ablation";
  EvalOptions options;
};

/// Fields: train (a train config), test_shards, variants (default: all),
/// seeds, out_dir, eval_seed, max_samples, visibility_samples. Relative
/// paths resolve against base_dir.
AblationConfig ablation_config_from_json(const json& j, const std::filesystem::path& base_dir = {});

/// Trains every (variant, seed) under the base budget, evaluates it on the
/// test shards and persists each run as <out>/<variant>/seed_<s>/result.json.
/// A run whose result.json records the same train config is not retrained.
EvalReport run_ablation(const AblationConfig& config);

/// NME bars, per-landmark error histogram, focal traces and region-of-interest
/// trajectories as PNG and SVG, plus series.json with every plotted series.
/// Throws InvalidArgument for a report without variants.
std::vector<std::filesystem::path> emit_plots(const EvalReport& r, const std::filesystem::path& out_dir);

}  // namespace lm3d::eval
