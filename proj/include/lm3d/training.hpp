#pragma once

// Losses, augmentation, AdamW and the training loop.

#include <array>
#include <limits>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lm3d/geometry.hpp"
#include "lm3d/image.hpp"
#include "lm3d/model.hpp"
#include "lm3d/util.hpp"

namespace lm3d::training {

using geometry::Affine2D;
using geometry::Points2;

/// What training may see of a sample: no pose, no visibility.
struct TrainSample {
  Image image;
  Points2 landmarks;  // full-frame normalized
  Points2 uv;
  int dataset_index = 0;
  std::array<double, 4> face_box{};  // detector box, normalized frame coords
  double interocular = 0;
  int sequence_id = -1;
  int frame_index = -1;
  int sample_id = 0;
};

struct AugmentToggles {
  bool photometric = true;
  bool geometric = true;
};

struct TrainConfig {
  int epochs = 25;
  int batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> shards;
  AugmentToggles augment;
  int queries_per_sample = 64;
  double nll_weight = 1.0;
  double hinge_weight = 10.0;
  double validation_fraction = 0.1;
  int validation_queries = 64;
  double detector_jitter = 0.05;
  int log_every = 10;
  int checkpoint_every = 0;  // steps; 0 saves only at epoch ends
  long max_steps = -1;       // stop (and save) after this many total steps
  std::filesystem::path out_dir = "runs/train";
  model::ModelConfig model;

  /// Throws ConfigInvalid.
  void validate() const;
};

json to_json(const TrainConfig& c);
/// Unknown fields are rejected. `model` may be an object of model fields
/// and/or {"variant": name}.
TrainConfig train_config_from_json(const json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

// --- loss ---------------------------------------------------------------------

struct NllResult {
  double loss = 0;
  Points2 d_pred;
  Eigen::VectorXd d_sigma;
};

/// Mean over landmarks and coordinates of log(sigma) + r^2 / (2 sigma^2),
/// sigma = c per landmark. Throws NonPositiveSigma.
double gaussian_nll(const Points2& pred, const Eigen::VectorXd& sigma, const Points2& gt);
NllResult gaussian_nll_grad(const Points2& pred, const Eigen::VectorXd& sigma, const Points2& gt);

// --- data ---------------------------------------------------------------------

/// Loads every record of a shard (images decoded) with its dataset index.
std::vector<TrainSample> load_samples(const std::filesystem::path& shard_dir, int dataset_index);

/// Frame -> crop transform of a face box enlarged by `margin`, with the
/// center and size jittered by up to `jitter` of the box size.
Affine2D detector_crop(const std::array<double, 4>& face_box, std::mt19937_64& rng, double jitter,
                       double margin = 1.2);

/// Applies the similarity g to image (resampled), landmarks, face box and
/// inter-ocular distance.
TrainSample apply_geometric(const TrainSample& s, const Affine2D& g);

/// Random photometric jitter and a random similarity, per the toggles.
TrainSample augment(const TrainSample& s, std::mt19937_64& rng, const AugmentToggles& toggles);

// --- optimization -------------------------------------------------------------

/// Decoupled weight decay Adam (PyTorch AdamW semantics).
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(model::Model<float>& model);
  long steps() const noexcept { return t_; }
  double lr() const noexcept { return lr_; }

  std::vector<model::NamedArray> state_arrays() const;
  void load_state(const std::vector<model::NamedArray>& arrays, long steps);

 private:
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<model::Mat<float>> m_, v_;
};

struct TrainState {
  model::Model<float> model;
  AdamW optimizer;
  int epoch = 0;
  long step = 0;        // global step count
  int epoch_step = 0;   // steps taken in the current epoch
  double best_val_nme = std::numeric_limits<double>::infinity();
};

struct StepMetrics {
  double loss = 0;
  double grad_norm = 0;
  std::vector<double> nme;  // per dataset index, NaN when absent from the batch
};

/// One batch: forward, loss (NLL + hinge), backward, AdamW update. Query
/// subsets and detector crops come from `rng`. Throws NonFiniteLoss.
StepMetrics train_step(TrainState& state, const std::vector<const TrainSample*>& batch, const TrainConfig& config,
                       std::mt19937_64& rng);

/// Mean NME (% of inter-ocular) over samples; queries limited to
/// `max_queries` fixed per sample (all when <= 0).
double validation_nme(const model::Model<float>& model, const std::vector<TrainSample>& samples,
                      const TrainConfig& config, int max_queries);

struct FitResult {
  std::filesystem::path best;
  std::filesystem::path last;
  double best_val_nme = 0;
  std::vector<double> losses;  // every step of this invocation
};

/// Trains from scratch, or from `resume` (a last.ckpt written by fit).
FitResult fit(const TrainConfig& config, const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Train/validation split of the i.i.d. part of a shard (sequence frames are
/// excluded); validation is the trailing fraction.
std::pair<std::vector<TrainSample>, std::vector<TrainSample>> split_samples(std::vector<TrainSample> all,
                                                                            double validation_fraction);

}  // namespace lm3d::training
