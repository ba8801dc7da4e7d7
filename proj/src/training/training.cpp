#include "lm3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lm3d/error.hpp"
#include "lm3d/synthgen.hpp"

namespace lm3d::training {

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kStepStream = 2;
constexpr std::uint64_t kValidationStream = 3;

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); }

// Evenly spaced query subset, identical on every call.
std::vector<Eigen::Index> fixed_subset(Eigen::Index n, int max_queries) {
  std::vector<Eigen::Index> idx;
  if (max_queries <= 0 || n <= max_queries) {
    idx.resize(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  for (int i = 0; i < max_queries; ++i) idx.push_back(static_cast<Eigen::Index>((static_cast<double>(i) + 0.5) * n / max_queries));
  return idx;
}

std::vector<Eigen::Index> random_subset(Eigen::Index n, int count, std::mt19937_64& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (count <= 0 || n <= count) return idx;
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

Points2 rows(const Points2& p, const std::vector<Eigen::Index>& idx) {
  Points2 out(static_cast<Eigen::Index>(idx.size()), 2);
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = p.row(idx[i]);
  return out;
}

double sample_nme(const Points2& pred, const Points2& gt, double interocular) {
  return 100.0 * (pred - gt).rowwise().norm().mean() / interocular;
}

}  // namespace

// --- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 0) invalid("epochs must be non-negative");
  if (batch_size <= 0) invalid("batch_size must be positive");
  if (!(lr >= 0) || !(weight_decay >= 0)) invalid("lr and weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0)) invalid("bad Adam constants");
  if (shards.empty()) invalid("at least one shard is required");
  if (queries_per_sample <= 0) invalid("queries_per_sample must be positive");
  if (!(validation_fraction >= 0 && validation_fraction < 1)) invalid("validation_fraction must be in [0, 1)");
  if (nll_weight < 0 || hinge_weight < 0 || detector_jitter < 0) invalid("weights must be non-negative");
  if (log_every <= 0 || checkpoint_every < 0) invalid("bad logging cadence");
  model.validate();
}

json to_json(const TrainConfig& c) {
  json shards = json::array();
  for (const auto& s : c.shards) shards.push_back(s.string());
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"seed", c.seed},
          {"shards", shards},
          {"augment", {{"photometric", c.augment.photometric}, {"geometric", c.augment.geometric}}},
          {"queries_per_sample", c.queries_per_sample},
          {"nll_weight", c.nll_weight},
          {"hinge_weight", c.hinge_weight},
          {"validation_fraction", c.validation_fraction},
          {"validation_queries", c.validation_queries},
          {"detector_jitter", c.detector_jitter},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every},
          {"max_steps", c.max_steps},
          {"out_dir", c.out_dir.string()},
          {"model", model::to_json(c.model)}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) invalid("train config must be an object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "epochs") c.epochs = it->get<int>();
      else if (k == "batch_size") c.batch_size = it->get<int>();
      else if (k == "lr") c.lr = it->get<double>();
      else if (k == "weight_decay") c.weight_decay = it->get<double>();
      else if (k == "beta1") c.beta1 = it->get<double>();
      else if (k == "beta2") c.beta2 = it->get<double>();
      else if (k == "eps") c.eps = it->get<double>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>();
      else if (k == "shards") {
        c.shards.clear();
        for (const auto& s : *it) c.shards.emplace_back(s.get<std::string>());
      } else if (k == "augment") {
        for (auto a = it->begin(); a != it->end(); ++a) {
          if (a.key() == "photometric") c.augment.photometric = a->get<bool>();
          else if (a.key() == "geometric") c.augment.geometric = a->get<bool>();
          else invalid("unknown augment toggle " + a.key());
        }
      } else if (k == "queries_per_sample") c.queries_per_sample = it->get<int>();
      else if (k == "nll_weight") c.nll_weight = it->get<double>();
      else if (k == "hinge_weight") c.hinge_weight = it->get<double>();
      else if (k == "validation_fraction") c.validation_fraction = it->get<double>();
      else if (k == "validation_queries") c.validation_queries = it->get<int>();
      else if (k == "detector_jitter") c.detector_jitter = it->get<double>();
      else if (k == "log_every") c.log_every = it->get<int>();
      else if (k == "checkpoint_every") c.checkpoint_every = it->get<int>();
      else if (k == "max_steps") c.max_steps = it->get<long>();
      else if (k == "out_dir") c.out_dir = it->get<std::string>();
      else if (k == "model") {
        json fields = *it;
        model::ModelConfig base;
        if (fields.contains("variant")) {
          base = model::variant_config(fields["variant"].get<std::string>());
          fields.erase("variant");
        }
        json merged = model::to_json(base);
        merged.update(fields);
        c.model = model::model_config_from_json(merged);
      } else invalid("unknown train config field " + k);
    }
  } catch (const json::exception& e) {
    invalid(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  TrainConfig c = train_config_from_json(read_json_file(path));
  // relative shard and output paths are relative to the config file
  const auto base = path.parent_path();
  for (auto& s : c.shards) {
    if (s.is_relative()) s = base / s;
  }
  if (c.out_dir.is_relative()) c.out_dir = base / c.out_dir;
  return c;
}

// --- loss ---------------------------------------------------------------------

NllResult gaussian_nll_grad(const Points2& pred, const Eigen::VectorXd& sigma, const Points2& gt) {
  if (pred.rows() != gt.rows() || sigma.size() != pred.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "prediction, sigma and target differ in size");
  }
  NllResult r;
  r.d_pred = Points2::Zero(pred.rows(), 2);
  r.d_sigma = Eigen::VectorXd::Zero(sigma.size());
  if (pred.rows() == 0) return r;
  const double norm = 1.0 / (2.0 * static_cast<double>(pred.rows()));
  for (Eigen::Index k = 0; k < pred.rows(); ++k) {
    const double s = sigma(k);
    if (!(s > 0)) throw Error(ErrorCode::NonPositiveSigma, "sigma must be positive");
    for (int d = 0; d < 2; ++d) {
      const double res = pred(k, d) - gt(k, d);
      r.loss += (std::log(s) + res * res / (2 * s * s)) * norm;
      r.d_pred(k, d) = res / (s * s) * norm;
      r.d_sigma(k) += (1.0 / s - res * res / (s * s * s)) * norm;
    }
  }
  return r;
}

double gaussian_nll(const Points2& pred, const Eigen::VectorXd& sigma, const Points2& gt) {
  return gaussian_nll_grad(pred, sigma, gt).loss;
}

// --- data ---------------------------------------------------------------------

std::vector<TrainSample> load_samples(const std::filesystem::path& shard_dir, int dataset_index) {
  const synthgen::Shard shard = synthgen::load_shard(shard_dir);
  std::vector<TrainSample> out;
  out.reserve(shard.records.size());
  int id = 0;
  for (const auto& r : shard.records) {
    TrainSample s;
    s.image = read_png(shard_dir / r.image_path);
    s.landmarks = r.landmarks;
    s.uv = r.query_uv;
    s.dataset_index = dataset_index;
    s.face_box = r.face_box;
    s.interocular = r.interocular;
    s.sequence_id = r.sequence_id;
    s.frame_index = r.frame_index;
    s.sample_id = id++;
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<std::vector<TrainSample>, std::vector<TrainSample>> split_samples(std::vector<TrainSample> all,
                                                                            double validation_fraction) {
  std::vector<TrainSample> iid;
  for (auto& s : all) {
    if (s.sequence_id < 0) iid.push_back(std::move(s));
  }
  const auto n_val = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(iid.size())));
  std::vector<TrainSample> val(std::make_move_iterator(iid.end() - static_cast<std::ptrdiff_t>(n_val)),
                               std::make_move_iterator(iid.end()));
  iid.resize(iid.size() - n_val);
  return {std::move(iid), std::move(val)};
}

Affine2D detector_crop(const std::array<double, 4>& box, std::mt19937_64& rng, double jitter, double margin) {
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  const double size = std::max({box[2] - box[0], box[3] - box[1], 1e-3});
  const double cx = 0.5 * (box[0] + box[2]) + jitter * size * sym(rng);
  const double cy = 0.5 * (box[1] + box[3]) + jitter * size * sym(rng);
  const double half = 0.5 * margin * size * (1.0 + jitter * sym(rng));
  const double s = 1.0 / half;
  return Affine2D::similarity(s, 0.0, -s * cx, -s * cy);
}

TrainSample apply_geometric(const TrainSample& s, const Affine2D& g) {
  TrainSample out = s;
  out.image = model::resample(s.image, geometry::invert(g), s.image.height, s.image.width);
  out.landmarks = geometry::apply_points(g, s.landmarks);
  Points2 corners(4, 2);
  corners << s.face_box[0], s.face_box[1], s.face_box[2], s.face_box[1], s.face_box[0], s.face_box[3], s.face_box[2],
      s.face_box[3];
  const Points2 moved = geometry::apply_points(g, corners);
  out.face_box = {moved.col(0).minCoeff(), moved.col(1).minCoeff(), moved.col(0).maxCoeff(), moved.col(1).maxCoeff()};
  out.interocular = s.interocular * std::sqrt(std::abs(g.matrix().leftCols<2>().determinant()));
  return out;
}

TrainSample augment(const TrainSample& s, std::mt19937_64& rng, const AugmentToggles& toggles) {
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  TrainSample out = s;
  if (toggles.geometric) {
    const Affine2D g = Affine2D::similarity(1.0 + 0.1 * sym(rng), 0.17 * sym(rng), 0.1 * sym(rng), 0.1 * sym(rng));
    out = apply_geometric(out, g);
  }
  if (toggles.photometric) {
    const double brightness = 0.1 * sym(rng);
    const double contrast = 1.0 + 0.2 * sym(rng);
    const double gamma = std::exp(0.2 * sym(rng));
    const double noise = 0.02 * (0.5 + 0.5 * sym(rng));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : out.image.data) {
      double x = std::pow(std::clamp(static_cast<double>(v), 0.0, 1.0), gamma);
      x = (x - 0.5) * contrast + 0.5 + brightness + noise * n(rng);
      v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
  }
  return out;
}

// --- optimizer ----------------------------------------------------------------

void AdamW::step(model::Model<float>& model) {
  if (m_.empty()) {
    model.visit([&](const std::string&, nn::Tensor<float>& t) {
      m_.push_back(model::Mat<float>::Zero(t.value.rows(), t.value.cols()));
      v_.push_back(model::Mat<float>::Zero(t.value.rows(), t.value.cols()));
    });
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const float decay = static_cast<float>(1.0 - lr_ * wd_);
  const float b1 = static_cast<float>(b1_);
  const float b2 = static_cast<float>(b2_);
  const float step_size = static_cast<float>(lr_ / c1);
  const float root_c2 = static_cast<float>(std::sqrt(c2));
  const float eps = static_cast<float>(eps_);
  std::size_t i = 0;
  model.visit([&](const std::string&, nn::Tensor<float>& t) {
    auto& m = m_[i];
    auto& v = v_[i];
    ++i;
    t.value *= decay;
    m = b1 * m + (1 - b1) * t.grad;
    v = b2 * v + (1 - b2) * t.grad.cwiseProduct(t.grad);
    t.value.array() -= step_size * m.array() / (v.array().sqrt() / root_c2 + eps);
  });
}

std::vector<model::NamedArray> AdamW::state_arrays() const {
  std::vector<model::NamedArray> out;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    out.push_back({"m" + std::to_string(i), m_[i]});
    out.push_back({"v" + std::to_string(i), v_[i]});
  }
  return out;
}

void AdamW::load_state(const std::vector<model::NamedArray>& arrays, long steps) {
  if (arrays.size() % 2 != 0) throw Error(ErrorCode::IncompatibleCheckpoint, "optimizer state is malformed");
  m_.clear();
  v_.clear();
  for (std::size_t i = 0; i < arrays.size(); i += 2) {
    m_.push_back(arrays[i].value);
    v_.push_back(arrays[i + 1].value);
  }
  t_ = steps;
}

// --- training -----------------------------------------------------------------

StepMetrics train_step(TrainState& state, const std::vector<const TrainSample*>& batch, const TrainConfig& config,
                       std::mt19937_64& rng) {
  auto& model = state.model;
  const auto& mc = model.config();
  model.zero_grad();
  StepMetrics metrics;
  std::vector<double> nme_sum(static_cast<std::size_t>(mc.n_datasets), 0.0);
  std::vector<int> nme_count(static_cast<std::size_t>(mc.n_datasets), 0);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  model::Model<float>::Cache cache;
  for (const TrainSample* s : batch) {
    const auto idx = random_subset(s->uv.rows(), config.queries_per_sample, rng);
    const Points2 uv = rows(s->uv, idx);
    const Points2 gt = rows(s->landmarks, idx);
    Affine2D crop;
    if (mc.normalizer == model::Normalizer::detector_crop) crop = detector_crop(s->face_box, rng, config.detector_jitter);
    const auto out = model.forward(s->image, uv, s->dataset_index, &crop, model::Mode::train, &cache);

    const NllResult nll = gaussian_nll_grad(out.landmarks_full, out.confidence, gt);
    model::OutputGrad grad;
    grad.d_landmarks_full = nll.d_pred * (config.nll_weight * inv_batch);
    grad.d_confidence = nll.d_sigma * (config.nll_weight * inv_batch);
    double hinge = 0;
    grad.d_posed_points = geometry::Points3::Zero(out.posed_points.rows(), 3);
    if (mc.head == model::Head::landmarks_3d && out.posed_points.rows() > 0) {
      const double k = static_cast<double>(out.posed_points.rows());
      for (Eigen::Index i = 0; i < out.posed_points.rows(); ++i) {
        const double gap = std::max(0.0, geometry::kNearPlaneMm - out.posed_points(i, 2));
        hinge += gap * gap / k;
        grad.d_posed_points(i, 2) = -2.0 * gap / k * config.hinge_weight * inv_batch;
      }
    }
    metrics.loss += (config.nll_weight * nll.loss + config.hinge_weight * hinge) * inv_batch;
    model.backward(cache, grad);

    if (s->interocular > 0 && gt.rows() > 0) {
      nme_sum[static_cast<std::size_t>(s->dataset_index)] += sample_nme(out.landmarks_full, gt, s->interocular);
      ++nme_count[static_cast<std::size_t>(s->dataset_index)];
    }
  }
  double sq = 0;
  model.visit([&](const std::string&, nn::Tensor<float>& t) { sq += t.grad.template cast<double>().squaredNorm(); });
  metrics.grad_norm = std::sqrt(sq);
  if (!std::isfinite(metrics.loss) || !std::isfinite(metrics.grad_norm)) {
    std::ostringstream ids;
    for (std::size_t i = 0; i < batch.size(); ++i) ids << (i ? "," : "") << batch[i]->dataset_index << ":" << batch[i]->sample_id;
    throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(state.step) +
                                              "; batch (dataset:sample) = " + ids.str());
  }
  for (std::size_t d = 0; d < nme_sum.size(); ++d) {
    metrics.nme.push_back(nme_count[d] ? nme_sum[d] / nme_count[d] : std::numeric_limits<double>::quiet_NaN());
  }
  state.optimizer.step(model);
  return metrics;
}

double validation_nme(const model::Model<float>& model, const std::vector<TrainSample>& samples,
                      const TrainConfig& config, int max_queries) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  for (const auto& s : samples) {
    const auto idx = fixed_subset(s.uv.rows(), max_queries);
    auto rng = child_rng(config.seed, kValidationStream, static_cast<std::uint64_t>(s.dataset_index),
                         static_cast<std::uint64_t>(s.sample_id));
    const Affine2D crop = detector_crop(s.face_box, rng, config.detector_jitter);
    const auto out = model.forward(s.image, rows(s.uv, idx), s.dataset_index, &crop, model::Mode::train);
    total += sample_nme(out.landmarks_full, rows(s.landmarks, idx), s.interocular);
  }
  return total / static_cast<double>(samples.size());
}

namespace {

json state_json(const TrainState& st) {
  return {{"epoch", st.epoch},
          {"epoch_step", st.epoch_step},
          {"step", st.step},
          {"best_val_nme", std::isfinite(st.best_val_nme) ? json(st.best_val_nme) : json(nullptr)}};
}

void save_state(TrainState& st, const TrainConfig& config, const std::filesystem::path& path, double val_nme) {
  json extra = {{"train_state", state_json(st)}, {"train_config", to_json(config)}};
  if (std::isfinite(val_nme)) extra["val_nme"] = val_nme;
  model::save_checkpoint(st.model, path, extra);
  model::write_archive(path.string() + ".opt", st.optimizer.state_arrays());
}

}  // namespace

FitResult fit(const TrainConfig& config_in, const std::optional<std::filesystem::path>& resume) {
  TrainConfig config = config_in;
  config.model.n_datasets = static_cast<int>(config.shards.size());
  config.model.n_code = config.model.n_datasets;
  config.validate();

  std::vector<TrainSample> train;
  std::vector<TrainSample> val;
  for (std::size_t d = 0; d < config.shards.size(); ++d) {
    auto [t, v] = split_samples(load_samples(config.shards[d], static_cast<int>(d)), config.validation_fraction);
    std::move(t.begin(), t.end(), std::back_inserter(train));
    std::move(v.begin(), v.end(), std::back_inserter(val));
  }
  if (train.empty()) throw Error(ErrorCode::ConfigInvalid, "no training samples in the shards");

  TrainState st{model::Model<float>(config.model, model::canonical_mesh(config.model.mesh_resolution), config.seed),
                AdamW(config.lr, config.weight_decay, config.beta1, config.beta2, config.eps)};
  if (resume) {
    json manifest;
    st.model = model::load_checkpoint(*resume, &manifest);
    if (model::to_json(st.model.config()) != model::to_json(config.model)) {
      throw Error(ErrorCode::IncompatibleCheckpoint, "resume checkpoint was trained with a different model config");
    }
    const json& ts = manifest.at("extra").at("train_state");
    st.epoch = ts.at("epoch").get<int>();
    st.epoch_step = ts.at("epoch_step").get<int>();
    st.step = ts.at("step").get<long>();
    st.best_val_nme = ts.at("best_val_nme").is_null() ? std::numeric_limits<double>::infinity()
                                                      : ts.at("best_val_nme").get<double>();
    st.optimizer.load_state(model::read_archive(resume->string() + ".opt"), st.step);
  }

  std::filesystem::create_directories(config.out_dir);
  FitResult result;
  result.best = config.out_dir / "best.ckpt";
  result.last = config.out_dir / "last.ckpt";
  const auto log_path = config.out_dir / "metrics.jsonl";
  std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw Error(ErrorCode::Io, "cannot open " + log_path.string());

  if (!resume) {
    save_state(st, config, result.last, std::numeric_limits<double>::quiet_NaN());
    if (config.epochs == 0) save_state(st, config, result.best, std::numeric_limits<double>::quiet_NaN());
  }

  const int steps_per_epoch = static_cast<int>((train.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                                               static_cast<std::size_t>(config.batch_size));
  while (st.epoch < config.epochs) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = child_rng(config.seed, kShuffleStream, static_cast<std::uint64_t>(st.epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    while (st.epoch_step < steps_per_epoch) {
      if (config.max_steps >= 0 && st.step >= config.max_steps) {
        save_state(st, config, result.last, std::numeric_limits<double>::quiet_NaN());
        result.best_val_nme = st.best_val_nme;
        return result;
      }
      auto rng = child_rng(config.seed, kStepStream, static_cast<std::uint64_t>(st.epoch),
                           static_cast<std::uint64_t>(st.epoch_step));
      const std::size_t begin = static_cast<std::size_t>(st.epoch_step) * static_cast<std::size_t>(config.batch_size);
      const std::size_t end = std::min(train.size(), begin + static_cast<std::size_t>(config.batch_size));
      std::vector<TrainSample> augmented;
      augmented.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) augmented.push_back(augment(train[order[i]], rng, config.augment));
      std::vector<const TrainSample*> batch;
      for (const auto& s : augmented) batch.push_back(&s);

      const StepMetrics m = train_step(st, batch, config, rng);
      ++st.step;
      ++st.epoch_step;
      result.losses.push_back(m.loss);
      if (st.step % config.log_every == 0) {
        json nme = json::array();
        for (double v : m.nme) nme.push_back(std::isfinite(v) ? json(v) : json(nullptr));
        log << json{{"step", st.step}, {"epoch", st.epoch}, {"loss", m.loss}, {"grad_norm", m.grad_norm},
                    {"lr", config.lr}, {"nme_train", nme}, {"nme_val", nullptr}}.dump()
            << '\n';
        log.flush();
      }
      if (config.checkpoint_every > 0 && st.step % config.checkpoint_every == 0) {
        save_state(st, config, result.last, std::numeric_limits<double>::quiet_NaN());
      }
    }

    const double v = validation_nme(st.model, val, config, config.validation_queries);
    ++st.epoch;
    st.epoch_step = 0;
    const bool improved = std::isfinite(v) && v < st.best_val_nme;
    if (improved) st.best_val_nme = v;
    if (improved || !std::isfinite(v)) save_state(st, config, result.best, v);
    save_state(st, config, result.last, v);
    log << json{{"step", st.step}, {"epoch", st.epoch}, {"loss", result.losses.empty() ? json(nullptr) : json(result.losses.back())},
                {"grad_norm", nullptr}, {"lr", config.lr}, {"nme_val", std::isfinite(v) ? json(v) : json(nullptr)}}.dump()
        << '\n';
    log.flush();
  }
  result.best_val_nme = st.best_val_nme;
  if (!std::filesystem::exists(result.best)) save_state(st, config, result.best, std::numeric_limits<double>::quiet_NaN());
  return result;
}

}  // namespace lm3d::training
