#include "lm3d/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>

#include "lm3d/error.hpp"
#include "lm3d/raster.hpp"
#include "lm3d/synthgen.hpp"

namespace lm3d::model {

using geometry::Matrix23;

namespace {

constexpr double kClampedDepthMm = geometry::kNearPlaneMm + 1e-3;
const Eigen::Vector3d kRestTranslation(0, 0, 600);

Matrix23 identity_matrix() {
  Matrix23 m;
  m << 1, 0, 0, 0, 1, 0;
  return m;
}

geometry::TransformKind transform_kind(Normalizer n) {
  return n == Normalizer::stn_similarity ? geometry::TransformKind::similarity
                                         : geometry::TransformKind::affine;
}

template <class T>
Image matrix_image(const Mat<T>& m, int height, int width, float shift) {
  Image img(height, width, static_cast<int>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) img.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]) + shift;
  return img;
}

Normalizer normalizer_from_string(const std::string& s) {
  if (s == "detector_crop") return Normalizer::detector_crop;
  if (s == "stn_similarity") return Normalizer::stn_similarity;
  if (s == "stn_affine") return Normalizer::stn_affine;
  throw Error(ErrorCode::ConfigInvalid, "unknown normalizer " + s);
}

Head head_from_string(const std::string& s) {
  if (s == "direct_2d") return Head::direct_2d;
  if (s == "landmarks_3d") return Head::landmarks_3d;
  throw Error(ErrorCode::ConfigInvalid, "unknown head " + s);
}

}  // namespace

// --- config -------------------------------------------------------------------

std::string to_string(Normalizer n) {
  switch (n) {
    case Normalizer::detector_crop: return "detector_crop";
    case Normalizer::stn_similarity: return "stn_similarity";
    case Normalizer::stn_affine: return "stn_affine";
  }
  return "?";
}

std::string to_string(Head h) { return h == Head::direct_2d ? "direct_2d" : "landmarks_3d"; }

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); };
  if (stn_input < 8 || crop_size < 8) fail("stn_input and crop_size must be at least 8");
  if (stn_widths.empty() || encoder_widths.empty()) fail("conv stacks need at least one layer");
  for (int w : stn_widths) if (w <= 0) fail("bad stn width");
  for (int w : encoder_widths) if (w <= 0) fail("bad encoder width");
  if (stn_hidden <= 0 || feature_width <= 0 || mlp_width <= 0 || query_feature_width <= 0) fail("bad width");
  if (predictor_width <= 0 || predictor_depth < 1) fail("bad predictor shape");
  if (n_datasets < 1 || n_code < 1) fail("need at least one dataset and code dimension");
  if (mesh_resolution < 16) fail("mesh_resolution must be at least 16");
  if (!(translation_scale_mm > 0) || !(focal_range_mm > 0) || !(offset_range_mm > 0) || !(deform_range_uv > 0)) {
    fail("decode ranges must be positive");
  }
  if (focal_range_mm >= geometry::kFixedFocalMm - geometry::kMinFocalMm) fail("focal range reaches zero focal");
}

json to_json(const ModelConfig& c) {
  return {{"normalizer", to_string(c.normalizer)},
          {"head", to_string(c.head)},
          {"learn_focal", c.learn_focal},
          {"query_deformer", c.query_deformer},
          {"stn_input", c.stn_input},
          {"crop_size", c.crop_size},
          {"stn_widths", c.stn_widths},
          {"stn_hidden", c.stn_hidden},
          {"encoder_widths", c.encoder_widths},
          {"feature_width", c.feature_width},
          {"mlp_width", c.mlp_width},
          {"query_feature_width", c.query_feature_width},
          {"predictor_width", c.predictor_width},
          {"predictor_depth", c.predictor_depth},
          {"n_datasets", c.n_datasets},
          {"n_code", c.n_code},
          {"mesh_resolution", c.mesh_resolution},
          {"translation_scale_mm", c.translation_scale_mm},
          {"focal_range_mm", c.focal_range_mm},
          {"offset_range_mm", c.offset_range_mm},
          {"deform_range_uv", c.deform_range_uv}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "normalizer") c.normalizer = normalizer_from_string(it->get<std::string>());
      else if (k == "head") c.head = head_from_string(it->get<std::string>());
      else if (k == "learn_focal") c.learn_focal = it->get<bool>();
      else if (k == "query_deformer") c.query_deformer = it->get<bool>();
      else if (k == "stn_input") c.stn_input = it->get<int>();
      else if (k == "crop_size") c.crop_size = it->get<int>();
      else if (k == "stn_widths") c.stn_widths = it->get<std::vector<int>>();
      else if (k == "stn_hidden") c.stn_hidden = it->get<int>();
      else if (k == "encoder_widths") c.encoder_widths = it->get<std::vector<int>>();
      else if (k == "feature_width") c.feature_width = it->get<int>();
      else if (k == "mlp_width") c.mlp_width = it->get<int>();
      else if (k == "query_feature_width") c.query_feature_width = it->get<int>();
      else if (k == "predictor_width") c.predictor_width = it->get<int>();
      else if (k == "predictor_depth") c.predictor_depth = it->get<int>();
      else if (k == "n_datasets") c.n_datasets = it->get<int>();
      else if (k == "n_code") c.n_code = it->get<int>();
      else if (k == "mesh_resolution") c.mesh_resolution = it->get<int>();
      else if (k == "translation_scale_mm") c.translation_scale_mm = it->get<double>();
      else if (k == "focal_range_mm") c.focal_range_mm = it->get<double>();
      else if (k == "offset_range_mm") c.offset_range_mm = it->get<double>();
      else if (k == "deform_range_uv") c.deform_range_uv = it->get<double>();
      else throw Error(ErrorCode::ConfigInvalid, "unknown model field " + k);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"baseline_2d",      "stn_sim",        "stn_affine", "3d_fixed_focal",
                                              "3d_learned_focal", "query_deformer", "full"};
  return names;
}

ModelConfig variant_config(const std::string& name, ModelConfig c) {
  c.normalizer = Normalizer::detector_crop;
  c.head = Head::direct_2d;
  c.learn_focal = false;
  c.query_deformer = false;
  if (name == "baseline_2d") {
  } else if (name == "stn_sim") {
    c.normalizer = Normalizer::stn_similarity;
  } else if (name == "stn_affine") {
    c.normalizer = Normalizer::stn_affine;
  } else if (name == "3d_fixed_focal") {
    c.head = Head::landmarks_3d;
  } else if (name == "3d_learned_focal") {
    c.head = Head::landmarks_3d;
    c.learn_focal = true;
  } else if (name == "query_deformer") {
    c.query_deformer = true;
  } else if (name == "full") {
    c.normalizer = Normalizer::stn_affine;
    c.head = Head::landmarks_3d;
    c.learn_focal = true;
    c.query_deformer = true;
  } else {
    throw Error(ErrorCode::ConfigInvalid, "unknown variant " + name);
  }
  return c;
}

// --- resampling ---------------------------------------------------------------

template <class T>
Mat<T> image_matrix(const Image& image) {
  Mat<T> m(static_cast<Eigen::Index>(image.height) * image.width, image.channels);
  for (std::size_t i = 0; i < image.data.size(); ++i) m.data()[i] = static_cast<T>(image.data[i]);
  return m;
}

namespace {

struct Tap {
  int x0, y0;
  double fx, fy;
  double px, py;
};

Tap sample_tap(const Matrix23& a, int i, int j, int height, int width, int out_height, int out_width) {
  const double u = (2.0 * j + 1.0) / out_width - 1.0;
  const double v = (2.0 * i + 1.0) / out_height - 1.0;
  const double x = a(0, 0) * u + a(0, 1) * v + a(0, 2);
  const double y = a(1, 0) * u + a(1, 1) * v + a(1, 2);
  Tap t;
  t.px = to_pixel(x, width);
  t.py = to_pixel(y, height);
  t.x0 = static_cast<int>(std::floor(t.px));
  t.y0 = static_cast<int>(std::floor(t.py));
  t.fx = t.px - t.x0;
  t.fy = t.py - t.y0;
  return t;
}

}  // namespace

template <class T>
Mat<T> resample(const Mat<T>& image, int height, int width, const Matrix23& a, int out_height, int out_width) {
  const Eigen::Index c = image.cols();
  Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(out_height) * out_width, c);
  for (int i = 0; i < out_height; ++i) {
    for (int j = 0; j < out_width; ++j) {
      const Tap t = sample_tap(a, i, j, height, width, out_height, out_width);
      if (t.x0 < -1 || t.y0 < -1 || t.x0 >= width || t.y0 >= height) continue;
      T* dst = out.data() + (static_cast<Eigen::Index>(i) * out_width + j) * c;
      for (int dy = 0; dy < 2; ++dy) {
        const int yi = t.y0 + dy;
        if (yi < 0 || yi >= height) continue;
        for (int dx = 0; dx < 2; ++dx) {
          const int xi = t.x0 + dx;
          if (xi < 0 || xi >= width) continue;
          const T w = static_cast<T>((dx ? t.fx : 1 - t.fx) * (dy ? t.fy : 1 - t.fy));
          const T* src = image.data() + (static_cast<Eigen::Index>(yi) * width + xi) * c;
          for (Eigen::Index k = 0; k < c; ++k) dst[k] += w * src[k];
        }
      }
    }
  }
  return out;
}

template <class T>
ResampleGrad<T> resample_vjp(const Mat<T>& image, int height, int width, const Matrix23& a, int out_height,
                             int out_width, const Mat<T>& d_out, bool want_image) {
  const Eigen::Index c = image.cols();
  ResampleGrad<T> g;
  g.d_matrix.setZero();
  if (want_image) g.d_image = Mat<T>::Zero(image.rows(), c);
  for (int i = 0; i < out_height; ++i) {
    for (int j = 0; j < out_width; ++j) {
      const Tap t = sample_tap(a, i, j, height, width, out_height, out_width);
      if (t.x0 < -1 || t.y0 < -1 || t.x0 >= width || t.y0 >= height) continue;
      const T* gout = d_out.data() + (static_cast<Eigen::Index>(i) * out_width + j) * c;
      double d_px = 0;
      double d_py = 0;
      for (int dy = 0; dy < 2; ++dy) {
        const int yi = t.y0 + dy;
        if (yi < 0 || yi >= height) continue;
        for (int dx = 0; dx < 2; ++dx) {
          const int xi = t.x0 + dx;
          if (xi < 0 || xi >= width) continue;
          const Eigen::Index row = static_cast<Eigen::Index>(yi) * width + xi;
          const T* src = image.data() + row * c;
          double dot = 0;
          for (Eigen::Index k = 0; k < c; ++k) dot += static_cast<double>(gout[k]) * static_cast<double>(src[k]);
          // d/dpx of the bilinear weight, then d/dpy
          d_px += dot * (dx ? 1.0 : -1.0) * (dy ? t.fy : 1 - t.fy);
          d_py += dot * (dy ? 1.0 : -1.0) * (dx ? t.fx : 1 - t.fx);
          if (want_image) {
            const T w = static_cast<T>((dx ? t.fx : 1 - t.fx) * (dy ? t.fy : 1 - t.fy));
            T* dst = g.d_image.data() + row * c;
            for (Eigen::Index k = 0; k < c; ++k) dst[k] += w * gout[k];
          }
        }
      }
      const double u = (2.0 * j + 1.0) / out_width - 1.0;
      const double v = (2.0 * i + 1.0) / out_height - 1.0;
      const double gx = d_px * 0.5 * width;
      const double gy = d_py * 0.5 * height;
      g.d_matrix(0, 0) += gx * u;
      g.d_matrix(0, 1) += gx * v;
      g.d_matrix(0, 2) += gx;
      g.d_matrix(1, 0) += gy * u;
      g.d_matrix(1, 1) += gy * v;
      g.d_matrix(1, 2) += gy;
    }
  }
  return g;
}

Image resample(const Image& image, const Affine2D& a, int out_height, int out_width) {
  const Mat<float> out = resample(image_matrix<float>(image), image.height, image.width, a.matrix(), out_height, out_width);
  return matrix_image(out, out_height, out_width, 0.0f);
}

// --- model --------------------------------------------------------------------

template <class T>
Model<T>::Model(const ModelConfig& config, std::shared_ptr<const geometry::CanonicalMesh> mesh, std::uint64_t seed)
    : config_(config), mesh_(std::move(mesh)) {
  config_.validate();
  if (!mesh_) throw Error(ErrorCode::InvalidArgument, "model needs a canonical mesh");
  std::mt19937_64 rng(seed);
  const auto& c = config_;

  stn_ = nn::ConvEncoder<T>("stn", c.stn_input, 3, c.stn_widths, c.stn_hidden);
  stn_head_ = nn::Linear<T>("stn.head", c.stn_hidden, geometry::param_count(transform_kind(c.normalizer)));
  encoder_ = nn::ConvEncoder<T>("encoder", c.crop_size, 3, c.encoder_widths, c.feature_width);
  gamma_head_ = nn::Linear<T>("gamma", c.feature_width, c.gamma_width());
  deformer_ = nn::Mlp<T>("deformer", 2 + c.n_code, c.mlp_width, 2, 2);
  codes_.name = "codes";
  codes_.resize(c.n_datasets, c.n_code);
  pos_encoder_ = nn::Mlp<T>("pos_encoder", 3, c.mlp_width, 2, c.query_feature_width);
  predictor_in_ = nn::Linear<T>("predictor.0", c.feature_width + c.query_feature_width, c.predictor_width);
  predictor_tail_ = nn::Mlp<T>("predictor", c.predictor_width, c.predictor_width, c.predictor_depth - 1, 4, 1);

  stn_.init(rng);
  stn_head_.init(rng);
  stn_head_.weight.value.setZero();
  if (transform_kind(c.normalizer) == geometry::TransformKind::affine) {
    stn_head_.bias.value << 1, 0, 0, 0, 1, 0;
  }
  encoder_.init(rng);
  gamma_head_.init(rng);
  gamma_head_.weight.value.setZero();
  deformer_.init(rng);
  deformer_.last().weight.value.setZero();
  for (int d = 0; d < c.n_datasets; ++d) {
    if (d < c.n_code) codes_.value(d, d) = T(1);
  }
  pos_encoder_.init(rng);
  predictor_in_.init(rng);
  predictor_tail_.init(rng);
  predictor_tail_.last().weight.value.setZero();
}

template <class T>
void Model<T>::visit(const nn::ParamVisitor<T>& f) {
  if (config_.normalizer != Normalizer::detector_crop) {
    stn_.visit("stn", f);
    stn_head_.visit("stn", f);
  }
  encoder_.visit("encoder", f);
  if (config_.head == Head::landmarks_3d) gamma_head_.visit("gamma", f);
  if (config_.query_deformer) {
    deformer_.visit("deformer", f);
    f("codes", codes_);
  }
  pos_encoder_.visit("pos_encoder", f);
  predictor_in_.visit("predictor", f);
  predictor_tail_.visit("predictor", f);
}

template <class T>
void Model<T>::zero_grad() {
  visit([](const std::string&, nn::Tensor<T>& t) { t.grad.setZero(); });
}

template <class T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  visit([&](const std::string&, nn::Tensor<T>& t) { n += static_cast<std::size_t>(t.value.size()); });
  return n;
}

template <class T>
template <class U>
void Model<T>::copy_from(Model<U>& other) {
  std::vector<const Mat<U>*> src;
  other.visit([&](const std::string&, nn::Tensor<U>& t) { src.push_back(&t.value); });
  std::size_t k = 0;
  visit([&](const std::string&, nn::Tensor<T>& t) {
    if (k >= src.size() || src[k]->rows() != t.value.rows() || src[k]->cols() != t.value.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "models differ in shape");
    }
    t.value = src[k++]->template cast<T>();
  });
}

template <class T>
Affine2D Model<T>::stn_forward(const Image& image) const {
  if (config_.normalizer == Normalizer::detector_crop) return Affine2D();
  Cache c;
  c.image = image_matrix<T>(image);
  Mat<T> in = resample(c.image, image.height, image.width, identity_matrix(), config_.stn_input, config_.stn_input);
  in.array() -= T(0.5);
  const Mat<T> raw = stn_head_.forward(stn_.forward(in, nullptr));
  std::vector<double> p(static_cast<std::size_t>(raw.cols()));
  for (Eigen::Index i = 0; i < raw.cols(); ++i) p[static_cast<std::size_t>(i)] = static_cast<double>(raw(0, i));
  if (config_.normalizer == Normalizer::stn_similarity) p[0] = std::exp(p[0]);
  return geometry::make_affine(transform_kind(config_.normalizer), p);
}

template <class T>
std::pair<Eigen::VectorXd, geometry::PoseCamera> Model<T>::encode_image(const Image& crop) const {
  if (crop.height != config_.crop_size || crop.width != config_.crop_size) {
    throw Error(ErrorCode::ShapeMismatch, "crop has the wrong size");
  }
  Mat<T> x = image_matrix<T>(crop);
  x.array() -= T(0.5);
  const Mat<T> f = encoder_.forward(x, nullptr);
  geometry::PoseCamera pose;
  if (config_.head == Head::landmarks_3d) {
    const Mat<T> g = gamma_head_.forward(f);
    for (int k = 0; k < 6; ++k) pose.rot6d[static_cast<std::size_t>(k)] += static_cast<double>(g(0, k));
    pose.translation = kRestTranslation + config_.translation_scale_mm *
                                              Eigen::Vector3d(static_cast<double>(g(0, 6)), static_cast<double>(g(0, 7)),
                                                              static_cast<double>(g(0, 8)));
    if (config_.learn_focal) pose.focal_displacement = config_.focal_range_mm * std::tanh(static_cast<double>(g(0, 9)));
  }
  return {f.transpose().template cast<double>(), pose};
}

template <class T>
Points2 Model<T>::deform_query(const Points2& uv, int dataset) const {
  if (!config_.query_deformer) return uv;
  Mat<T> in(uv.rows(), 2 + config_.n_code);
  for (Eigen::Index k = 0; k < uv.rows(); ++k) {
    in(k, 0) = static_cast<T>(uv(k, 0));
    in(k, 1) = static_cast<T>(uv(k, 1));
    in.row(k).tail(config_.n_code) = codes_.value.row(dataset);
  }
  const Mat<T> raw = deformer_.forward(in, nullptr);
  Points2 out(uv.rows(), 2);
  for (Eigen::Index k = 0; k < uv.rows(); ++k) {
    for (int d = 0; d < 2; ++d) {
      out(k, d) = std::clamp(uv(k, d) + config_.deform_range_uv * std::tanh(static_cast<double>(raw(k, d))), 0.0, 1.0);
    }
  }
  return out;
}

template <class T>
PipelineOutput Model<T>::forward(const Image& image, const Points2& uv, int dataset, const Affine2D* crop, Mode mode,
                                 Cache* cache) const {
  const auto& cfg = config_;
  if (dataset < 0 || dataset >= cfg.n_datasets) throw Error(ErrorCode::InvalidArgument, "dataset index out of range");
  if (image.channels != 3) throw Error(ErrorCode::ShapeMismatch, "pipeline expects RGB input");
  Cache local;
  Cache& c = cache ? *cache : local;
  c.mode = mode;
  c.dataset = dataset;
  c.height = image.height;
  c.width = image.width;
  c.image = image_matrix<T>(image);
  PipelineOutput out;

  // normalization: theta maps the frame onto the crop
  if (cfg.normalizer == Normalizer::detector_crop) {
    if (!crop) throw Error(ErrorCode::InvalidArgument, "detector_crop model needs a crop transform");
    out.theta = *crop;
  } else {
    c.stn_input = resample(c.image, c.height, c.width, identity_matrix(), cfg.stn_input, cfg.stn_input);
    c.stn_input.array() -= T(0.5);
    c.stn_hidden = stn_.forward(c.stn_input, &c.stn);
    const Mat<T> raw = stn_head_.forward(c.stn_hidden);
    c.theta_params.assign(static_cast<std::size_t>(raw.cols()), 0.0);
    for (Eigen::Index i = 0; i < raw.cols(); ++i) c.theta_params[static_cast<std::size_t>(i)] = static_cast<double>(raw(0, i));
    std::vector<double> p = c.theta_params;
    if (cfg.normalizer == Normalizer::stn_similarity) p[0] = std::exp(p[0]);
    out.theta = geometry::make_affine(transform_kind(cfg.normalizer), p);
  }
  const Affine2D inverse = geometry::invert(out.theta);
  c.theta_matrix = out.theta.matrix();
  c.inverse_matrix = inverse.matrix();

  Mat<T> crop_px = resample(c.image, c.height, c.width, c.inverse_matrix, cfg.crop_size, cfg.crop_size);
  out.normalized_image = matrix_image(crop_px, cfg.crop_size, cfg.crop_size, 0.0f);
  crop_px.array() -= T(0.5);
  c.crop = std::move(crop_px);
  c.features = encoder_.forward(c.crop, &c.encoder);
  out.features = c.features.row(0).transpose().template cast<double>();

  c.gamma_raw.setZero();
  if (cfg.head == Head::landmarks_3d) {
    const Mat<T> g = gamma_head_.forward(c.features);
    for (int k = 0; k < 10; ++k) c.gamma_raw(k) = static_cast<double>(g(0, k));
    for (int k = 0; k < 6; ++k) out.gamma.rot6d[static_cast<std::size_t>(k)] += c.gamma_raw(k);
    out.gamma.translation = kRestTranslation + cfg.translation_scale_mm * c.gamma_raw.template segment<3>(6);
    if (cfg.learn_focal) out.gamma.focal_displacement = cfg.focal_range_mm * std::tanh(c.gamma_raw(9));
  }

  // queries
  const Eigen::Index k_count = uv.rows();
  c.uv = uv;
  if (cfg.query_deformer) {
    c.deformer_input.resize(k_count, 2 + cfg.n_code);
    for (Eigen::Index k = 0; k < k_count; ++k) {
      c.deformer_input(k, 0) = static_cast<T>(uv(k, 0));
      c.deformer_input(k, 1) = static_cast<T>(uv(k, 1));
      c.deformer_input.row(k).tail(cfg.n_code) = codes_.value.row(dataset);
    }
    const Mat<T> raw = deformer_.forward(c.deformer_input, &c.deformer);
    c.deform_raw = raw.template cast<double>();
    c.uv_unclamped = uv + cfg.deform_range_uv * c.deform_raw.array().tanh().matrix();
    c.uv_deformed = c.uv_unclamped.cwiseMax(0.0).cwiseMin(1.0);
  } else {
    c.uv_deformed = uv;
  }
  out.deformed_uv = c.uv_deformed;
  c.mean_points = geometry::sample_position_map(*mesh_, c.uv_deformed);
  c.pos_input = (c.mean_points / 100.0).template cast<T>();
  c.query_code = pos_encoder_.forward(c.pos_input, &c.pos);

  const Eigen::Index fw = cfg.feature_width;
  const auto& w_in = predictor_in_.weight.value;
  Mat<T> shared = c.features * w_in.leftCols(fw).transpose();
  shared += predictor_in_.bias.value;
  c.predictor_pre = c.query_code * w_in.rightCols(cfg.query_feature_width).transpose();
  c.predictor_pre.rowwise() += shared.row(0);
  Mat<T> act = c.predictor_pre;
  nn::silu_inplace(act);
  c.raw = predictor_tail_.forward(act, &c.predictor).template cast<double>();

  out.confidence.resize(k_count);
  for (Eigen::Index k = 0; k < k_count; ++k) out.confidence(k) = nn::softplus(c.raw(k, 3)) + 1e-4;

  if (cfg.head == Head::landmarks_3d) {
    c.rotation = geometry::rot6d_to_matrix(out.gamma.rot6d);
    c.focal = out.gamma.effective_focal();
    c.canonical = c.mean_points + cfg.offset_range_mm * c.raw.template leftCols<3>().array().tanh().matrix();
    c.posed = c.canonical * c.rotation.transpose();
    c.posed.rowwise() += out.gamma.translation.transpose();
    c.projected_from = c.posed;
    if (mode == Mode::train) {
      c.projected_from.col(2) = c.projected_from.col(2).cwiseMax(kClampedDepthMm);
    }
    c.landmarks_norm = geometry::project(c.projected_from, c.focal);
  } else {
    c.focal = geometry::kFixedFocalMm;
    c.canonical = c.mean_points;
    c.posed = c.mean_points;
    c.posed.rowwise() += kRestTranslation.transpose();
    c.projected_from = c.posed;
    c.landmarks_norm = geometry::project(c.posed, c.focal) + c.raw.template leftCols<2>();
  }
  out.canonical_points = c.canonical;
  out.posed_points = c.posed;
  out.landmarks_norm = c.landmarks_norm;
  out.landmarks_full = geometry::apply_points(inverse, out.landmarks_norm);
  return out;
}

template <class T>
void Model<T>::backward(const Cache& c, const OutputGrad& grad) {
  const auto& cfg = config_;
  const Eigen::Index k_count = c.uv.rows();
  if (grad.d_landmarks_full.rows() != k_count || grad.d_confidence.size() != k_count) {
    throw Error(ErrorCode::ShapeMismatch, "gradient does not match the forward pass");
  }

  // restoration l = A(l'), A = inverse(theta)
  const auto restore = geometry::apply_points_vjp(c.inverse_matrix, c.landmarks_norm, grad.d_landmarks_full);
  Matrix23 d_inverse = restore.d_matrix;
  const Points2& d_norm = restore.d_points;

  Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor> d_raw =
      Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>::Zero(k_count, 4);
  Points3 d_mean = Points3::Zero(k_count, 3);
  Eigen::Matrix<double, 10, 1> d_gamma = Eigen::Matrix<double, 10, 1>::Zero();

  if (cfg.head == Head::landmarks_3d) {
    const auto proj = geometry::project_vjp(c.projected_from, c.focal, d_norm);
    Points3 d_posed = proj.d_points;
    for (Eigen::Index k = 0; k < k_count; ++k) {
      if (c.projected_from(k, 2) != c.posed(k, 2)) d_posed(k, 2) = 0;
    }
    if (grad.d_posed_points.rows() == k_count) d_posed += grad.d_posed_points;
    const Points3 d_canonical = d_posed * c.rotation;
    const Eigen::Matrix3d d_rotation = d_posed.transpose() * c.canonical;
    const Eigen::Vector3d d_translation = d_posed.colwise().sum().transpose();
    geometry::Rot6d r6{1, 0, 0, 0, 1, 0};
    for (int k = 0; k < 6; ++k) r6[static_cast<std::size_t>(k)] += c.gamma_raw(k);
    const geometry::Rot6d d_r6 = geometry::rot6d_vjp(r6, d_rotation);
    for (int k = 0; k < 6; ++k) d_gamma(k) = d_r6[static_cast<std::size_t>(k)];
    d_gamma.template segment<3>(6) = cfg.translation_scale_mm * d_translation;
    if (cfg.learn_focal) {
      const double t = std::tanh(c.gamma_raw(9));
      d_gamma(9) = proj.d_focal * cfg.focal_range_mm * (1 - t * t);
    }
    d_mean += d_canonical;
    for (Eigen::Index k = 0; k < k_count; ++k) {
      for (int d = 0; d < 3; ++d) {
        const double t = std::tanh(c.raw(k, d));
        d_raw(k, d) = d_canonical(k, d) * cfg.offset_range_mm * (1 - t * t);
      }
    }
  } else {
    d_raw.template leftCols<2>() = d_norm;
    Points3 d_posed = geometry::project_vjp(c.posed, c.focal, d_norm).d_points;
    if (grad.d_posed_points.rows() == k_count) d_posed += grad.d_posed_points;
    d_mean += d_posed;
  }
  for (Eigen::Index k = 0; k < k_count; ++k) d_raw(k, 3) = grad.d_confidence(k) * nn::sigmoid(c.raw(k, 3));

  // predictor
  const Mat<T> d_act = predictor_tail_.backward(c.predictor, d_raw.template cast<T>());
  const Mat<T> d_pre = nn::silu_backward(c.predictor_pre, d_act);
  const Eigen::Index fw = cfg.feature_width;
  const Eigen::Index qw = cfg.query_feature_width;
  const nn::RowVec<T> d_pre_sum = d_pre.colwise().sum();
  auto& w_in = predictor_in_.weight;
  w_in.grad.leftCols(fw).noalias() += d_pre_sum.transpose() * c.features;
  w_in.grad.rightCols(qw).noalias() += d_pre.transpose() * c.query_code;
  predictor_in_.bias.grad.row(0) += d_pre_sum;
  Mat<T> d_features = d_pre_sum * w_in.value.leftCols(fw);
  const Mat<T> d_query = d_pre * w_in.value.rightCols(qw);

  // positional encoder and position map
  const Mat<T> d_pos_input = pos_encoder_.backward(c.pos, d_query);
  d_mean += d_pos_input.template cast<double>() / 100.0;
  if (cfg.query_deformer) {
    Points2 d_uv = geometry::sample_position_map_vjp(*mesh_, c.uv_deformed, d_mean);
    Mat<T> d_def_raw(k_count, 2);
    for (Eigen::Index k = 0; k < k_count; ++k) {
      for (int d = 0; d < 2; ++d) {
        const double clamped = c.uv_unclamped(k, d) < 0.0 || c.uv_unclamped(k, d) > 1.0;
        const double t = std::tanh(c.deform_raw(k, d));
        d_def_raw(k, d) = static_cast<T>(clamped ? 0.0 : d_uv(k, d) * cfg.deform_range_uv * (1 - t * t));
      }
    }
    const Mat<T> d_in = deformer_.backward(c.deformer, d_def_raw);
    codes_.grad.row(c.dataset) += d_in.rightCols(cfg.n_code).colwise().sum();
  }

  // pose/camera head
  if (cfg.head == Head::landmarks_3d) {
    const Mat<T> d_g = d_gamma.transpose().template cast<T>();
    d_features += gamma_head_.backward(c.features, d_g);
  }

  // encoder, then the warp
  const bool stn = cfg.normalizer != Normalizer::detector_crop;
  const Mat<T> d_crop = encoder_.backward(c.encoder, d_features, stn);
  if (!stn) return;
  const auto rs = resample_vjp(c.image, c.height, c.width, c.inverse_matrix, cfg.crop_size, cfg.crop_size, d_crop, false);
  d_inverse += rs.d_matrix;
  const Matrix23 d_theta_matrix = geometry::invert_matrix_vjp(c.theta_matrix, d_inverse);
  std::vector<double> p = c.theta_params;
  if (cfg.normalizer == Normalizer::stn_similarity) p[0] = std::exp(p[0]);
  std::vector<double> d_p = geometry::decode_matrix_vjp(transform_kind(cfg.normalizer), p, d_theta_matrix);
  if (cfg.normalizer == Normalizer::stn_similarity) d_p[0] *= p[0];
  Mat<T> d_head(1, static_cast<Eigen::Index>(d_p.size()));
  for (std::size_t i = 0; i < d_p.size(); ++i) d_head(0, static_cast<Eigen::Index>(i)) = static_cast<T>(d_p[i]);
  const Mat<T> d_hidden = stn_head_.backward(c.stn_hidden, d_head);
  stn_.backward(c.stn, d_hidden, false);
}

template class Model<float>;
template class Model<double>;
template void Model<double>::copy_from<float>(Model<float>&);
template void Model<float>::copy_from<double>(Model<double>&);
template void Model<float>::copy_from<float>(Model<float>&);
template Mat<float> image_matrix<float>(const Image&);
template Mat<double> image_matrix<double>(const Image&);
template Mat<float> resample<float>(const Mat<float>&, int, int, const Matrix23&, int, int);
template Mat<double> resample<double>(const Mat<double>&, int, int, const Matrix23&, int, int);
template ResampleGrad<float> resample_vjp<float>(const Mat<float>&, int, int, const Matrix23&, int, int,
                                                 const Mat<float>&, bool);
template ResampleGrad<double> resample_vjp<double>(const Mat<double>&, int, int, const Matrix23&, int, int,
                                                   const Mat<double>&, bool);

// --- dense mesh and visibility ------------------------------------------------

PipelineOutput predict_dense_mesh(const Model<float>& model, const Image& image, int dataset, const Affine2D* crop) {
  return model.forward(image, model.mesh().uv, dataset, crop, Mode::eval);
}

std::vector<bool> predict_visibility(const Model<float>& model, const Image& image, const Points2& uv, int dataset,
                                     const Affine2D* crop, int render_size) {
  const PipelineOutput dense = predict_dense_mesh(model, image, dataset, crop);
  const auto& mesh = model.mesh();
  geometry::PoseCamera camera;
  camera.translation.setZero();
  camera.focal_displacement = dense.gamma.focal_displacement;
  raster::RenderOptions options;
  options.screen = geometry::invert(dense.theta);
  options.lit = false;
  std::vector<bool> visible(static_cast<std::size_t>(uv.rows()), false);
  raster::RenderOutput render;
  try {
    render = raster::rasterize(dense.posed_points, mesh.triangles, mesh.uv, camera, render_size, render_size, options);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::EmptyRender) return visible;
    throw;
  }
  const geometry::UvLocator locator(mesh);
  const Points3 normals = geometry::vertex_normals(dense.posed_points, mesh.triangles);
  Points3 pts(uv.rows(), 3);
  Points3 nrm(uv.rows(), 3);
  for (Eigen::Index k = 0; k < uv.rows(); ++k) {
    const double u = std::clamp(uv(k, 0), 0.0, 1.0);
    const double v = std::clamp(uv(k, 1), 0.0, 1.0);
    const auto p = geometry::interpolate_on_chart(locator, mesh.triangles, dense.posed_points, u, v);
    const auto n = geometry::interpolate_on_chart(locator, mesh.triangles, normals, u, v);
    if (!p || !n) throw Error(ErrorCode::InvalidArgument, "query uv is off the chart");
    pts.row(k) = p->transpose();
    nrm.row(k) = n->normalized().transpose();
  }
  return raster::estimate_visibility(pts, nrm, render, camera);
}

raster::TextureMap predict_texture(const Model<float>& model, const Image& image, int dataset, const Affine2D* crop,
                                   int texture_size) {
  const PipelineOutput dense = predict_dense_mesh(model, image, dataset, crop);
  const auto& mesh = model.mesh();
  geometry::PoseCamera camera;
  camera.translation.setZero();
  camera.focal_displacement = dense.gamma.focal_displacement;
  raster::RenderOptions options;
  options.screen = geometry::invert(dense.theta);
  options.lit = false;
  const raster::RenderOutput render =
      raster::rasterize(dense.posed_points, mesh.triangles, mesh.uv, camera, image.height, image.width, options);
  return raster::unwrap_texture(image, dense.posed_points, mesh.triangles, mesh.uv, camera, render, texture_size,
                                texture_size);
}

// --- checkpoints --------------------------------------------------------------

namespace {

constexpr char kArchiveMagic[8] = {'L', 'M', '3', 'D', 'A', 'R', 'R', '1'};

template <class V>
void put(std::string& buf, V v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(V) > buf.size()) throw Error(ErrorCode::IncompatibleCheckpoint, "archive is truncated");
  V v;
  std::memcpy(&v, buf.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  std::string buf(kArchiveMagic, sizeof(kArchiveMagic));
  put<std::uint64_t>(buf, arrays.size());
  for (const auto& a : arrays) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(a.name.size()));
    buf += a.name;
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(a.value.rows()));
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(a.value.cols()));
    buf.append(reinterpret_cast<const char*>(a.value.data()), sizeof(float) * static_cast<std::size_t>(a.value.size()));
  }
  write_file_atomic(path, buf);
}

std::vector<NamedArray> read_archive(const std::filesystem::path& path) {
  std::string buf;
  try {
    buf = read_text_file(path);
  } catch (const Error&) {
    throw Error(ErrorCode::IncompatibleCheckpoint, "cannot read archive " + path.string());
  }
  if (buf.size() < sizeof(kArchiveMagic) || std::memcmp(buf.data(), kArchiveMagic, sizeof(kArchiveMagic)) != 0) {
    throw Error(ErrorCode::IncompatibleCheckpoint, "not an lm3d archive: " + path.string());
  }
  std::size_t pos = sizeof(kArchiveMagic);
  const auto count = take<std::uint64_t>(buf, pos);
  std::vector<NamedArray> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto len = take<std::uint32_t>(buf, pos);
    if (pos + len > buf.size()) throw Error(ErrorCode::IncompatibleCheckpoint, "archive is truncated");
    a.name = buf.substr(pos, len);
    pos += len;
    const auto rows = take<std::uint64_t>(buf, pos);
    const auto cols = take<std::uint64_t>(buf, pos);
    const std::size_t bytes = sizeof(float) * rows * cols;
    if (pos + bytes > buf.size()) throw Error(ErrorCode::IncompatibleCheckpoint, "archive is truncated");
    a.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::memcpy(a.value.data(), buf.data() + pos, bytes);
    pos += bytes;
    out.push_back(std::move(a));
  }
  return out;
}

std::shared_ptr<const geometry::CanonicalMesh> canonical_mesh(int resolution) {
  static std::mutex mutex;
  static std::map<int, std::shared_ptr<const geometry::CanonicalMesh>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[resolution];
  if (!slot) slot = std::make_shared<geometry::CanonicalMesh>(synthgen::make_canonical_mesh(resolution));
  return slot;
}

void save_checkpoint(Model<float>& model, const std::filesystem::path& path, const json& extra) {
  std::vector<NamedArray> arrays;
  json shapes = json::array();
  model.visit([&](const std::string& group, nn::Tensor<float>& t) {
    arrays.push_back({t.name, t.value});
    shapes.push_back({{"name", t.name}, {"group", group}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
  });
  write_archive(path, arrays);
  json manifest = {{"format", "lm3d-checkpoint"},
                   {"version", 1},
                   {"config", to_json(model.config())},
                   {"arrays", shapes},
                   {"n_code", model.config().n_code},
                   {"f_fixed", geometry::kFixedFocalMm},
                   {"sensor_half_width", geometry::kSensorHalfWidthMm},
                   {"position_map_sha1", geometry::position_map_checksum(model.mesh().position_map)},
                   {"sha1", file_sha1(path)},
                   {"extra", extra}};
  write_file_atomic(path.string() + ".json", manifest.dump(2) + "\n");
}

Model<float> load_checkpoint(const std::filesystem::path& path, json* manifest_out) {
  const auto incompatible = [&](const std::string& what) {
    throw Error(ErrorCode::IncompatibleCheckpoint, path.string() + ": " + what);
  };
  json manifest;
  try {
    manifest = read_json_file(path.string() + ".json");
  } catch (const Error& e) {
    incompatible(std::string("manifest unreadable (") + e.what() + ")");
  }
  if (manifest.value("format", "") != "lm3d-checkpoint" || manifest.value("version", 0) != 1) incompatible("unknown format");
  if (manifest.value("f_fixed", 0.0) != geometry::kFixedFocalMm ||
      manifest.value("sensor_half_width", 0.0) != geometry::kSensorHalfWidthMm) {
    incompatible("camera constants differ");
  }
  ModelConfig config;
  try {
    config = model_config_from_json(manifest.at("config"));
  } catch (const std::exception& e) {
    incompatible(std::string("bad config: ") + e.what());
  }
  if (manifest.value("n_code", -1) != config.n_code) incompatible("n_code disagrees with config");
  if (!std::filesystem::exists(path) || file_sha1(path) != manifest.value("sha1", "")) incompatible("content hash mismatch");

  Model<float> model(config, canonical_mesh(config.mesh_resolution), 0);
  if (geometry::position_map_checksum(model.mesh().position_map) != manifest.value("position_map_sha1", "")) {
    incompatible("canonical mesh differs");
  }
  const auto arrays = read_archive(path);
  const auto& shapes = manifest.at("arrays");
  std::size_t k = 0;
  model.visit([&](const std::string&, nn::Tensor<float>& t) {
    if (k >= arrays.size() || k >= shapes.size()) incompatible("too few arrays");
    const auto& a = arrays[k];
    const auto& s = shapes[k];
    if (a.name != t.name || s.at("name").get<std::string>() != t.name) incompatible("array order differs at " + t.name);
    if (a.value.rows() != t.value.rows() || a.value.cols() != t.value.cols() ||
        s.at("rows").get<Eigen::Index>() != t.value.rows() || s.at("cols").get<Eigen::Index>() != t.value.cols()) {
      incompatible("arity mismatch for " + t.name);
    }
    t.value = a.value;
    ++k;
  });
  if (k != arrays.size() || k != shapes.size()) incompatible("unexpected extra arrays");
  if (manifest_out) *manifest_out = manifest;
  return model;
}

}  // namespace lm3d::model
