#pragma once

// Networks and their composition: spatial transformer, resampler, image
// encoder with pose/camera head, query deformer, positional encoder and the
// landmark predictor. Model<float> trains; Model<double> exists for exact
// gradient checks.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lm3d/geometry.hpp"
#include "lm3d/image.hpp"
#include "lm3d/mesh.hpp"
#include "lm3d/nn.hpp"
#include "lm3d/raster.hpp"
#include "lm3d/util.hpp"

namespace lm3d::model {

using geometry::Affine2D;
using geometry::Points2;
using geometry::Points3;
template <class T>
using Mat = nn::Mat<T>;

enum class Normalizer { detector_crop, stn_similarity, stn_affine };
enum class Head { direct_2d, landmarks_3d };
enum class Mode { train, eval };

struct ModelConfig {
  Normalizer normalizer = Normalizer::stn_affine;
  Head head = Head::landmarks_3d;
  bool learn_focal = true;
  bool query_deformer = true;

  int stn_input = 48;  // the STN sees the frame at this side
  int crop_size = 64;  // side of the normalized image fed to the encoder
  std::vector<int> stn_widths{8, 16, 32, 32};
  int stn_hidden = 64;
  std::vector<int> encoder_widths{32, 64, 128, 128};
  int feature_width = 256;
  int mlp_width = 64;  // deformer and positional encoder
  int query_feature_width = 64;
  int predictor_width = 512;
  int predictor_depth = 4;
  int n_datasets = 2;
  int n_code = 2;
  int mesh_resolution = 64;
  double translation_scale_mm = 100;
  double focal_range_mm = 30;
  double offset_range_mm = 40;
  double deform_range_uv = 0.1;

  /// Throws ConfigInvalid.
  void validate() const;
  int gamma_width() const { return 10; }
};

json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);

/// Ablation variants: baseline_2d, stn_sim, stn_affine, 3d_fixed_focal,
/// 3d_learned_focal, query_deformer, full. Throws ConfigInvalid.
ModelConfig variant_config(const std::string& name, ModelConfig base = {});
const std::vector<std::string>& variant_names();

std::string to_string(Normalizer n);
std::string to_string(Head h);

struct PipelineOutput {
  Affine2D theta;  // frame -> normalized crop
  Image normalized_image;
  Eigen::VectorXd features;
  geometry::PoseCamera gamma;
  Points2 deformed_uv;
  Points3 canonical_points;
  Points3 posed_points;
  Points2 landmarks_norm;
  Points2 landmarks_full;
  Eigen::VectorXd confidence;
  std::optional<std::vector<bool>> visibility;
};

/// Upstream gradients of a scalar loss with respect to pipeline outputs.
struct OutputGrad {
  Points2 d_landmarks_full;
  Eigen::VectorXd d_confidence;
  Points3 d_posed_points;  // optional (empty means zero)
};

/// Bilinear resampling: output pixel at normalized p reads the input at
/// a(p); zero outside. Channels are preserved.
Image resample(const Image& image, const Affine2D& a, int out_height, int out_width);

template <class T>
Mat<T> resample(const Mat<T>& image, int height, int width, const geometry::Matrix23& a, int out_height,
                int out_width);

template <class T>
struct ResampleGrad {
  geometry::Matrix23 d_matrix;
  Mat<T> d_image;
};
template <class T>
ResampleGrad<T> resample_vjp(const Mat<T>& image, int height, int width, const geometry::Matrix23& a,
                             int out_height, int out_width, const Mat<T>& d_out, bool want_image);

/// Image (any size) as an (H*W) x 3 matrix.
template <class T>
Mat<T> image_matrix(const Image& image);

template <class T>
class Model {
 public:
  struct Cache;

  Model(const ModelConfig& config, std::shared_ptr<const geometry::CanonicalMesh> mesh, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const geometry::CanonicalMesh& mesh() const noexcept { return *mesh_; }
  std::shared_ptr<const geometry::CanonicalMesh> mesh_ptr() const noexcept { return mesh_; }

  /// Every parameter tensor in a fixed order. Groups: stn, encoder, gamma,
  /// deformer, codes, pos_encoder, predictor. Unused groups are absent.
  void visit(const nn::ParamVisitor<T>& f);
  void zero_grad();
  std::size_t parameter_count();

  /// Frame -> crop transform predicted by the STN (identity at init).
  Affine2D stn_forward(const Image& image) const;
  /// Features and decoded pose/camera of a crop_size x crop_size crop.
  std::pair<Eigen::VectorXd, geometry::PoseCamera> encode_image(const Image& crop) const;
  /// uv' = clamp(uv + d(uv, code), 0, 1).
  Points2 deform_query(const Points2& uv, int dataset) const;

  /// Full pipeline. `crop` supplies theta for the detector_crop normalizer
  /// and is ignored otherwise. In eval mode a point at or behind the near
  /// plane throws BehindCamera; in train mode depth is clamped for the
  /// projection (the loss adds a hinge). Fills `cache` for backward.
  PipelineOutput forward(const Image& image, const Points2& uv, int dataset, const Affine2D* crop, Mode mode,
                         Cache* cache = nullptr) const;

  /// Accumulates parameter gradients for one forward pass.
  void backward(const Cache& cache, const OutputGrad& grad);

  /// Copies parameter values from another precision.
  template <class U>
  void copy_from(Model<U>& other);

 private:
  template <class U>
  friend class Model;

  ModelConfig config_;
  std::shared_ptr<const geometry::CanonicalMesh> mesh_;
  nn::ConvEncoder<T> stn_;
  nn::Linear<T> stn_head_;
  nn::ConvEncoder<T> encoder_;
  nn::Linear<T> gamma_head_;
  nn::Mlp<T> deformer_;
  nn::Tensor<T> codes_;
  nn::Mlp<T> pos_encoder_;
  nn::Linear<T> predictor_in_;  // split input: features then query code
  nn::Mlp<T> predictor_tail_;
};

template <class T>
struct Model<T>::Cache {
  Mode mode = Mode::eval;
  int dataset = 0;
  int height = 0, width = 0;
  Mat<T> image;
  Mat<T> stn_input;
  typename nn::ConvEncoder<T>::Cache stn;
  Mat<T> stn_hidden;
  std::vector<double> theta_params;
  geometry::Matrix23 theta_matrix;
  geometry::Matrix23 inverse_matrix;
  Mat<T> crop;
  typename nn::ConvEncoder<T>::Cache encoder;
  Mat<T> features;
  Eigen::Matrix<double, 10, 1> gamma_raw;
  Points2 uv;
  Mat<T> deformer_input;
  typename nn::Mlp<T>::Cache deformer;
  Points2 deform_raw;
  Points2 uv_unclamped;
  Points2 uv_deformed;
  Points3 mean_points;
  Mat<T> pos_input;
  typename nn::Mlp<T>::Cache pos;
  Mat<T> query_code;
  Mat<T> predictor_pre;
  typename nn::Mlp<T>::Cache predictor;
  Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor> raw;
  Points3 canonical;
  Points3 posed;
  Points3 projected_from;  // posed points after the depth clamp
  double focal = geometry::kFixedFocalMm;
  Eigen::Matrix3d rotation;
  Points2 landmarks_norm;
};

/// Visibility of query uvs through a z-buffer of the predicted dense mesh
/// (every canonical vertex queried), rendered into the input frame. Query
/// points are read off the predicted mesh so they agree with its surface.
std::vector<bool> predict_visibility(const Model<float>& model, const Image& image, const Points2& uv, int dataset,
                                     const Affine2D* crop, int render_size = 192);

/// Predicted dense mesh: posed vertices for every canonical vertex.
PipelineOutput predict_dense_mesh(const Model<float>& model, const Image& image, int dataset,
                                  const Affine2D* crop);

/// Image colors unwrapped onto the UV chart through the predicted dense mesh
/// (rendered at the image resolution).
raster::TextureMap predict_texture(const Model<float>& model, const Image& image, int dataset, const Affine2D* crop,
                                   int texture_size = 128);

// --- checkpoints --------------------------------------------------------------

struct NamedArray {
  std::string name;
  Mat<float> value;
};

/// Binary archive: magic, count, then (name, rows, cols, float32 data).
void write_archive(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_archive(const std::filesystem::path& path);

/// Writes <path> (parameters) and <path>.json (manifest with config,
/// arities, camera constants, content hash and `extra`). Atomic.
void save_checkpoint(Model<float>& model, const std::filesystem::path& path, const json& extra = json::object());

/// Throws IncompatibleCheckpoint when arities, constants or the hash
/// disagree with the manifest.
Model<float> load_checkpoint(const std::filesystem::path& path, json* manifest = nullptr);

/// Canonical mesh shared by all models of a given resolution.
std::shared_ptr<const geometry::CanonicalMesh> canonical_mesh(int resolution);

}  // namespace lm3d::model
