#pragma once

// Minimal dense layers with explicit forward caches and backward passes.
// Feature maps are (H*W) x C row-major matrices (HWC order), so a flattened
// map is just its row-major storage.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace lm3d::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
struct Tensor {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  void resize(Eigen::Index rows, Eigen::Index cols) {
    value = Mat<T>::Zero(rows, cols);
    grad = Mat<T>::Zero(rows, cols);
  }
};

/// Visitor over (group, tensor) pairs; group names the sub-network.
template <class T>
using ParamVisitor = std::function<void(const std::string& group, Tensor<T>& tensor)>;

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
void silu_inplace(Mat<T>& x) {
  x = x.unaryExpr([](T v) { return v * sigmoid(v); });
}

/// Gradient of silu at pre-activation z, multiplied into dy.
template <class T>
Mat<T> silu_backward(const Mat<T>& z, const Mat<T>& dy) {
  return dy.binaryExpr(z, [](T g, T v) {
    const T s = sigmoid(v);
    return g * s * (T(1) + v * (T(1) - s));
  });
}

template <class T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <class T>
struct Linear {
  Tensor<T> weight;  // out x in
  Tensor<T> bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, int in, int out) {
    weight.name = name + ".weight";
    bias.name = name + ".bias";
    weight.resize(out, in);
    bias.resize(1, out);
  }

  int in() const { return static_cast<int>(weight.value.cols()); }
  int out() const { return static_cast<int>(weight.value.rows()); }

  /// He-uniform weights, zero bias.
  void init(std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / in());
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<T>(u(rng));
    bias.value.setZero();
  }

  Mat<T> forward(const Mat<T>& x) const {
    Mat<T> y = x * weight.value.transpose();
    y.rowwise() += bias.value.row(0);
    return y;
  }

  /// Accumulates parameter gradients; returns d input.
  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy) {
    weight.grad.noalias() += dy.transpose() * x;
    bias.grad.row(0) += dy.colwise().sum();
    return dy * weight.value;
  }

  void visit(const std::string& group, const ParamVisitor<T>& f) {
    f(group, weight);
    f(group, bias);
  }
};

/// Perceptron with silu between layers and a linear output.
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;

  struct Cache {
    std::vector<Mat<T>> inputs;  // input of each layer
    std::vector<Mat<T>> pre;     // pre-activation of each hidden layer
  };

  Mlp() = default;
  /// Layer names continue from first_index (name.<first_index>, ...).
  Mlp(const std::string& name, int in, int hidden, int depth, int out, int first_index = 0) {
    int width = in;
    for (int d = 0; d < depth; ++d) {
      layers.emplace_back(name + "." + std::to_string(first_index + d), width, hidden);
      width = hidden;
    }
    layers.emplace_back(name + "." + std::to_string(first_index + depth), width, out);
  }

  void init(std::mt19937_64& rng) {
    for (auto& l : layers) l.init(rng);
  }

  Linear<T>& last() { return layers.back(); }

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    Mat<T> h = x;
    if (cache) {
      cache->inputs.clear();
      cache->pre.clear();
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (cache) cache->inputs.push_back(h);
      Mat<T> z = layers[i].forward(h);
      if (i + 1 == layers.size()) return z;
      if (cache) cache->pre.push_back(z);
      silu_inplace(z);
      h = std::move(z);
    }
    return h;
  }

  Mat<T> backward(const Cache& cache, const Mat<T>& dy) {
    Mat<T> g = dy;
    for (std::size_t i = layers.size(); i-- > 0;) {
      if (i + 1 < layers.size()) g = silu_backward(cache.pre[i], g);
      g = layers[i].backward(cache.inputs[i], g);
    }
    return g;
  }

  void visit(const std::string& group, const ParamVisitor<T>& f) {
    for (auto& l : layers) l.visit(group, f);
  }
};

/// 3x3 convolution, stride 2, zero padding 1.
template <class T>
struct Conv3x3s2 {
  Tensor<T> weight;  // out x (9 * in), columns ordered (ky, kx, c)
  Tensor<T> bias;
  int in_channels = 0;

  Conv3x3s2() = default;
  Conv3x3s2(const std::string& name, int in, int out) : in_channels(in) {
    weight.name = name + ".weight";
    bias.name = name + ".bias";
    weight.resize(out, 9 * in);
    bias.resize(1, out);
  }

  int out_channels() const { return static_cast<int>(weight.value.rows()); }
  static int out_size(int n) { return (n + 1) / 2; }

  void init(std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / (9.0 * in_channels));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<T>(u(rng));
    bias.value.setZero();
  }

  Mat<T> im2col(const Mat<T>& x, int h, int w) const {
    const int ho = out_size(h);
    const int wo = out_size(w);
    const int c = in_channels;
    Mat<T> cols = Mat<T>::Zero(static_cast<Eigen::Index>(ho) * wo, 9 * c);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        T* row = cols.data() + (static_cast<Eigen::Index>(oy) * wo + ox) * 9 * c;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = 2 * oy + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = 2 * ox + kx - 1;
            if (ix < 0 || ix >= w) continue;
            const T* src = x.data() + (static_cast<Eigen::Index>(iy) * w + ix) * c;
            std::copy(src, src + c, row + (ky * 3 + kx) * c);
          }
        }
      }
    }
    return cols;
  }

  Mat<T> col2im(const Mat<T>& dcols, int h, int w) const {
    const int ho = out_size(h);
    const int wo = out_size(w);
    const int c = in_channels;
    Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(h) * w, c);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const T* row = dcols.data() + (static_cast<Eigen::Index>(oy) * wo + ox) * 9 * c;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = 2 * oy + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = 2 * ox + kx - 1;
            if (ix < 0 || ix >= w) continue;
            T* dst = dx.data() + (static_cast<Eigen::Index>(iy) * w + ix) * c;
            const T* src = row + (ky * 3 + kx) * c;
            for (int k = 0; k < c; ++k) dst[k] += src[k];
          }
        }
      }
    }
    return dx;
  }

  void visit(const std::string& group, const ParamVisitor<T>& f) {
    f(group, weight);
    f(group, bias);
  }
};

/// Stack of stride-2 convolutions (silu after each), flattened into a
/// linear layer with silu.
template <class T>
struct ConvEncoder {
  std::vector<Conv3x3s2<T>> convs;
  Linear<T> fc;
  int input_size = 0;

  struct Cache {
    std::vector<Mat<T>> cols;
    std::vector<Mat<T>> pre;
    Mat<T> flat;
    Mat<T> fc_pre;
  };

  ConvEncoder() = default;
  ConvEncoder(const std::string& name, int size, int in_channels, const std::vector<int>& widths, int features)
      : input_size(size) {
    int c = in_channels;
    int s = size;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      convs.emplace_back(name + ".conv" + std::to_string(i), c, widths[i]);
      c = widths[i];
      s = Conv3x3s2<T>::out_size(s);
    }
    fc = Linear<T>(name + ".fc", s * s * c, features);
  }

  void init(std::mt19937_64& rng) {
    for (auto& c : convs) c.init(rng);
    fc.init(rng);
  }

  /// x is (size*size) x C; returns 1 x features.
  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    Mat<T> h = x;
    int s = input_size;
    if (cache) {
      cache->cols.clear();
      cache->pre.clear();
    }
    for (const auto& conv : convs) {
      Mat<T> cols = conv.im2col(h, s, s);
      Mat<T> z = cols * conv.weight.value.transpose();
      z.rowwise() += conv.bias.value.row(0);
      if (cache) {
        cache->cols.push_back(std::move(cols));
        cache->pre.push_back(z);
      }
      silu_inplace(z);
      h = std::move(z);
      s = Conv3x3s2<T>::out_size(s);
    }
    Mat<T> flat = Eigen::Map<const Mat<T>>(h.data(), 1, h.size());
    Mat<T> z = fc.forward(flat);
    if (cache) {
      cache->flat = flat;
      cache->fc_pre = z;
    }
    silu_inplace(z);
    return z;
  }

  /// Accumulates gradients; returns d input only when want_input is set.
  Mat<T> backward(const Cache& cache, const Mat<T>& dy, bool want_input) {
    Mat<T> g = fc.backward(cache.flat, silu_backward(cache.fc_pre, dy));
    std::vector<int> sizes{input_size};
    for (std::size_t i = 0; i + 1 < convs.size(); ++i) sizes.push_back(Conv3x3s2<T>::out_size(sizes.back()));
    for (std::size_t i = convs.size(); i-- > 0;) {
      auto& conv = convs[i];
      Mat<T> dz = Eigen::Map<const Mat<T>>(g.data(), cache.pre[i].rows(), cache.pre[i].cols());
      dz = silu_backward(cache.pre[i], dz);
      conv.weight.grad.noalias() += dz.transpose() * cache.cols[i];
      conv.bias.grad.row(0) += dz.colwise().sum();
      if (i == 0 && !want_input) return {};
      const Mat<T> dcols = dz * conv.weight.value;
      g = conv.col2im(dcols, sizes[i], sizes[i]);
    }
    return g;
  }

  void visit(const std::string& group, const ParamVisitor<T>& f) {
    for (auto& c : convs) c.visit(group, f);
    fc.visit(group, f);
  }
};

}  // namespace lm3d::nn
