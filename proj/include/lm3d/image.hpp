#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

namespace lm3d {

/// Interleaved float image (row-major, HWC), values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {}

  bool empty() const noexcept { return data.empty(); }
  float& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  /// Bilinear lookup at continuous pixel coordinates (pixel centers on
  /// integers); out-of-range samples read `outside`.
  Eigen::Vector3f sample(double x, double y, float outside = 0.0f) const;
};

/// PNG (8-bit) I/O. Reads convert to RGB; throws ImageUnreadable.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Keeps the image codecs on the calling thread (bitwise-reproducible runs).
void use_single_thread();

/// Box-filter downscale by an integer factor.
Image downsample(const Image& image, int factor);

/// Normalized [-1,1] coordinate to continuous pixel coordinate and back.
inline double to_pixel(double normalized, int size) { return (normalized + 1.0) * 0.5 * size - 0.5; }
inline double to_normalized(double pixel, int size) { return (2.0 * pixel + 1.0) / size - 1.0; }

}  // namespace lm3d
