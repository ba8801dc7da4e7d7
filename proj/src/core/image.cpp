#include "lm3d/image.hpp"

#include <cmath>

#include <opencv2/core/utility.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lm3d/error.hpp"

namespace lm3d {

Eigen::Vector3f Image::sample(double x, double y, float outside) const {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const float fx = static_cast<float>(x - x0);
  const float fy = static_cast<float>(y - y0);
  Eigen::Vector3f out = Eigen::Vector3f::Zero();
  const int nc = std::min(channels, 3);
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const float w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
      if (w == 0.0f) continue;
      const int xi = x0 + dx;
      const int yi = y0 + dy;
      const bool inside = xi >= 0 && yi >= 0 && xi < width && yi < height;
      for (int c = 0; c < nc; ++c) out[c] += w * (inside ? at(yi, xi, c) : outside);
    }
  }
  return out;
}

void use_single_thread() { cv::setNumThreads(0); }

Image read_png(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorCode::ImageUnreadable, "cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image img(rgb.rows, rgb.cols, 3);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<unsigned char>(y);
    for (int i = 0; i < rgb.cols * 3; ++i) {
      img.data[static_cast<std::size_t>(y) * rgb.cols * 3 + i] = row[i] / 255.0f;
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const int type = image.channels == 1 ? CV_8UC1 : CV_8UC3;
  cv::Mat mat(image.height, image.width, type);
  for (int y = 0; y < image.height; ++y) {
    auto* row = mat.ptr<unsigned char>(y);
    for (int i = 0; i < image.width * image.channels; ++i) {
      const float v = image.data[static_cast<std::size_t>(y) * image.width * image.channels + i];
      row[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  }
  if (image.channels == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp.png";
  if (!cv::imwrite(tmp.string(), mat)) throw Error(ErrorCode::Io, "cannot write " + path.string());
  std::filesystem::rename(tmp, path);
}

Image downsample(const Image& image, int factor) {
  if (factor == 1) return image;
  Image out(image.height / factor, image.width / factor, image.channels);
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < image.channels; ++c) {
        float acc = 0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) acc += image.at(y * factor + dy, x * factor + dx, c);
        }
        out.at(y, x, c) = acc * inv;
      }
    }
  }
  return out;
}

}  // namespace lm3d
