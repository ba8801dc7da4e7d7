#pragma once

// Minimal deterministic chart renderer (PNG via OpenCV, SVG by hand).

#include <filesystem>
#include <string>
#include <vector>

#include "lm3d/util.hpp"

namespace lm3d::eval::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

enum class Kind { line, bar };

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  Kind kind = Kind::line;
  std::vector<std::string> categories;  // bar charts: one label per x slot
  std::vector<Series> series;
};

/// Writes <stem>.png and <stem>.svg; returns both paths.
std::vector<std::filesystem::path> write_chart(const Chart& chart, const std::filesystem::path& stem);

std::string render_svg(const Chart& chart);

json to_json(const Chart& chart);

}  // namespace lm3d::eval::plot
