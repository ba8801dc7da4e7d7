#include "plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lm3d/error.hpp"

namespace lm3d::eval::plot {

namespace {

constexpr int kWidth = 720;
constexpr int kHeight = 420;
constexpr int kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;

const std::array<std::array<int, 3>, 8> kPalette{{{31, 119, 180},
                                                  {255, 127, 14},
                                                  {44, 160, 44},
                                                  {214, 39, 40},
                                                  {148, 103, 189},
                                                  {140, 86, 75},
                                                  {227, 119, 194},
                                                  {127, 127, 127}}};

struct Frame {
  double x0, x1, y0, y1;

  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

Frame frame_of(const Chart& c) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : c.series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) {
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (c.kind == Kind::bar) {
    x0 -= 0.5;
    x1 += 0.5;
    y0 = std::min(0.0, y0);
  }
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) {
    const double pad = std::max(1.0, std::abs(y0) * 0.1);
    y0 -= pad;
    y1 += pad;
  } else {
    const double pad = 0.05 * (y1 - y0);
    y1 += pad;
    if (c.kind != Kind::bar || y0 < 0) y0 -= pad;
  }
  return {x0, x1, y0, y1};
}

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

std::string rgb(std::size_t i) {
  const auto& c = kPalette[i % kPalette.size()];
  return "rgb(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]) + ")";
}

cv::Scalar bgr(std::size_t i) {
  const auto& c = kPalette[i % kPalette.size()];
  return {static_cast<double>(c[2]), static_cast<double>(c[1]), static_cast<double>(c[0])};
}

double bar_width(const Chart& c) { return 0.8 / static_cast<double>(std::max<std::size_t>(1, c.series.size())); }

}  // namespace

std::string render_svg(const Chart& c) {
  const Frame f = frame_of(c);
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) + "\" height=\"" +
                  std::to_string(kHeight) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + std::to_string(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
       escape(c.title) + "</text>\n";
  const double ax0 = f.px(f.x0), ax1 = f.px(f.x1), ay0 = f.py(f.y0), ay1 = f.py(f.y1);
  s += "<rect x=\"" + fmt(ax0) + "\" y=\"" + fmt(ay1) + "\" width=\"" + fmt(ax1 - ax0) + "\" height=\"" +
       fmt(ay0 - ay1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s += "<text x=\"" + fmt(ax0 - 6) + "\" y=\"" + fmt(f.py(v) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" +
         fmt(v, 3) + "</text>\n";
  }
  if (c.kind == Kind::bar) {
    for (std::size_t k = 0; k < c.categories.size(); ++k) {
      s += "<text x=\"" + fmt(f.px(static_cast<double>(k))) + "\" y=\"" + fmt(ay0 + 16) +
           "\" text-anchor=\"middle\" font-size=\"10\">" + escape(c.categories[k]) + "</text>\n";
    }
  } else {
    for (int i = 0; i <= 4; ++i) {
      const double v = f.x0 + (f.x1 - f.x0) * i / 4.0;
      s += "<text x=\"" + fmt(f.px(v)) + "\" y=\"" + fmt(ay0 + 16) + "\" text-anchor=\"middle\" font-size=\"11\">" +
           fmt(v, 2) + "</text>\n";
    }
  }
  s += "<text x=\"" + fmt((ax0 + ax1) / 2) + "\" y=\"" + std::to_string(kHeight - 10) +
       "\" text-anchor=\"middle\" font-size=\"12\">" + escape(c.x_label) + "</text>\n";
  s += "<text x=\"14\" y=\"" + fmt((ay0 + ay1) / 2) + "\" font-size=\"12\" transform=\"rotate(-90 14 " +
       fmt((ay0 + ay1) / 2) + ")\" text-anchor=\"middle\">" + escape(c.y_label) + "</text>\n";

  const double bw = bar_width(c);
  for (std::size_t i = 0; i < c.series.size(); ++i) {
    const auto& ser = c.series[i];
    if (c.kind == Kind::bar) {
      for (std::size_t k = 0; k < ser.x.size(); ++k) {
        if (!std::isfinite(ser.y[k])) continue;
        const double xl = ser.x[k] - 0.4 + bw * static_cast<double>(i);
        const double top = f.py(std::max(ser.y[k], 0.0));
        const double bottom = f.py(std::min(ser.y[k], 0.0));
        s += "<rect x=\"" + fmt(f.px(xl)) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(f.px(xl + bw) - f.px(xl)) +
             "\" height=\"" + fmt(bottom - top) + "\" fill=\"" + rgb(i) + "\"/>\n";
      }
    } else {
      s += "<polyline fill=\"none\" stroke=\"" + rgb(i) + "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t k = 0; k < ser.x.size(); ++k) {
        if (!std::isfinite(ser.y[k])) continue;
        s += fmt(f.px(ser.x[k])) + "," + fmt(f.py(ser.y[k])) + (k + 1 < ser.x.size() ? " " : "");
      }
      s += "\"/>\n";
    }
    const int ly = kTop + 16 * static_cast<int>(i) + 10;
    s += "<rect x=\"" + std::to_string(kWidth - kRight + 12) + "\" y=\"" + std::to_string(ly - 8) +
         "\" width=\"10\" height=\"10\" fill=\"" + rgb(i) + "\"/>\n";
    s += "<text x=\"" + std::to_string(kWidth - kRight + 26) + "\" y=\"" + std::to_string(ly + 1) +
         "\" font-size=\"11\">" + escape(ser.name) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::vector<std::filesystem::path> write_chart(const Chart& c, const std::filesystem::path& stem) {
  const Frame f = frame_of(c);
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto pt = [&](double x, double y) { return cv::Point(static_cast<int>(std::lround(f.px(x))), static_cast<int>(std::lround(f.py(y)))); };
  const auto text = [&](const std::string& t, cv::Point p, double scale) {
    cv::putText(img, t, p, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  };
  text(c.title, {kLeft, 24}, 0.55);
  cv::rectangle(img, pt(f.x0, f.y1), pt(f.x1, f.y0), cv::Scalar(0, 0, 0), 1);
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    text(fmt(v, 3), {4, static_cast<int>(f.py(v)) + 4}, 0.35);
  }
  if (c.kind == Kind::bar) {
    for (std::size_t k = 0; k < c.categories.size(); ++k) {
      const auto p = pt(static_cast<double>(k), f.y0);
      text(c.categories[k], {p.x - 30, p.y + 16}, 0.3);
    }
  } else {
    for (int i = 0; i <= 4; ++i) {
      const double v = f.x0 + (f.x1 - f.x0) * i / 4.0;
      const auto p = pt(v, f.y0);
      text(fmt(v, 2), {p.x - 12, p.y + 16}, 0.35);
    }
  }
  text(c.x_label, {kWidth / 2 - 60, kHeight - 8}, 0.45);

  const double bw = bar_width(c);
  for (std::size_t i = 0; i < c.series.size(); ++i) {
    const auto& ser = c.series[i];
    if (c.kind == Kind::bar) {
      for (std::size_t k = 0; k < ser.x.size(); ++k) {
        if (!std::isfinite(ser.y[k])) continue;
        const double xl = ser.x[k] - 0.4 + bw * static_cast<double>(i);
        cv::rectangle(img, pt(xl, std::max(ser.y[k], 0.0)), pt(xl + bw, std::min(ser.y[k], 0.0)), bgr(i), cv::FILLED);
      }
    } else {
      std::vector<cv::Point> poly;
      for (std::size_t k = 0; k < ser.x.size(); ++k) {
        if (std::isfinite(ser.y[k])) poly.push_back(pt(ser.x[k], ser.y[k]));
      }
      if (poly.size() == 1) cv::circle(img, poly[0], 2, bgr(i), cv::FILLED);
      if (poly.size() > 1) cv::polylines(img, poly, false, bgr(i), 1, cv::LINE_AA);
    }
    const int ly = kTop + 16 * static_cast<int>(i) + 10;
    cv::rectangle(img, {kWidth - kRight + 12, ly - 8}, {kWidth - kRight + 22, ly + 2}, bgr(i), cv::FILLED);
    text(ser.name, {kWidth - kRight + 26, ly + 1}, 0.35);
  }

  std::filesystem::create_directories(stem.parent_path());
  const std::filesystem::path png = stem.string() + ".png";
  const std::filesystem::path svg = stem.string() + ".svg";
  std::vector<uchar> bytes;
  if (!cv::imencode(".png", img, bytes)) throw Error(ErrorCode::Io, "cannot encode " + png.string());
  write_file_atomic(png, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  write_file_atomic(svg, render_svg(c));
  return {png, svg};
}

json to_json(const Chart& c) {
  json series = json::array();
  for (const auto& s : c.series) {
    json y = json::array();
    for (double v : s.y) y.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    series.push_back({{"name", s.name}, {"x", s.x}, {"y", y}});
  }
  json out = {{"title", c.title},
              {"x_label", c.x_label},
              {"y_label", c.y_label},
              {"kind", c.kind == Kind::bar ? "bar" : "line"},
              {"series", series}};
  if (!c.categories.empty()) out["categories"] = c.categories;
  return out;
}

}  // namespace lm3d::eval::plot
