#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lscn/common.hpp"
#include "lscn/image.hpp"

namespace lscn::plot {

using Color = std::array<float, 3>;

inline constexpr Color kBlack{0.1f, 0.1f, 0.1f};
inline constexpr Color kGrid{0.85f, 0.85f, 0.85f};
inline constexpr Color kBlue{0.12f, 0.47f, 0.71f};
inline constexpr Color kOrange{1.0f, 0.5f, 0.05f};
inline constexpr Color kGreen{0.17f, 0.63f, 0.17f};

/// White raster with a plot area inset by `margin` pixels; data coordinates
/// map linearly from [x0, x1] x [y0, y1] onto the plot area.
class Canvas {
 public:
  Canvas(int width, int height, double x0, double x1, double y0, double y1, int margin = 24)
      : image_(width, height, 1.0f), x0_(x0), x1_(x1), y0_(y0), y1_(y1), margin_(margin) {
    if (width <= 2 * margin || height <= 2 * margin) throw ValidationError("plot", "canvas too small");
    if (!(x1 > x0) || !(y1 > y0)) throw ValidationError("plot", "empty data range");
  }

  double px(double x) const { return margin_ + (x - x0_) / (x1_ - x0_) * (image_.width - 2 * margin_ - 1); }
  double py(double y) const {
    return image_.height - 1 - margin_ - (y - y0_) / (y1_ - y0_) * (image_.height - 2 * margin_ - 1);
  }

  void pixel(int x, int y, const Color& c) {
    if (x < 0 || y < 0 || x >= image_.width || y >= image_.height) return;
    for (int k = 0; k < 3; ++k) image_.at(k, y, x) = c[k];
  }

  void line_px(double ax, double ay, double bx, double by, const Color& c, int thickness = 1) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(bx - ax), std::abs(by - ay)))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      const int x = static_cast<int>(std::lround(ax + t * (bx - ax)));
      const int y = static_cast<int>(std::lround(ay + t * (by - ay)));
      for (int dy = -(thickness / 2); dy <= thickness / 2; ++dy)
        for (int dx = -(thickness / 2); dx <= thickness / 2; ++dx) pixel(x + dx, y + dy, c);
    }
  }

  void line(double xa, double ya, double xb, double yb, const Color& c, int thickness = 1) {
    line_px(px(xa), py(ya), px(xb), py(yb), c, thickness);
  }

  void fill(double xa, double ya, double xb, double yb, const Color& c) {
    const int l = static_cast<int>(std::lround(std::min(px(xa), px(xb))));
    const int r = static_cast<int>(std::lround(std::max(px(xa), px(xb))));
    const int t = static_cast<int>(std::lround(std::min(py(ya), py(yb))));
    const int b = static_cast<int>(std::lround(std::max(py(ya), py(yb))));
    for (int y = t; y <= b; ++y)
      for (int x = l; x <= r; ++x) pixel(x, y, c);
  }

  void marker(double x, double y, const Color& c, int radius = 2) {
    const int cx = static_cast<int>(std::lround(px(x)));
    const int cy = static_cast<int>(std::lround(py(y)));
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) pixel(cx + dx, cy + dy, c);
  }

  /// Horizontal grid lines at `ticks` equal steps plus both axes.
  void axes(int ticks = 5) {
    for (int i = 0; i <= ticks; ++i) {
      const double y = y0_ + (y1_ - y0_) * i / ticks;
      line(x0_, y, x1_, y, i == 0 ? kBlack : kGrid);
    }
    line(x0_, y0_, x0_, y1_, kBlack);
  }

  const Image& image() const { return image_; }
  void save(const std::string& path) const { write_png(image_, path); }

 private:
  Image image_;
  double x0_, x1_, y0_, y1_;
  int margin_;
};

/// Normalized side-by-side bars per bin for several series (fractions of
/// each series' total).
inline Canvas histogram_chart(const std::vector<double>& edges, const std::vector<std::vector<std::size_t>>& series,
                              const std::vector<Color>& colors, int width = 480, int height = 320) {
  Canvas c(width, height, edges.front(), edges.back(), 0.0, 1.0);
  c.axes();
  const std::size_t n = series.size();
  for (std::size_t s = 0; s < n; ++s) {
    double total = 0.0;
    for (auto v : series[s]) total += static_cast<double>(v);
    if (total == 0.0) continue;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
      const double w = (edges[b + 1] - edges[b]) * 0.8 / n;
      const double x = edges[b] + (edges[b + 1] - edges[b]) * 0.1 + w * s;
      c.fill(x, 0.0, x + w, series[s][b] / total, colors[s % colors.size()]);
    }
  }
  return c;
}

/// Polylines with point markers, y range [0, 1].
inline Canvas line_chart(const std::vector<double>& xs, const std::vector<std::vector<double>>& series,
                         const std::vector<Color>& colors, int width = 480, int height = 320) {
  const double lo = xs.empty() ? 0.0 : *std::min_element(xs.begin(), xs.end());
  double hi = xs.empty() ? 1.0 : *std::max_element(xs.begin(), xs.end());
  if (!(hi > lo)) hi = lo + 1.0;
  Canvas c(width, height, lo, hi, 0.0, 1.0);
  c.axes();
  for (std::size_t s = 0; s < series.size(); ++s) {
    const Color& col = colors[s % colors.size()];
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (i > 0) c.line(xs[i - 1], series[s][i - 1], xs[i], series[s][i], col, 2);
      c.marker(xs[i], series[s][i], col);
    }
  }
  return c;
}

}  // namespace lscn::plot
