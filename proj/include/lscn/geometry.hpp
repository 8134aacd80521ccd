#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <string>

#include "lscn/common.hpp"
#include "lscn/random.hpp"

namespace lscn {

/// Axis-aligned box in corner form, continuous pixel coordinates.
/// Areas carry no +1 discretization.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return width() * height(); }
  bool valid() const noexcept {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 >= x1 &&
           y2 >= y1;
  }

  static BoundingBox from_xywh(double x, double y, double w, double h) noexcept {
    return {x, y, x + w, y + h};
  }
  std::array<double, 4> to_xywh() const noexcept { return {x1, y1, width(), height()}; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline std::string to_string(const BoundingBox& b) {
  return "(" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " +
         std::to_string(b.y2) + ")";
}

inline void require_valid(const BoundingBox& b, const std::string& what = "box") {
  if (!b.valid()) throw ValidationError(what, "invalid box " + to_string(b));
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

/// Intersection over union; 0 when the union is empty.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a, "iou lhs");
  require_valid(b, "iou rhs");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline BoundingBox clip_box(const BoundingBox& b, double image_width, double image_height) noexcept {
  return {std::clamp(b.x1, 0.0, image_width), std::clamp(b.y1, 0.0, image_height),
          std::clamp(b.x2, 0.0, image_width), std::clamp(b.y2, 0.0, image_height)};
}

/// Anything callable that yields standard-normal draws.
template <typename G>
concept NormalSource = requires(G g) {
  { g() } -> std::convertible_to<double>;
};

inline constexpr int kJitterMaxResamples = 8;

/// Gaussian box jitter: each x-coordinate moves by N(0, (W/jitter_scale)^2),
/// each y-coordinate by N(0, (H/jitter_scale)^2). The result is clipped to
/// the image, inverted sides are swapped, and a box that collapsed below
/// min(1 px, original extent) is redrawn up to 8 times before falling back
/// to the input box.
template <NormalSource Normal>
BoundingBox jitter_box(const BoundingBox& b, double jitter_scale, double image_width, double image_height,
                       Normal&& normal) {
  require_valid(b, "jitter_box input");
  if (!(jitter_scale > 0.0) || !std::isfinite(jitter_scale))
    throw ValidationError("jitter_scale", "must be positive, got " + std::to_string(jitter_scale));

  const double sx = b.width() / jitter_scale;
  const double sy = b.height() / jitter_scale;
  const double min_w = std::min(1.0, b.width());
  const double min_h = std::min(1.0, b.height());

  for (int attempt = 0; attempt <= kJitterMaxResamples; ++attempt) {
    BoundingBox out{b.x1 + sx * static_cast<double>(normal()), b.y1 + sy * static_cast<double>(normal()),
                    b.x2 + sx * static_cast<double>(normal()), b.y2 + sy * static_cast<double>(normal())};
    // Draw order above is x1, y1, x2, y2; keep it stable for reproducibility.
    out = clip_box(out, image_width, image_height);
    if (out.x2 < out.x1) std::swap(out.x1, out.x2);
    if (out.y2 < out.y1) std::swap(out.y1, out.y2);
    if (out.width() >= min_w && out.height() >= min_h) return out;
  }
  return b;
}

inline BoundingBox jitter_box(const BoundingBox& b, double jitter_scale, double image_width, double image_height,
                              Rng& rng) {
  return jitter_box(b, jitter_scale, image_width, image_height, [&rng] { return rng.normal(); });
}

}  // namespace lscn
