#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "lscn/common.hpp"
#include "lscn/datamodel.hpp"
#include "lscn/geometry.hpp"
#include "lscn/image.hpp"
#include "lscn/random.hpp"

namespace lscn {

// ---------------------------------------------------------------------------
// Synthetic shapes scenes

enum class Shape { kEllipse = 0, kRectangle, kTriangle, kDiamond, kRing, kCross };
inline constexpr int kNumShapes = 6;
inline constexpr int kNumColors = 6;

inline const char* shape_name(Shape s) {
  static constexpr const char* names[] = {"ellipse", "rectangle", "triangle", "diamond", "ring", "cross"};
  return names[static_cast<int>(s)];
}

inline const std::array<float, 3>& palette_color(int i) {
  static const std::array<std::array<float, 3>, kNumColors> colors = {{{0.85f, 0.15f, 0.15f},
                                                                       {0.15f, 0.75f, 0.20f},
                                                                       {0.20f, 0.30f, 0.90f},
                                                                       {0.90f, 0.85f, 0.15f},
                                                                       {0.85f, 0.20f, 0.80f},
                                                                       {0.15f, 0.80f, 0.85f}}};
  return colors[i];
}

inline const char* color_name(int i) {
  static constexpr const char* names[] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
  return names[i];
}

struct ClassAppearance {
  Shape shape = Shape::kEllipse;
  int color_index = 0;
  float texture = 0.04f;  // per-pixel noise amplitude inside the object
};

/// Class i gets shape i mod 6 and color (i / 6 + i) mod 6, so the first 36
/// classes are distinct (shape, color) pairs and consecutive blocks of six
/// reuse every shape and every color.
inline ClassAppearance default_appearance(int class_id) {
  ClassAppearance a;
  a.shape = static_cast<Shape>(class_id % kNumShapes);
  a.color_index = (class_id / kNumShapes + class_id) % kNumColors;
  a.texture = 0.03f + 0.01f * static_cast<float>(class_id % 3);
  return a;
}

inline std::string default_class_name(int class_id) {
  const auto a = default_appearance(class_id);
  return std::string(color_name(a.color_index)) + "_" + shape_name(a.shape);
}

struct SceneSpec {
  int canvas_width = 128;
  int canvas_height = 128;
  int num_classes = 12;
  int min_objects = 1;
  int max_objects = 4;
  int min_object_size = 18;
  int max_object_size = 40;
  double clutter_density = 6.0;  // mean clutter blobs per image
  /// Classes that appear only in "rare" images, at most once per image.
  std::vector<int> rare_classes;
  double rare_image_fraction = 0.0;
  std::vector<ClassAppearance> appearance;  // empty: default_appearance

  ClassAppearance class_appearance(int c) const {
    return appearance.empty() ? default_appearance(c) : appearance.at(c);
  }

  void validate() const {
    if (num_classes < 2) throw ValidationError("num_classes", "at least 2 classes required");
    if (num_classes > kNumShapes * kNumColors && appearance.empty())
      throw ValidationError("num_classes", "at most 36 classes have default appearances");
    if (!appearance.empty() && static_cast<int>(appearance.size()) != num_classes)
      throw ValidationError("appearance", "one entry per class required");
    if (canvas_width < 1 || canvas_height < 1) throw ValidationError("canvas", "canvas must be non-empty");
    if (min_objects < 0 || max_objects < min_objects)
      throw ValidationError("objects", "require 0 <= min_objects <= max_objects");
    if (min_object_size < 2 || max_object_size < min_object_size)
      throw ValidationError("object_size", "require 2 <= min_object_size <= max_object_size");
    if (clutter_density < 0.0) throw ValidationError("clutter_density", "must be non-negative");
    if (rare_image_fraction < 0.0 || rare_image_fraction > 1.0)
      throw ValidationError("rare_image_fraction", "must lie in [0, 1]");
    for (int c : rare_classes)
      if (c < 0 || c >= num_classes) throw ValidationError("rare_classes", "unknown class " + std::to_string(c));
    if (static_cast<int>(rare_classes.size()) >= num_classes)
      throw ValidationError("rare_classes", "at least one common class required");
  }
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<Image> images;  // manifest order
};

namespace detail {

inline bool shape_contains(Shape shape, double u, double v) {
  switch (shape) {
    case Shape::kEllipse: return u * u + v * v <= 1.0;
    case Shape::kRectangle: return true;
    case Shape::kTriangle: return std::abs(u) <= (v + 1.0) * 0.5;
    case Shape::kDiamond: return std::abs(u) + std::abs(v) <= 1.0;
    case Shape::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case Shape::kCross: return std::abs(u) <= 0.34 || std::abs(v) <= 0.34;
  }
  return false;
}

/// Fills pixels whose centers fall inside `shape` inscribed in `box`.
inline void paint_shape(Image& img, const BoundingBox& box, Shape shape, const std::array<float, 3>& color,
                        float texture, Rng& rng) {
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(box.x2)));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(box.y2)));
  const double w = box.width();
  const double h = box.height();
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double u = 2.0 * (x + 0.5 - box.x1) / w - 1.0;
      const double v = 2.0 * (y + 0.5 - box.y1) / h - 1.0;
      if (!shape_contains(shape, u, v)) continue;
      const float shade = 1.0f - 0.12f * static_cast<float>(v);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = color[c] * shade + texture * static_cast<float>(rng.normal());
    }
  }
}

struct PlacedObject {
  BoundingBox box;
  int class_id;
};

inline void render_scene(Image& img, const SceneSpec& spec, const std::vector<PlacedObject>& objects, Rng& rng) {
  // Smooth background gradient with pixel noise.
  std::array<float, 3> base{};
  std::array<float, 3> slope{};
  for (int c = 0; c < 3; ++c) {
    base[c] = static_cast<float>(rng.uniform(0.3, 0.6));
    slope[c] = static_cast<float>(rng.uniform(-0.15, 0.15));
  }
  const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double t = (ca * (x - img.width / 2.0) / img.width + sa * (y - img.height / 2.0) / img.height);
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = base[c] + slope[c] * static_cast<float>(t) + 0.03f * static_cast<float>(rng.normal());
    }

  // Clutter: small dull blobs.
  const unsigned clutter = rng.poisson(spec.clutter_density);
  for (unsigned i = 0; i < clutter; ++i) {
    const double size = rng.uniform(3.0, 10.0);
    const double cx = rng.uniform(0.0, img.width);
    const double cy = rng.uniform(0.0, img.height);
    const float gray = static_cast<float>(rng.uniform(0.2, 0.8));
    std::array<float, 3> color{};
    for (int c = 0; c < 3; ++c) color[c] = gray + static_cast<float>(rng.uniform(-0.12, 0.12));
    const Shape shape = rng.bernoulli(0.5) ? Shape::kEllipse : Shape::kRectangle;
    paint_shape(img, {cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2}, shape, color, 0.02f, rng);
  }

  for (const auto& obj : objects) {
    const auto app = spec.class_appearance(obj.class_id);
    std::array<float, 3> color = palette_color(app.color_index);
    for (auto& v : color) v += static_cast<float>(rng.uniform(-0.06, 0.06));
    paint_shape(img, obj.box, app.shape, color, app.texture, rng);
  }
  img.quantize();
}

}  // namespace detail

inline std::string synthetic_image_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05d", index);
  return buf;
}

/// Renders `n_images` scenes. Image i depends only on (seed, i), so any
/// subset can be regenerated independently.
inline SyntheticDataset generate_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed) {
  spec.validate();
  if (n_images < 1) throw ValidationError("n_images", "must be at least 1");
  if (spec.max_objects > 0 &&
      (spec.min_object_size > spec.canvas_width || spec.min_object_size > spec.canvas_height))
    throw ValidationError("canvas", "canvas too small for the minimum object size");

  std::vector<int> common;
  for (int c = 0; c < spec.num_classes; ++c)
    if (std::find(spec.rare_classes.begin(), spec.rare_classes.end(), c) == spec.rare_classes.end())
      common.push_back(c);

  SyntheticDataset out;
  for (int c = 0; c < spec.num_classes; ++c) out.manifest.class_names.push_back(default_class_name(c));
  out.images.reserve(n_images);

  for (int i = 0; i < n_images; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const std::string id = synthetic_image_id(i);
    const bool rare = !spec.rare_classes.empty() && rng.bernoulli(spec.rare_image_fraction);
    int count = rng.integer(spec.min_objects, spec.max_objects);
    if (rare) count = std::max(count, 1);

    std::vector<detail::PlacedObject> objects;
    for (int o = 0; o < count; ++o) {
      int cls;
      if (rare && o == 0)
        cls = spec.rare_classes[rng.index(spec.rare_classes.size())];
      else
        cls = common[rng.index(common.size())];

      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        const int max_w = std::min(spec.max_object_size, spec.canvas_width);
        const int max_h = std::min(spec.max_object_size, spec.canvas_height);
        const int w = rng.integer(spec.min_object_size, std::max(spec.min_object_size, max_w));
        const int h = std::clamp(static_cast<int>(std::lround(w * rng.uniform(0.75, 1.33))), spec.min_object_size,
                                 std::max(spec.min_object_size, max_h));
        if (w > spec.canvas_width || h > spec.canvas_height) continue;
        const int x = rng.integer(0, spec.canvas_width - w);
        const int y = rng.integer(0, spec.canvas_height - h);
        const BoundingBox box{double(x), double(y), double(x + w), double(y + h)};
        bool overlaps = false;
        for (const auto& other : objects) overlaps = overlaps || intersection_area(box, other.box) > 0.0;
        if (overlaps) continue;
        objects.push_back({box, cls});
        placed = true;
      }
      if (!placed) {
        if (o < spec.min_objects || (rare && o == 0))
          throw ValidationError("canvas", "canvas too small to place " + std::to_string(count) + " objects in " + id);
        break;
      }
    }

    Image img(spec.canvas_width, spec.canvas_height);
    detail::render_scene(img, spec, objects, rng);
    out.images.push_back(std::move(img));
    out.manifest.images.push_back({id, spec.canvas_width, spec.canvas_height, id + ".png"});
    for (std::size_t o = 0; o < objects.size(); ++o)
      out.manifest.annotations.push_back({id + "_a" + std::to_string(o), id, objects[o].box, objects[o].class_id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Base-detector simulator

/// Score profile for detections whose true class is in a group of classes.
struct ScoreProfile {
  double peak = 0.7;             // mean score of the predicted class
  double background_mass = 0.1;  // mean mass left to background
  double miss_rate = 0.0;
};

struct DetectorNoise {
  double jitter_scale = 0.0;  // 0 disables localization noise
  std::vector<std::vector<double>> confusion;  // K x K, row c = distribution of the predicted class
  ScoreProfile base;
  ScoreProfile novel;
  /// When the predicted class differs from the true one, the true class
  /// keeps this fraction of the peak mass.
  double secondary_fraction = 0.5;
  double false_positive_rate = 0.0;  // Poisson mean per image
  double near_miss_fraction = 0.5;   // share of false positives placed next to a ground-truth box
  ScoreProfile false_positive{0.4, 0.4, 0.0};
  /// Dirichlet concentration; infinity yields the mean score vector itself.
  double concentration = std::numeric_limits<double>::infinity();

  int num_classes() const noexcept { return static_cast<int>(confusion.size()); }

  void validate() const {
    const int k = num_classes();
    if (k < 1) throw ValidationError("confusion", "empty confusion matrix");
    for (int r = 0; r < k; ++r) {
      if (static_cast<int>(confusion[r].size()) != k)
        throw ValidationError("confusion[" + std::to_string(r) + "]", "row length must equal K");
      double sum = 0.0;
      for (double v : confusion[r]) {
        if (!(v >= 0.0)) throw ValidationError("confusion[" + std::to_string(r) + "]", "negative entry");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw ValidationError("confusion[" + std::to_string(r) + "]", "row must sum to 1");
    }
    if (jitter_scale < 0.0) throw ValidationError("jitter_scale", "must be >= 0 (0 disables jitter)");
    if (false_positive_rate < 0.0) throw ValidationError("false_positive_rate", "must be >= 0");
    if (near_miss_fraction < 0.0 || near_miss_fraction > 1.0)
      throw ValidationError("near_miss_fraction", "must lie in [0, 1]");
    if (!(concentration > 0.0)) throw ValidationError("concentration", "must be positive");
    if (secondary_fraction < 0.0 || secondary_fraction > 1.0)
      throw ValidationError("secondary_fraction", "must lie in [0, 1]");
    for (const auto* p : {&base, &novel, &false_positive}) {
      if (p->miss_rate < 0.0 || p->miss_rate > 1.0) throw ValidationError("miss_rate", "must lie in [0, 1]");
      if (p->peak <= 0.0 || p->background_mass < 0.0 || p->peak * (1.0 + secondary_fraction) + p->background_mass > 1.0)
        throw ValidationError("score profile", "peak, secondary and background mass must fit in [0, 1]");
      const double rest = (1.0 - p->peak - p->background_mass) / std::max(1, k - 1);
      if (k > 1 && rest >= p->peak)
        throw ValidationError("score profile", "peak must exceed the spread mass of other classes");
    }
  }

  static DetectorNoise noiseless(int num_classes) {
    DetectorNoise n;
    n.confusion.assign(num_classes, std::vector<double>(num_classes, 0.0));
    for (int c = 0; c < num_classes; ++c) n.confusion[c][c] = 1.0;
    n.base = {0.9, 0.05, 0.0};
    n.novel = n.base;
    n.secondary_fraction = 0.0;
    return n;
  }

  /// Localization identical for all classes; classification of novel
  /// classes strongly degraded toward visually related base classes and
  /// background.
  static DetectorNoise degraded_novel(int num_classes, const std::vector<int>& novel_class_ids,
                                      double base_accuracy = 0.8, double novel_accuracy = 0.3) {
    auto is_novel = [&](int c) {
      return std::find(novel_class_ids.begin(), novel_class_ids.end(), c) != novel_class_ids.end();
    };
    DetectorNoise n;
    n.jitter_scale = 12.0;
    n.concentration = 30.0;
    n.false_positive_rate = 3.0;
    n.near_miss_fraction = 0.5;
    n.secondary_fraction = 0.5;
    n.base = {0.6, 0.1, 0.05};
    n.novel = {0.45, 0.3, 0.1};
    n.false_positive = {0.4, 0.35, 0.0};
    n.confusion.assign(num_classes, std::vector<double>(num_classes, 0.0));
    for (int c = 0; c < num_classes; ++c) {
      const auto app = default_appearance(c);
      const double diag = is_novel(c) ? novel_accuracy : base_accuracy;
      std::vector<double> w(num_classes, 0.0);
      double total = 0.0;
      for (int o = 0; o < num_classes; ++o) {
        if (o == c) continue;
        const auto other = default_appearance(o);
        double weight = (other.shape == app.shape || other.color_index == app.color_index) ? 3.0 : 1.0;
        if (is_novel(c) && !is_novel(o)) weight *= 2.0;
        w[o] = weight;
        total += weight;
      }
      for (int o = 0; o < num_classes; ++o) n.confusion[c][o] = o == c ? diag : (1.0 - diag) * w[o] / total;
      // Exact row normalization.
      double sum = 0.0;
      for (double v : n.confusion[c]) sum += v;
      for (double& v : n.confusion[c]) v /= sum;
    }
    return n;
  }
};

namespace detail {

inline std::size_t sample_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding: return the last entry with nonzero mass.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return i;
  return probs.size() - 1;
}

/// K foreground scores whose argmax is `predicted`. `true_class` < 0 for
/// pure false positives.
inline std::vector<double> draw_scores(int num_classes, int predicted, int true_class, const ScoreProfile& profile,
                                       double secondary_fraction, double concentration, Rng& rng) {
  const int k = num_classes;
  std::vector<double> mean(k + 1, 0.0);
  mean[predicted] = profile.peak;
  mean[k] = profile.background_mass;
  double assigned = profile.peak + profile.background_mass;
  int others = k - 1;
  if (true_class >= 0 && true_class != predicted) {
    mean[true_class] = secondary_fraction * profile.peak;
    assigned += mean[true_class];
    --others;
  }
  const double rest = others > 0 ? std::max(0.0, 1.0 - assigned) / others : 0.0;
  for (int c = 0; c < k; ++c)
    if (c != predicted && !(true_class >= 0 && true_class != predicted && c == true_class)) mean[c] = rest;

  std::vector<double> draw = mean;
  if (std::isfinite(concentration)) {
    double sum = 0.0;
    for (int c = 0; c <= k; ++c) {
      const double shape = concentration * mean[c];
      draw[c] = shape > 0.0 ? rng.gamma(shape) : 0.0;
      sum += draw[c];
    }
    if (sum > 0.0)
      for (auto& v : draw) v /= sum;
    else
      draw = mean;
  }
  std::vector<double> scores(draw.begin(), draw.begin() + k);
  const int top = static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  if (top != predicted) std::swap(scores[top], scores[predicted]);
  for (auto& s : scores) s = std::clamp(s, 0.0, 1.0);
  return scores;
}

/// Rounds to a 1/1024 px grid so corner <-> (x, y, w, h) conversion is exact.
inline double snap(double v) { return std::round(v * 1024.0) / 1024.0; }

inline BoundingBox snap_box(const BoundingBox& b) { return {snap(b.x1), snap(b.y1), snap(b.x2), snap(b.y2)}; }

}  // namespace detail

/// Replays base-detector output statistics: one jittered detection per
/// surviving ground-truth object with a confusion-sampled score vector, plus
/// Poisson-many false positives per image. Each image uses its own substream
/// keyed by (seed, image id).
inline std::vector<Detection> simulate_detections(const DatasetManifest& manifest, const DetectorNoise& noise,
                                                  const std::vector<int>& novel_class_ids, std::uint64_t seed) {
  noise.validate();
  const int k = manifest.num_classes();
  if (noise.num_classes() != k) throw ValidationError("confusion", "matrix size must equal the number of classes");
  auto is_novel = [&](int c) {
    return std::find(novel_class_ids.begin(), novel_class_ids.end(), c) != novel_class_ids.end();
  };
  const auto by_image = annotations_by_image(manifest);
  std::vector<Detection> out;

  for (const auto& img : manifest.images) {
    Rng rng(derive_seed(seed, img.id));
    std::vector<std::size_t> gt;
    if (auto it = by_image.find(img.id); it != by_image.end()) gt = it->second;

    for (std::size_t ai : gt) {
      const auto& a = manifest.annotations[ai];
      const ScoreProfile& profile = is_novel(a.class_id) ? noise.novel : noise.base;
      if (rng.bernoulli(profile.miss_rate)) continue;
      BoundingBox box = a.box;
      if (noise.jitter_scale > 0.0) box = detail::snap_box(jitter_box(a.box, noise.jitter_scale, img.width, img.height, rng));
      const int predicted = static_cast<int>(detail::sample_categorical(noise.confusion[a.class_id], rng));
      out.push_back({img.id, box,
                     detail::draw_scores(k, predicted, a.class_id, profile, noise.secondary_fraction,
                                         noise.concentration, rng)});
    }

    const unsigned n_fp = rng.poisson(noise.false_positive_rate);
    for (unsigned f = 0; f < n_fp; ++f) {
      BoundingBox box;
      if (!gt.empty() && rng.bernoulli(noise.near_miss_fraction)) {
        const auto& ref = manifest.annotations[gt[rng.index(gt.size())]].box;
        const double dx = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.35, 0.9) * ref.width();
        const double dy = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.0, 0.5) * ref.height();
        box = clip_box({ref.x1 + dx, ref.y1 + dy, ref.x2 + dx, ref.y2 + dy}, img.width, img.height);
      } else {
        const double w = rng.uniform(12.0, 40.0);
        const double h = w * rng.uniform(0.75, 1.33);
        const double x = rng.uniform(0.0, std::max(0.0, img.width - w));
        const double y = rng.uniform(0.0, std::max(0.0, img.height - h));
        box = clip_box({x, y, x + w, y + h}, img.width, img.height);
      }
      box = detail::snap_box(box);
      if (box.width() < 2.0 || box.height() < 2.0) continue;
      const int predicted = static_cast<int>(rng.index(k));
      out.push_back({img.id, box,
                     detail::draw_scores(k, predicted, -1, noise.false_positive, noise.secondary_fraction,
                                         noise.concentration, rng)});
    }
  }
  return out;
}

}  // namespace lscn
