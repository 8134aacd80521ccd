#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lscn/lscn.hpp"

namespace lscn::testing {

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

inline BoundingBox random_box(Rng& rng, double w, double h, double min_size = 1.0) {
  const double bw = rng.uniform(min_size, w * 0.6);
  const double bh = rng.uniform(min_size, h * 0.6);
  const double x = rng.uniform(0.0, w - bw);
  const double y = rng.uniform(0.0, h - bh);
  return {x, y, x + bw, y + bh};
}

/// Box on a 0.25 px lattice inside [0, n) x [0, n).
inline BoundingBox lattice_box(Rng& rng, int n) {
  auto q = [&] { return rng.integer(0, 4 * n) / 4.0; };
  double x1 = q(), x2 = q(), y1 = q(), y2 = q();
  if (x2 < x1) std::swap(x1, x2);
  if (y2 < y1) std::swap(y1, y2);
  return {x1, y1, x2, y2};
}

/// IoU by counting 0.25 px cells covered by each box.
inline double raster_iou(const BoundingBox& a, const BoundingBox& b, int n) {
  long inter = 0, ua = 0, ub = 0;
  for (int i = 0; i < 4 * n; ++i) {
    const double y = (i + 0.5) / 4.0;
    for (int j = 0; j < 4 * n; ++j) {
      const double x = (j + 0.5) / 4.0;
      const bool in_a = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
      const bool in_b = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
      ua += in_a;
      ub += in_b;
      inter += in_a && in_b;
    }
  }
  const long uni = ua + ub - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Average precision by enumerating every cutoff of the ranked list and
// re-matching the prefix from scratch.

struct CutoffPoint {
  double precision = 0.0;
  double recall = 0.0;
};

inline std::vector<CutoffPoint> enumerate_cutoffs(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                                                  int cls, double thr, std::size_t& npos) {
  npos = 0;
  for (const auto& a : gt) npos += a.class_id == cls;
  std::vector<std::size_t> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].scores[cls] > 0.0) ranked.push_back(i);
  // Insertion sort: descending score, earlier input first among equals.
  for (std::size_t i = 1; i < ranked.size(); ++i)
    for (std::size_t j = i; j > 0 && dets[ranked[j]].scores[cls] > dets[ranked[j - 1]].scores[cls]; --j)
      std::swap(ranked[j], ranked[j - 1]);
  std::vector<CutoffPoint> out;
  for (std::size_t n = 1; n <= ranked.size(); ++n) {
    std::vector<bool> used(gt.size(), false);
    std::size_t tp = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const auto& d = dets[ranked[r]];
      double best = -1.0;
      std::size_t best_g = 0;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        if (used[g] || gt[g].class_id != cls || gt[g].image_id != d.image_id) continue;
        const double v = iou(d.box, gt[g].box);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best >= thr) {
        used[best_g] = true;
        ++tp;
      }
    }
    out.push_back({static_cast<double>(tp) / static_cast<double>(n), static_cast<double>(tp) / static_cast<double>(npos)});
  }
  return out;
}

/// Area under the precision envelope, summed where recall changes.
inline std::optional<double> oracle_ap(const std::vector<Detection>& dets, const std::vector<Annotation>& gt, int cls,
                                       double thr) {
  std::size_t npos = 0;
  const auto pts = enumerate_cutoffs(dets, gt, cls, thr, npos);
  if (npos == 0) return std::nullopt;
  double ap = 0.0, prev = 0.0;
  for (std::size_t n = 0; n < pts.size(); ++n) {
    double env = 0.0;
    for (std::size_t m = n; m < pts.size(); ++m) env = std::max(env, pts[m].precision);
    if (pts[n].recall != prev) ap += (pts[n].recall - prev) * env;
    prev = pts[n].recall;
  }
  return ap;
}

/// Same quantity as a recall-level sum: every ground truth adds 1/npos times
/// the best precision reachable at or beyond its recall level.
inline std::optional<double> oracle_ap_levels(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                                              int cls, double thr) {
  std::size_t npos = 0;
  const auto pts = enumerate_cutoffs(dets, gt, cls, thr, npos);
  if (npos == 0) return std::nullopt;
  double ap = 0.0;
  for (std::size_t j = 1; j <= npos; ++j) {
    double best = 0.0;
    for (const auto& p : pts)
      if (p.recall * static_cast<double>(npos) >= static_cast<double>(j) - 1e-9) best = std::max(best, p.precision);
    ap += best / static_cast<double>(npos);
  }
  return ap;
}

inline std::optional<double> oracle_ap11(const std::vector<Detection>& dets, const std::vector<Annotation>& gt, int cls,
                                         double thr) {
  std::size_t npos = 0;
  const auto pts = enumerate_cutoffs(dets, gt, cls, thr, npos);
  if (npos == 0) return std::nullopt;
  double ap = 0.0;
  for (int t = 0; t <= 10; ++t) {
    double best = 0.0;
    for (const auto& p : pts)
      if (p.recall >= t / 10.0) best = std::max(best, p.precision);
    ap += best / 11.0;
  }
  return ap;
}

/// Random detection problem: up to `max_gt` ground truths and `max_dets`
/// detections over `images` images and `classes` classes. Scores are
/// quantized to create ties; some detections sit near ground truth.
struct ApInstance {
  std::vector<Annotation> gt;
  std::vector<Detection> dets;
  int classes = 0;
};

inline ApInstance random_ap_instance(Rng& rng, int classes, int images, int max_gt, int max_dets) {
  ApInstance inst;
  inst.classes = classes;
  const int n_gt = rng.integer(1, max_gt);
  for (int g = 0; g < n_gt; ++g)
    inst.gt.push_back({"a" + std::to_string(g), "img" + std::to_string(rng.integer(0, images - 1)),
                       random_box(rng, 60, 60, 4.0), rng.integer(0, classes - 1)});
  const int n_det = rng.integer(0, max_dets);
  for (int d = 0; d < n_det; ++d) {
    Detection det;
    if (rng.bernoulli(0.6)) {
      const auto& a = inst.gt[rng.index(inst.gt.size())];
      det.image_id = a.image_id;
      const double s = rng.uniform(0.0, 0.3) * a.box.width();
      det.box = clip_box({a.box.x1 + rng.uniform(-s, s), a.box.y1 + rng.uniform(-s, s), a.box.x2 + rng.uniform(-s, s),
                          a.box.y2 + rng.uniform(-s, s)},
                         60, 60);
      if (det.box.x2 < det.box.x1) std::swap(det.box.x1, det.box.x2);
      if (det.box.y2 < det.box.y1) std::swap(det.box.y1, det.box.y2);
    } else {
      det.image_id = "img" + std::to_string(rng.integer(0, images - 1));
      det.box = random_box(rng, 60, 60, 4.0);
    }
    det.scores.resize(classes);
    for (auto& s : det.scores) s = rng.integer(0, 10) / 10.0;
    inst.dets.push_back(std::move(det));
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Central finite differences

/// Relative error between analytic `grad` and central differences of `f`
/// over every coordinate of `x` (perturbed in place and restored).
template <typename F>
double max_fd_error(std::vector<double>& x, const std::vector<double>& grad, F&& f, double eps = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f();
    x[i] = keep - eps;
    const double down = f();
    x[i] = keep;
    const double fd = (up - down) / (2 * eps);
    const double err = std::abs(fd - grad[i]) / std::max(1e-4, std::abs(fd) + std::abs(grad[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Small synthetic worlds

inline SceneSpec small_scene(int classes = 6) {
  SceneSpec s;
  s.num_classes = classes;
  s.canvas_width = s.canvas_height = 64;
  s.min_object_size = 12;
  s.max_object_size = 24;
  s.max_objects = 3;
  s.clutter_density = 2.0;
  return s;
}

inline TrainConfig tiny_train_config() {
  TrainConfig c;
  c.extractor.input_size = 16;
  c.extractor.channels = {4, 8};
  c.extractor.embedding_dim = 8;
  c.extractor.cgnl_stage = 2;
  c.images_per_batch = 2;
  c.boxes_per_image = 6;
  c.phase1_iterations = 4;
  c.phase2_iterations = 3;
  c.eval_every = 2;
  c.heldout_images = 3;
  c.background_samples = 8;
  return c;
}

}  // namespace lscn::testing
