#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lscn/datamodel.hpp"
#include "lscn/geometry.hpp"
#include "lscn/sampler.hpp"

namespace lscn {

enum class ApVariant { kAllPoint, kElevenPoint };

namespace detail {

/// Greedy matching of one class: detections with a positive score for the
/// class, ranked by descending score (ties keep input order), each taking the
/// highest-IoU still-unmatched ground truth of the class in its image when
/// that IoU reaches the threshold.
struct ClassMatching {
  std::size_t npos = 0;
  std::vector<std::size_t> order;        // ranked detection indices
  std::vector<bool> true_positive;       // per ranked detection
  std::vector<std::ptrdiff_t> matched_by;  // per ground truth index: detection index or -1
};

inline ClassMatching match_class(const std::vector<Detection>& dets, const std::vector<Annotation>& gt, int class_id,
                                 double iou_threshold) {
  ClassMatching m;
  m.matched_by.assign(gt.size(), -1);
  std::unordered_map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gt.size(); ++g)
    if (gt[g].class_id == class_id) {
      by_image[gt[g].image_id].push_back(g);
      ++m.npos;
    }
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (static_cast<std::size_t>(class_id) < dets[i].scores.size() && dets[i].scores[class_id] > 0.0)
      m.order.push_back(i);
  std::stable_sort(m.order.begin(), m.order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].scores[class_id] > dets[b].scores[class_id]; });
  m.true_positive.assign(m.order.size(), false);
  for (std::size_t r = 0; r < m.order.size(); ++r) {
    const std::size_t i = m.order[r];
    auto it = by_image.find(dets[i].image_id);
    if (it == by_image.end()) continue;
    double best = -1.0;
    std::ptrdiff_t best_g = -1;
    for (std::size_t g : it->second) {
      if (m.matched_by[g] >= 0) continue;
      const double v = iou(dets[i].box, gt[g].box);
      if (v > best) {
        best = v;
        best_g = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_g >= 0 && best >= iou_threshold) {
      m.matched_by[best_g] = static_cast<std::ptrdiff_t>(i);
      m.true_positive[r] = true;
    }
  }
  return m;
}

}  // namespace detail

/// Average precision of `class_id` at one IoU threshold. Detections enter
/// with their score for that class (zero scores are not detections), are
/// ranked by descending score with ties kept in input order, and each takes
/// the highest-IoU still-unmatched ground truth of the class in its image
/// when that IoU reaches the threshold. All-point AP is the area under the
/// precision envelope. Returns nullopt when the class has no ground truth.
inline std::optional<double> average_precision(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                                               int class_id, double iou_threshold,
                                               ApVariant variant = ApVariant::kAllPoint) {
  const auto m = detail::match_class(dets, gt, class_id, iou_threshold);
  if (m.npos == 0) return std::nullopt;

  std::vector<double> recall, precision;
  recall.reserve(m.order.size());
  precision.reserve(m.order.size());
  std::size_t tp = 0;
  for (std::size_t r = 0; r < m.order.size(); ++r) {
    tp += m.true_positive[r];
    recall.push_back(static_cast<double>(tp) / static_cast<double>(m.npos));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
  }

  if (variant == ApVariant::kElevenPoint) {
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double r = t / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= r) p = std::max(p, precision[i]);
      ap += p / 11.0;
    }
    return ap;
  }

  // Precision envelope, right to left.
  std::vector<double> envelope(precision.size());
  double running = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    running = std::max(running, precision[i]);
    envelope[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] != prev_recall) ap += (recall[i] - prev_recall) * envelope[i];
    prev_recall = recall[i];
  }
  return ap;
}

// ---------------------------------------------------------------------------
// IoU histogram

enum class HistogramMode {
  kSameClass,      // IoU against ground truth of the detection's predicted class
  kClassAgnostic,  // IoU against any ground truth; split decided by the best match
};

struct IouHistogram {
  std::vector<double> edges;  // bins [e_i, e_{i+1}); the last bin includes 1
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
};

inline std::vector<double> uniform_edges(int bins) {
  std::vector<double> e(bins + 1);
  for (int i = 0; i <= bins; ++i) e[i] = static_cast<double>(i) / bins;
  e.back() = 1.0;
  return e;
}

inline IouHistogram iou_histogram(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                                  const std::vector<int>& novel_class_ids, const std::vector<double>& edges,
                                  HistogramMode mode = HistogramMode::kSameClass) {
  if (edges.size() < 2 || edges.front() != 0.0 || edges.back() != 1.0 ||
      !std::is_sorted(edges.begin(), edges.end()) ||
      std::adjacent_find(edges.begin(), edges.end()) != edges.end())
    throw ValidationError("bins", "edges must strictly increase from 0 to 1");
  IouHistogram h{edges, std::vector<std::size_t>(edges.size() - 1, 0), std::vector<std::size_t>(edges.size() - 1, 0)};
  std::unordered_map<std::string, std::vector<const Annotation*>> by_image;
  for (const auto& a : gt) by_image[a.image_id].push_back(&a);
  auto is_novel = [&](int c) {
    return std::find(novel_class_ids.begin(), novel_class_ids.end(), c) != novel_class_ids.end();
  };
  for (const auto& d : dets) {
    const int predicted = d.argmax();
    double best = 0.0;
    int split_class = predicted;
    if (auto it = by_image.find(d.image_id); it != by_image.end()) {
      for (const Annotation* a : it->second) {
        if (mode == HistogramMode::kSameClass && a->class_id != predicted) continue;
        const double v = iou(d.box, a->box);
        if (v > best) {
          best = v;
          if (mode == HistogramMode::kClassAgnostic) split_class = a->class_id;
        }
      }
    }
    std::size_t bin = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), best) - edges.begin());
    bin = std::min(bin == 0 ? 0 : bin - 1, edges.size() - 2);
    (is_novel(split_class) ? h.novel : h.base)[bin]++;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Oracle false-positive correction curve

enum class OracleMode { kCombined, kSuppressOnly, kCorrectOnly };

struct OraclePoint {
  double threshold = 0.0;
  double ap50_all = 0.0;
  double ap50_base = 0.0;
  double ap50_novel = 0.0;
};

struct OracleConfig {
  double eval_iou = 0.5;
  int top_t = 300;
  OracleMode mode = OracleMode::kCombined;
};

/// Mean AP over the classes in `classes` that have ground truth; 0 if none.
inline double mean_ap(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                      const std::vector<int>& classes, double iou_threshold,
                      ApVariant variant = ApVariant::kAllPoint) {
  double sum = 0.0;
  int n = 0;
  for (int c : classes)
    if (auto ap = average_precision(dets, gt, c, iou_threshold, variant)) {
      sum += *ap;
      ++n;
    }
  return n == 0 ? 0.0 : sum / n;
}

/// Keeps each image's top-T detections by max score; order otherwise preserved.
inline std::vector<Detection> keep_top_t(const std::vector<Detection>& dets, int top_t) {
  const auto by_image = detections_by_image(dets);
  std::vector<bool> keep(dets.size(), false);
  for (const auto& [id, idx] : by_image)
    for (std::size_t i : top_t_indices(dets, idx, top_t)) keep[i] = true;
  std::vector<Detection> out;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (keep[i]) out.push_back(dets[i]);
  return out;
}

/// Applies the oracle at threshold t. For t > 0, a detection whose best IoU
/// with any ground truth is below min(t, eval_iou) can never be a true
/// positive and has its foreground scores zeroed. A misclassified detection
/// is corrected (its max score moved to the true class, every other class
/// zeroed) when it overlaps exactly one ground truth at IoU >= eval_iou, that
/// IoU reaches 1 - t, and in the uncorrected evaluation of the true class the
/// object is either unmatched or matched by this very detection; per object
/// only the highest-IoU such detection qualifies. A correction therefore only
/// moves a true positive up the ranking or adds one, suppression only removes
/// detections that match nothing, and both sets grow with t, so AP at
/// eval_iou cannot decrease with t. t = 0 leaves the detections untouched.
inline std::vector<Detection> apply_oracle(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                                           double t, const OracleConfig& cfg = {}) {
  std::vector<Detection> out = dets;
  if (t <= 0.0) return out;
  std::unordered_map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gt.size(); ++g) by_image[gt[g].image_id].push_back(g);

  struct Overlap {
    double best = 0.0;
    std::ptrdiff_t gt = -1;
    int localized = 0;  // ground truths at IoU >= eval_iou
  };
  std::vector<Overlap> ov(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (auto it = by_image.find(dets[i].image_id); it != by_image.end())
      for (std::size_t g : it->second) {
        const double v = iou(dets[i].box, gt[g].box);
        ov[i].localized += v >= cfg.eval_iou;
        if (v > ov[i].best) {
          ov[i].best = v;
          ov[i].gt = static_cast<std::ptrdiff_t>(g);
        }
      }

  // The one correctable detection per ground truth, fixed for every t.
  std::vector<std::ptrdiff_t> chosen(gt.size(), -1);
  if (cfg.mode != OracleMode::kSuppressOnly) {
    std::unordered_map<int, detail::ClassMatching> matchings;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto& o = ov[i];
      if (o.gt < 0 || o.localized != 1 || o.best < cfg.eval_iou || dets[i].max_score() <= 0.0) continue;
      const int c = gt[o.gt].class_id;
      if (dets[i].argmax() == c) continue;
      auto it = matchings.find(c);
      if (it == matchings.end()) it = matchings.emplace(c, detail::match_class(dets, gt, c, cfg.eval_iou)).first;
      const std::ptrdiff_t holder = it->second.matched_by[o.gt];
      if (holder >= 0) {
        if (holder == static_cast<std::ptrdiff_t>(i)) chosen[o.gt] = holder;
        continue;
      }
      std::ptrdiff_t& cur = chosen[o.gt];
      if (cur < 0 || o.best > ov[cur].best) cur = static_cast<std::ptrdiff_t>(i);
    }
  }

  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& d = out[i];
    const auto& o = ov[i];
    if (o.best < std::min(t, cfg.eval_iou)) {
      if (cfg.mode != OracleMode::kCorrectOnly) std::fill(d.scores.begin(), d.scores.end(), 0.0);
      continue;
    }
    if (o.gt >= 0 && chosen[o.gt] == static_cast<std::ptrdiff_t>(i) && o.best >= 1.0 - t) {
      const double s = d.max_score();
      std::fill(d.scores.begin(), d.scores.end(), 0.0);
      d.scores[gt[o.gt].class_id] = s;
    }
  }
  return out;
}

inline std::vector<OraclePoint> oracle_fp_curve(const std::vector<Detection>& dets, const std::vector<Annotation>& gt,
                                                int num_classes, const std::vector<int>& novel_class_ids,
                                                const std::vector<double>& thresholds, const OracleConfig& cfg = {}) {
  const auto top = keep_top_t(dets, cfg.top_t);
  std::vector<int> all, base, novel;
  for (int c = 0; c < num_classes; ++c) {
    all.push_back(c);
    (std::find(novel_class_ids.begin(), novel_class_ids.end(), c) != novel_class_ids.end() ? novel : base).push_back(c);
  }
  std::vector<OraclePoint> curve;
  for (double t : thresholds) {
    const auto fixed = apply_oracle(top, gt, t, cfg);
    curve.push_back({t, mean_ap(fixed, gt, all, cfg.eval_iou), mean_ap(fixed, gt, base, cfg.eval_iou),
                     mean_ap(fixed, gt, novel, cfg.eval_iou)});
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Report

struct ClassAp {
  int class_id = 0;
  std::string name;
  bool novel = false;
  std::optional<double> ap50, ap75, ap;  // ap = mean over IoU 0.50:0.05:0.95
};

struct SplitMeans {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap = 0.0;
};

struct EvalReport {
  std::vector<ClassAp> per_class;
  SplitMeans base, novel, all;
  std::optional<IouHistogram> histogram;
  std::vector<OraclePoint> oracle_curve;
};

struct EvalOptions {
  ApVariant variant = ApVariant::kAllPoint;
  bool with_histogram = false;
  int histogram_bins = 10;
  HistogramMode histogram_mode = HistogramMode::kSameClass;
  std::vector<double> oracle_thresholds;  // empty: no curve
  OracleConfig oracle;
};

inline EvalReport evaluate(const std::vector<Detection>& dets, const DatasetManifest& manifest,
                           const std::vector<int>& novel_class_ids, const EvalOptions& opt = {}) {
  EvalReport r;
  const auto& gt = manifest.annotations;
  struct Acc {
    double s50 = 0, s75 = 0, s = 0;
    int n = 0;
  } acc_base, acc_novel, acc_all;
  for (int c = 0; c < manifest.num_classes(); ++c) {
    ClassAp ca;
    ca.class_id = c;
    ca.name = manifest.class_names[c];
    ca.novel = std::find(novel_class_ids.begin(), novel_class_ids.end(), c) != novel_class_ids.end();
    ca.ap50 = average_precision(dets, gt, c, 0.5, opt.variant);
    if (ca.ap50) {
      ca.ap75 = average_precision(dets, gt, c, 0.75, opt.variant);
      double sum = 0.0;
      for (int i = 0; i < 10; ++i) sum += *average_precision(dets, gt, c, 0.5 + 0.05 * i, opt.variant);
      ca.ap = sum / 10.0;
      for (Acc* a : {ca.novel ? &acc_novel : &acc_base, &acc_all}) {
        a->s50 += *ca.ap50;
        a->s75 += *ca.ap75;
        a->s += *ca.ap;
        a->n++;
      }
    }
    r.per_class.push_back(ca);
  }
  auto means = [](const Acc& a) {
    return a.n == 0 ? SplitMeans{} : SplitMeans{a.s50 / a.n, a.s75 / a.n, a.s / a.n};
  };
  r.base = means(acc_base);
  r.novel = means(acc_novel);
  r.all = means(acc_all);
  if (opt.with_histogram)
    r.histogram = iou_histogram(dets, gt, novel_class_ids, uniform_edges(opt.histogram_bins), opt.histogram_mode);
  if (!opt.oracle_thresholds.empty())
    r.oracle_curve = oracle_fp_curve(dets, gt, manifest.num_classes(), novel_class_ids, opt.oracle_thresholds, opt.oracle);
  return r;
}

inline Json eval_report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  Json per_class = Json::array();
  for (const auto& c : r.per_class)
    per_class.push_back({{"class_id", c.class_id},
                         {"name", c.name},
                         {"split", c.novel ? "novel" : "base"},
                         {"ap50", opt(c.ap50)},
                         {"ap75", opt(c.ap75)},
                         {"ap", opt(c.ap)}});
  auto means = [](const SplitMeans& m) { return Json{{"ap50", m.ap50}, {"ap75", m.ap75}, {"ap", m.ap}}; };
  Json j = {{"per_class", per_class},
            {"mean", {{"base", means(r.base)}, {"novel", means(r.novel)}, {"all", means(r.all)}}},
            {"ap_definition", "all-point interpolated; greedy matching to the highest-IoU unmatched ground truth; "
                              "score ties ranked by input order"}};
  if (r.histogram)
    j["iou_histogram"] = {{"edges", r.histogram->edges}, {"base", r.histogram->base}, {"novel", r.histogram->novel}};
  if (!r.oracle_curve.empty()) {
    Json curve = Json::array();
    for (const auto& p : r.oracle_curve)
      curve.push_back({{"threshold", p.threshold},
                       {"ap50_all", p.ap50_all},
                       {"ap50_base", p.ap50_base},
                       {"ap50_novel", p.ap50_novel}});
    j["oracle_curve"] = curve;
    j["oracle_semantics"] =
        "threshold t: zero all scores of detections whose best IoU is below min(t, 0.5); swap predicted and "
        "matched-class scores of detections with IoU >= 0.5 and IoU >= 1 - t whose predicted class is wrong";
  }
  return j;
}

}  // namespace lscn
