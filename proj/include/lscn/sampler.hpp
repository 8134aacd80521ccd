#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "lscn/common.hpp"
#include "lscn/datamodel.hpp"
#include "lscn/geometry.hpp"
#include "lscn/image.hpp"
#include "lscn/random.hpp"

namespace lscn {

enum class ProposalGroup { kForeground = 0, kFalsePositive = 1, kBackground = 2 };

inline const char* group_name(ProposalGroup g) {
  switch (g) {
    case ProposalGroup::kForeground: return "foreground";
    case ProposalGroup::kFalsePositive: return "false_positive";
    case ProposalGroup::kBackground: return "background";
  }
  return "?";
}

struct GroupingConfig {
  double foreground_iou = 0.5;
  double background_iou = 0.1;  // below this a proposal is pure background
  int top_t = 300;
  /// When false, any proposal with IoU >= foreground_iou is foreground
  /// regardless of the detector's predicted class.
  bool require_class_match = true;
};

struct GroupAssignment {
  ProposalGroup group = ProposalGroup::kBackground;
  int label = 0;  // matched class for foreground, K otherwise
  double max_iou = 0.0;
  int matched_class = -1;  // class of the best-overlapping ground truth, -1 if none overlaps
};

/// Indices of the `top_t` highest-scoring detections (by max class score;
/// ties keep input order).
inline std::vector<std::size_t> top_t_indices(const std::vector<Detection>& dets, const std::vector<std::size_t>& pool,
                                              int top_t) {
  std::vector<std::size_t> order = pool;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].max_score() > dets[b].max_score(); });
  if (top_t >= 0 && order.size() > static_cast<std::size_t>(top_t)) order.resize(top_t);
  return order;
}

/// Groups one image's proposals by their best overlap with ground truth:
/// foreground when IoU >= 0.5 and the predicted class matches, false positive
/// for a wrong class at IoU >= 0.5 or any IoU in [0.1, 0.5), background below
/// 0.1. Only foreground keeps its class as training label.
inline std::vector<GroupAssignment> group_proposals(const std::vector<const Detection*>& dets,
                                                    const std::vector<const Annotation*>& gt, int num_classes,
                                                    const GroupingConfig& cfg = {}) {
  std::vector<GroupAssignment> out;
  out.reserve(dets.size());
  for (const Detection* d : dets) {
    GroupAssignment g;
    g.label = num_classes;
    for (const Annotation* a : gt) {
      const double v = iou(d->box, a->box);
      if (v > g.max_iou) {
        g.max_iou = v;
        g.matched_class = a->class_id;
      }
    }
    if (g.max_iou >= cfg.foreground_iou) {
      if (!cfg.require_class_match || d->argmax() == g.matched_class) {
        g.group = ProposalGroup::kForeground;
        g.label = g.matched_class;
      } else {
        g.group = ProposalGroup::kFalsePositive;
      }
    } else if (g.max_iou >= cfg.background_iou) {
      g.group = ProposalGroup::kFalsePositive;
    } else {
      g.group = ProposalGroup::kBackground;
    }
    out.push_back(g);
  }
  return out;
}

/// Crop of size x size bilinear samples over `box`, one sample at the
/// center of every output bin, no quantization of the box. Pixel (i, j)
/// covers [j, j+1) x [i, i+1), so its value sits at (j + 0.5, i + 0.5).
/// Samples outside the image clamp to the border.
inline std::vector<float> crop_and_resize(const Image& image, const BoundingBox& box, int size) {
  if (!box.valid() || box.area() < 1.0) throw ValidationError("crop", "box " + to_string(box) + " has area < 1 px^2");
  if (size < 1) throw ValidationError("crop", "output size must be positive");
  std::vector<float> out(static_cast<std::size_t>(3) * size * size);
  const double bin_w = box.width() / size;
  const double bin_h = box.height() / size;
  const int w = image.width;
  const int h = image.height;
  for (int oy = 0; oy < size; ++oy) {
    const double fy = std::clamp(box.y1 + (oy + 0.5) * bin_h - 0.5, 0.0, double(h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, h - 1);
    const double ly = fy - y0;
    for (int ox = 0; ox < size; ++ox) {
      const double fx = std::clamp(box.x1 + (ox + 0.5) * bin_w - 0.5, 0.0, double(w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, w - 1);
      const double lx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ly) * ((1 - lx) * image.at(c, y0, x0) + lx * image.at(c, y0, x1)) +
                         ly * ((1 - lx) * image.at(c, y1, x0) + lx * image.at(c, y1, x1));
        out[(static_cast<std::size_t>(c) * size + oy) * size + ox] = static_cast<float>(v);
      }
    }
  }
  return out;
}

struct ProposalCrop {
  std::string image_id;
  BoundingBox box;  // after jitter
  ProposalGroup group = ProposalGroup::kBackground;
  int label = 0;
  std::vector<float> crop;  // 3 x S x S
};

/// One image's inputs to batch construction.
struct ImageProposals {
  const ImageRecord* record = nullptr;
  const Image* image = nullptr;
  std::vector<const Detection*> detections;
  std::vector<const Annotation*> ground_truth;
};

/// Per-group quotas for M boxes: an equal share for every nonempty group,
/// remainder going first to false positives, then foreground, then
/// background.
inline std::array<int, 3> group_quotas(int m, const std::array<bool, 3>& nonempty) {
  std::array<int, 3> q{0, 0, 0};
  int groups = 0;
  for (bool b : nonempty) groups += b;
  if (groups == 0) return q;
  for (int g = 0; g < 3; ++g)
    if (nonempty[g]) q[g] = m / groups;
  int rest = m % groups;
  for (int g : {1, 0, 2}) {
    if (rest == 0) break;
    if (nonempty[g]) {
      ++q[g];
      --rest;
    }
  }
  return q;
}

struct BatchConfig {
  int boxes_per_image = 32;     // M
  double jitter_scale = 10.0;   // 0 disables jitter
  int crop_size = 64;           // S
  GroupingConfig grouping;
};

namespace detail {

inline std::vector<std::size_t> draw_from_group(const std::vector<std::size_t>& members, int quota, Rng& rng) {
  std::vector<std::size_t> out;
  if (members.empty() || quota <= 0) return out;
  if (static_cast<std::size_t>(quota) > members.size()) {
    for (int i = 0; i < quota; ++i) out.push_back(members[rng.index(members.size())]);
    return out;
  }
  std::vector<std::size_t> pool = members;
  for (int i = 0; i < quota; ++i) {
    const std::size_t j = i + rng.index(pool.size() - i);
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

}  // namespace detail

/// Samples M boxes per image with equal group quotas (with replacement when a
/// group is smaller than its quota), jitters and crops them. Image slot i uses
/// the substream keyed by (seed, i, image id).
inline std::vector<ProposalCrop> build_batch(const std::vector<ImageProposals>& images, int num_classes,
                                             const BatchConfig& cfg, std::uint64_t seed,
                                             bool include_crops = true) {
  if (cfg.boxes_per_image < 1) throw ValidationError("boxes_per_image", "must be at least 1");
  if (images.empty()) throw ValidationError("images", "at least one image per batch required");
  std::vector<ProposalCrop> out;
  for (std::size_t slot = 0; slot < images.size(); ++slot) {
    const auto& ip = images[slot];
    Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(slot)), ip.record->id));
    if (ip.detections.empty()) {
      log_info("image " + ip.record->id + " has no proposals; contributes no crops");
      continue;
    }
    // Top-T by max score.
    std::vector<std::size_t> order(ip.detections.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return ip.detections[a]->max_score() > ip.detections[b]->max_score();
    });
    if (order.size() > static_cast<std::size_t>(cfg.grouping.top_t)) order.resize(cfg.grouping.top_t);
    std::vector<const Detection*> top;
    for (std::size_t i : order) top.push_back(ip.detections[i]);

    const auto groups = group_proposals(top, ip.ground_truth, num_classes, cfg.grouping);
    std::array<std::vector<std::size_t>, 3> members;
    for (std::size_t i = 0; i < groups.size(); ++i) members[static_cast<int>(groups[i].group)].push_back(i);
    const auto quota = group_quotas(cfg.boxes_per_image, {!members[0].empty(), !members[1].empty(), !members[2].empty()});

    for (int g = 0; g < 3; ++g) {
      for (std::size_t i : detail::draw_from_group(members[g], quota[g], rng)) {
        ProposalCrop pc;
        pc.image_id = ip.record->id;
        pc.box = top[i]->box;
        if (cfg.jitter_scale > 0.0 && pc.box.width() > 0.0 && pc.box.height() > 0.0)
          pc.box = jitter_box(pc.box, cfg.jitter_scale, ip.record->width, ip.record->height, rng);
        pc.group = groups[i].group;
        pc.label = groups[i].label;
        if (include_crops) {
          if (pc.box.area() < 1.0) {
            log_info("skipping sub-pixel proposal in " + ip.record->id);
            continue;
          }
          pc.crop = crop_and_resize(*ip.image, pc.box, cfg.crop_size);
        }
        out.push_back(std::move(pc));
      }
    }
  }
  return out;
}

}  // namespace lscn
