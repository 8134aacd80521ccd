#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "lscn/checkpoint.hpp"
#include "lscn/datamodel.hpp"
#include "lscn/image.hpp"
#include "lscn/parallel.hpp"
#include "lscn/sampler.hpp"

namespace lscn {

/// fused[c] = base[c] * probs[c] for every foreground class c. The
/// background probability is not used directly; it only lowers the
/// foreground entries through the softmax. No renormalization.
inline std::vector<double> fuse_scores(std::span<const double> base_scores, std::span<const double> lscn_probs) {
  if (lscn_probs.size() != base_scores.size() + 1)
    throw ValidationError("fuse_scores", "expected " + std::to_string(base_scores.size() + 1) +
                                             " correction probabilities, got " + std::to_string(lscn_probs.size()));
  std::vector<double> fused(base_scores.size());
  for (std::size_t c = 0; c < base_scores.size(); ++c) fused[c] = base_scores[c] * lscn_probs[c];
  return fused;
}

struct RefinedDetection {
  Detection original;
  std::vector<double> lscn_probs;    // K + 1, empty when not refined
  std::vector<double> fused_scores;  // K; equals the original scores when not refined
  bool refined = false;

  Detection fused() const { return {original.image_id, original.box, fused_scores}; }
};

/// Scores every final-stage box of one image with the correction model (no
/// jitter) and fuses. Order and boxes are unchanged; a box too small to crop
/// is passed through unrefined.
template <typename Scalar>
std::vector<RefinedDetection> refine_detections(const Image& image, const std::vector<Detection>& dets,
                                                const CorrectionModel<Scalar>& model, std::size_t batch_size = 64,
                                                std::size_t threads = 1) {
  if (batch_size == 0) throw ValidationError("batch_size", "must be positive");
  const int k = model.num_classes();
  const int size = model.extractor.config().input_size;
  std::vector<RefinedDetection> out(dets.size());
  std::vector<std::size_t> croppable;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (static_cast<int>(dets[i].scores.size()) != k)
      throw ValidationError("detections[" + std::to_string(i) + "]", "score vector length differs from model classes");
    out[i].original = dets[i];
    out[i].fused_scores = dets[i].scores;
    if (dets[i].box.valid() && dets[i].box.area() >= 1.0)
      croppable.push_back(i);
    else
      log_warning("detection " + std::to_string(i) + " in " + dets[i].image_id + " has a degenerate box; not refined");
  }
  for (std::size_t start = 0; start < croppable.size(); start += batch_size) {
    const std::size_t end = std::min(croppable.size(), start + batch_size);
    std::vector<std::vector<float>> crops(end - start);
    parallel_for(crops.size(), threads, [&](std::size_t j) {
      crops[j] = crop_and_resize(image, dets[croppable[start + j]].box, size);
    });
    const auto probs = model.probabilities(model.extractor.extract_features(crops, threads));
    for (std::size_t j = 0; j < crops.size(); ++j) {
      auto& r = out[croppable[start + j]];
      r.lscn_probs.resize(k + 1);
      for (int c = 0; c <= k; ++c) r.lscn_probs[c] = static_cast<double>(probs(static_cast<Eigen::Index>(j), c));
      r.fused_scores = fuse_scores(r.original.scores, r.lscn_probs);
      r.refined = true;
    }
  }
  return out;
}

/// Greedy class-agnostic NMS on max score; returns kept indices in input order.
inline std::vector<std::size_t> greedy_nms(const std::vector<Detection>& dets, double iou_threshold = 0.5) {
  const auto by_image = detections_by_image(dets);
  std::vector<bool> keep(dets.size(), false);
  for (const auto& [id, idx] : by_image) {
    auto order = top_t_indices(dets, idx, -1);
    std::vector<std::size_t> kept;
    for (std::size_t i : order) {
      bool suppressed = false;
      for (std::size_t j : kept) suppressed = suppressed || iou(dets[i].box, dets[j].box) > iou_threshold;
      if (!suppressed) kept.push_back(i);
    }
    for (std::size_t i : kept) keep[i] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

inline Json refined_to_json(const std::vector<RefinedDetection>& refined) {
  Json out = Json::array();
  for (const auto& r : refined) {
    Json j = detection_to_json(r.fused());
    j["lscn_probs"] = r.refined ? Json(r.lscn_probs) : Json(nullptr);
    j["base_scores"] = r.original.scores;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace lscn
