#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lscn/common.hpp"
#include "lscn/geometry.hpp"
#include "lscn/random.hpp"

namespace lscn {

using Json = nlohmann::json;

struct ImageRecord {
  std::string id;
  int width = 0;
  int height = 0;
  std::string source;  // path relative to the manifest, or a synthetic descriptor

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Annotation {
  std::string id;
  std::string image_id;
  BoundingBox box;
  int class_id = 0;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Images, ground truth and the ordered list of K foreground classes.
/// Background is never a manifest class.
struct DatasetManifest {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<std::string> class_names;

  int num_classes() const noexcept { return static_cast<int>(class_names.size()); }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Output of a base detector for one box: K per-class confidences in [0, 1].
struct Detection {
  std::string image_id;
  BoundingBox box;
  std::vector<double> scores;

  int argmax() const noexcept {
    return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  }
  double max_score() const noexcept { return scores.empty() ? 0.0 : *std::max_element(scores.begin(), scores.end()); }

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct KShotSplit {
  std::vector<int> base_class_ids;
  std::vector<int> novel_class_ids;
  int k = 1;
  std::uint64_t seed = 0;
  /// Ordered by novel class id, then by draw order.
  std::vector<std::string> selected_novel_annotation_ids;

  bool is_novel(int class_id) const {
    return std::binary_search(novel_class_ids.begin(), novel_class_ids.end(), class_id);
  }

  friend bool operator==(const KShotSplit&, const KShotSplit&) = default;
};

// ---------------------------------------------------------------------------
// Lookup helpers

inline std::unordered_map<std::string, std::size_t> image_index(const DatasetManifest& m) {
  std::unordered_map<std::string, std::size_t> index;
  index.reserve(m.images.size());
  for (std::size_t i = 0; i < m.images.size(); ++i) index.emplace(m.images[i].id, i);
  return index;
}

/// Annotation positions per image id, in manifest order.
inline std::unordered_map<std::string, std::vector<std::size_t>> annotations_by_image(const DatasetManifest& m) {
  std::unordered_map<std::string, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < m.annotations.size(); ++i) out[m.annotations[i].image_id].push_back(i);
  return out;
}

inline std::unordered_map<std::string, std::vector<std::size_t>> detections_by_image(
    const std::vector<Detection>& dets) {
  std::unordered_map<std::string, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < dets.size(); ++i) out[dets[i].image_id].push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Validation

inline void validate_manifest(const DatasetManifest& m) {
  if (m.class_names.empty()) throw ValidationError("classes", "manifest declares no classes");
  std::set<std::string> seen_images;
  for (std::size_t i = 0; i < m.images.size(); ++i) {
    const auto& img = m.images[i];
    const std::string rec = "images[" + std::to_string(i) + "] '" + img.id + "'";
    if (img.id.empty()) throw ValidationError(rec, "empty image id");
    if (!seen_images.insert(img.id).second) throw ValidationError(rec, "duplicate image id");
    if (img.width <= 0 || img.height <= 0) throw ValidationError(rec, "non-positive image size");
  }
  const auto index = image_index(m);
  std::set<std::string> seen_annotations;
  for (std::size_t i = 0; i < m.annotations.size(); ++i) {
    const auto& a = m.annotations[i];
    const std::string rec = "annotations[" + std::to_string(i) + "] '" + a.id + "'";
    if (!seen_annotations.insert(a.id).second) throw ValidationError(rec, "duplicate annotation id");
    auto it = index.find(a.image_id);
    if (it == index.end()) throw ValidationError(rec, "unknown image_id '" + a.image_id + "'");
    if (a.class_id < 0 || a.class_id >= m.num_classes())
      throw ValidationError(rec, "class_id " + std::to_string(a.class_id) + " out of range");
    if (!a.box.valid()) throw ValidationError(rec, "invalid box " + to_string(a.box));
    const auto& img = m.images[it->second];
    if (a.box.x1 < 0.0 || a.box.y1 < 0.0 || a.box.x2 > img.width || a.box.y2 > img.height)
      throw ValidationError(rec, "box " + to_string(a.box) + " exceeds image extent");
  }
}

inline void validate_detection(const Detection& d, std::size_t index, int num_classes,
                               const std::unordered_map<std::string, std::size_t>& images) {
  const std::string rec = "detections[" + std::to_string(index) + "]";
  if (!images.contains(d.image_id)) throw ValidationError(rec, "unknown image_id '" + d.image_id + "'");
  if (!d.box.valid()) throw ValidationError(rec, "invalid box " + to_string(d.box));
  if (static_cast<int>(d.scores.size()) != num_classes)
    throw ValidationError(rec, "expected " + std::to_string(num_classes) + " scores, got " +
                                   std::to_string(d.scores.size()));
  for (std::size_t c = 0; c < d.scores.size(); ++c) {
    const double s = d.scores[c];
    if (!(s >= 0.0 && s <= 1.0))
      throw ValidationError(rec, "score[" + std::to_string(c) + "] = " + std::to_string(s) + " outside [0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Serialization. Boxes travel as [x, y, w, h]; in memory they are corners.

namespace detail {

inline Json box_to_json(const BoundingBox& b) {
  const auto xywh = b.to_xywh();
  return Json::array({xywh[0], xywh[1], xywh[2], xywh[3]});
}

inline BoundingBox box_from_json(const Json& j, const std::string& rec) {
  if (!j.is_array() || j.size() != 4) throw ValidationError(rec, "bbox must be an array of 4 numbers");
  for (const auto& v : j)
    if (!v.is_number()) throw ValidationError(rec, "bbox must be an array of 4 numbers");
  const double w = j[2].get<double>();
  const double h = j[3].get<double>();
  if (w < 0.0 || h < 0.0) throw ValidationError(rec, "bbox has negative width or height");
  return BoundingBox::from_xywh(j[0].get<double>(), j[1].get<double>(), w, h);
}

template <typename T>
T required(const Json& obj, const char* key, const std::string& rec) {
  if (!obj.is_object()) throw ValidationError(rec, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(rec, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const Json::exception&) {
    throw ValidationError(rec, std::string("field '") + key + "' has the wrong type");
  }
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path, "cannot open file");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ValidationError(path, std::string("malformed JSON: ") + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot open " + path + " for writing");
  out << text;
  if (!out) throw RuntimeFailure("failed writing " + path);
}

}  // namespace detail

inline Json manifest_to_json(const DatasetManifest& m) {
  Json images = Json::array();
  for (const auto& img : m.images)
    images.push_back({{"id", img.id}, {"width", img.width}, {"height", img.height}, {"source", img.source}});
  Json annotations = Json::array();
  for (const auto& a : m.annotations)
    annotations.push_back(
        {{"id", a.id}, {"image_id", a.image_id}, {"bbox", detail::box_to_json(a.box)}, {"class_id", a.class_id}});
  return {{"images", images}, {"annotations", annotations}, {"classes", m.class_names}};
}

inline DatasetManifest manifest_from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("manifest", "top level must be an object");
  for (const char* key : {"images", "annotations", "classes"})
    if (!j.contains(key) || !j[key].is_array())
      throw ValidationError("manifest", std::string("missing array '") + key + "'");
  DatasetManifest m;
  for (std::size_t i = 0; i < j["classes"].size(); ++i) {
    const auto& c = j["classes"][i];
    if (!c.is_string()) throw ValidationError("classes[" + std::to_string(i) + "]", "class name must be a string");
    m.class_names.push_back(c.get<std::string>());
  }
  for (std::size_t i = 0; i < j["images"].size(); ++i) {
    const auto& o = j["images"][i];
    const std::string rec = "images[" + std::to_string(i) + "]";
    m.images.push_back({detail::required<std::string>(o, "id", rec), detail::required<int>(o, "width", rec),
                        detail::required<int>(o, "height", rec), detail::required<std::string>(o, "source", rec)});
  }
  for (std::size_t i = 0; i < j["annotations"].size(); ++i) {
    const auto& o = j["annotations"][i];
    const std::string rec = "annotations[" + std::to_string(i) + "]";
    if (!o.is_object() || !o.contains("bbox")) throw ValidationError(rec, "missing field 'bbox'");
    m.annotations.push_back({detail::required<std::string>(o, "id", rec),
                             detail::required<std::string>(o, "image_id", rec), detail::box_from_json(o["bbox"], rec),
                             detail::required<int>(o, "class_id", rec)});
  }
  validate_manifest(m);
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
  return manifest_from_json(detail::read_json_file(path));
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  detail::write_text_file(path, manifest_to_json(m).dump(1) + "\n");
}

inline Json detection_to_json(const Detection& d) {
  return {{"image_id", d.image_id}, {"bbox", detail::box_to_json(d.box)}, {"scores", d.scores}};
}

inline Detection detection_from_json(const Json& o, const std::string& rec) {
  if (!o.is_object() || !o.contains("bbox")) throw ValidationError(rec, "missing field 'bbox'");
  Detection d;
  d.image_id = detail::required<std::string>(o, "image_id", rec);
  d.box = detail::box_from_json(o["bbox"], rec);
  d.scores = detail::required<std::vector<double>>(o, "scores", rec);
  return d;
}

/// Stable-sorts detections so they are grouped by image, in manifest order.
inline void group_detections(std::vector<Detection>& dets, const DatasetManifest& m) {
  const auto index = image_index(m);
  std::stable_sort(dets.begin(), dets.end(), [&](const Detection& a, const Detection& b) {
    return index.at(a.image_id) < index.at(b.image_id);
  });
}

inline std::vector<Detection> detections_from_json(const Json& j, const DatasetManifest& m) {
  if (!j.is_array()) throw ValidationError("detections", "top level must be an array");
  const auto index = image_index(m);
  std::vector<Detection> dets;
  dets.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    dets.push_back(detection_from_json(j[i], "detections[" + std::to_string(i) + "]"));
    validate_detection(dets.back(), i, m.num_classes(), index);
  }
  group_detections(dets, m);
  return dets;
}

inline std::vector<Detection> load_detections(const std::string& path, const DatasetManifest& m) {
  return detections_from_json(detail::read_json_file(path), m);
}

inline Json detections_to_json(const std::vector<Detection>& dets) {
  Json out = Json::array();
  for (const auto& d : dets) out.push_back(detection_to_json(d));
  return out;
}

inline void save_detections(const std::vector<Detection>& dets, const std::string& path) {
  detail::write_text_file(path, detections_to_json(dets).dump(1) + "\n");
}

// ---------------------------------------------------------------------------
// k-shot split

/// Chooses k novel annotations per novel class, uniformly without
/// replacement (all of them when fewer than k exist). Instances are counted,
/// not images. Deterministic in (manifest, novel ids, k, seed).
inline KShotSplit make_kshot_split(const DatasetManifest& m, std::vector<int> novel_class_ids, int k,
                                   std::uint64_t seed) {
  if (k < 1) throw ValidationError("k", "must be at least 1");
  std::sort(novel_class_ids.begin(), novel_class_ids.end());
  novel_class_ids.erase(std::unique(novel_class_ids.begin(), novel_class_ids.end()), novel_class_ids.end());
  for (int c : novel_class_ids)
    if (c < 0 || c >= m.num_classes())
      throw ValidationError("novel_class_ids", "unknown class id " + std::to_string(c));

  KShotSplit split;
  split.k = k;
  split.seed = seed;
  split.novel_class_ids = novel_class_ids;
  for (int c = 0; c < m.num_classes(); ++c)
    if (!split.is_novel(c)) split.base_class_ids.push_back(c);

  for (int c : novel_class_ids) {
    std::vector<std::string> pool;
    for (const auto& a : m.annotations)
      if (a.class_id == c) pool.push_back(a.id);
    if (static_cast<int>(pool.size()) < k) {
      log_warning("class " + std::to_string(c) + " ('" + m.class_names[c] + "') has only " +
                  std::to_string(pool.size()) + " annotations for k=" + std::to_string(k) + "; selecting all");
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(k));
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      split.selected_novel_annotation_ids.push_back(pool[i]);
    }
  }
  return split;
}

inline Json split_to_json(const KShotSplit& s) {
  return {{"base_class_ids", s.base_class_ids},
          {"novel_class_ids", s.novel_class_ids},
          {"k", s.k},
          {"seed", s.seed},
          {"selected_novel_annotation_ids", s.selected_novel_annotation_ids}};
}

inline KShotSplit split_from_json(const Json& j, const DatasetManifest& m) {
  const std::string rec = "split";
  KShotSplit s;
  s.base_class_ids = detail::required<std::vector<int>>(j, "base_class_ids", rec);
  s.novel_class_ids = detail::required<std::vector<int>>(j, "novel_class_ids", rec);
  s.k = detail::required<int>(j, "k", rec);
  s.seed = detail::required<std::uint64_t>(j, "seed", rec);
  s.selected_novel_annotation_ids = detail::required<std::vector<std::string>>(j, "selected_novel_annotation_ids", rec);
  std::sort(s.base_class_ids.begin(), s.base_class_ids.end());
  std::sort(s.novel_class_ids.begin(), s.novel_class_ids.end());
  std::vector<int> all = s.base_class_ids;
  all.insert(all.end(), s.novel_class_ids.begin(), s.novel_class_ids.end());
  std::sort(all.begin(), all.end());
  std::vector<int> expected(m.num_classes());
  for (int c = 0; c < m.num_classes(); ++c) expected[c] = c;
  if (all != expected) throw ValidationError(rec, "base and novel classes must partition the manifest classes");
  if (s.k < 1) throw ValidationError(rec, "k must be at least 1");
  std::unordered_map<std::string, int> class_of;
  std::map<int, int> available, chosen;
  for (const auto& a : m.annotations) {
    class_of[a.id] = a.class_id;
    ++available[a.class_id];
  }
  std::set<std::string> seen;
  for (const auto& id : s.selected_novel_annotation_ids) {
    auto it = class_of.find(id);
    if (it == class_of.end()) throw ValidationError(rec, "unknown annotation id '" + id + "'");
    if (!s.is_novel(it->second)) throw ValidationError(rec, "annotation '" + id + "' belongs to a base class");
    if (!seen.insert(id).second) throw ValidationError(rec, "annotation '" + id + "' selected twice");
    ++chosen[it->second];
  }
  for (int c : s.novel_class_ids)
    if (chosen[c] != std::min(s.k, available[c]))
      throw ValidationError(rec, "class " + std::to_string(c) + " has " + std::to_string(chosen[c]) +
                                     " selected annotations, expected " + std::to_string(std::min(s.k, available[c])));
  return s;
}

inline KShotSplit load_split(const std::string& path, const DatasetManifest& m) {
  return split_from_json(detail::read_json_file(path), m);
}

inline void save_split(const KShotSplit& s, const std::string& path) {
  detail::write_text_file(path, split_to_json(s).dump(1) + "\n");
}

}  // namespace lscn
