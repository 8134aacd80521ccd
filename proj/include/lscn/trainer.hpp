#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "lscn/checkpoint.hpp"
#include "lscn/classifier.hpp"
#include "lscn/common.hpp"
#include "lscn/datamodel.hpp"
#include "lscn/image.hpp"
#include "lscn/losses.hpp"
#include "lscn/netcore.hpp"
#include "lscn/parallel.hpp"
#include "lscn/sampler.hpp"

namespace lscn {

/// Scalar type of trained models.
using Real = float;
using Model = CorrectionModel<Real>;

/// Training groups proposals by IoU alone; a well-localized box keeps its
/// ground-truth class even when the detector predicted another one.
inline GroupingConfig iou_only_grouping() {
  GroupingConfig g;
  g.require_class_match = false;
  return g;
}

struct TrainConfig {
  int images_per_batch = 4;   // N
  int boxes_per_image = 32;   // M
  double logit_scale = 16.0;
  double margin = 0.2;
  double jitter_scale = 10.0;
  double phase1_lr = 0.01;
  double lr_decay_at = 2.0 / 3.0;  // fraction of phase-1 iterations
  double lr_decay = 0.1;
  double phase2_lr = 0.001;
  int phase1_iterations = 2000;
  int phase2_iterations = 500;
  double novel_oversampling = 4.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double grad_clip_norm = 5.0;  // 0 disables global-norm clipping
  std::uint64_t seed = 1;
  ExtractorConfig extractor;
  GroupingConfig grouping = iou_only_grouping();
  bool literal_bg_equation = false;
  bool mean_normalize_hinge = false;
  bool freeze_imprinted = false;
  int background_samples = 64;  // pooled background embeddings for the background row
  int heldout_images = 16;      // base images kept out of phase 1 for the held-out loss
  int eval_every = 250;
  std::size_t threads = 1;      // 0: hardware concurrency; runtime only, not serialized

  void validate() const {
    auto positive = [](double v, const char* key) {
      if (!(v > 0.0)) throw ValidationError(key, "must be positive");
    };
    if (images_per_batch < 1) throw ValidationError("images_per_batch", "must be at least 1");
    if (boxes_per_image < 1) throw ValidationError("boxes_per_image", "must be at least 1");
    positive(logit_scale, "logit_scale");
    positive(margin, "margin");
    if (jitter_scale < 0.0) throw ValidationError("jitter_scale", "must be >= 0 (0 disables jitter)");
    positive(phase1_lr, "phase1_lr");
    positive(phase2_lr, "phase2_lr");
    if (lr_decay_at < 0.0 || lr_decay_at > 1.0) throw ValidationError("lr_decay_at", "must lie in [0, 1]");
    positive(lr_decay, "lr_decay");
    if (phase1_iterations < 0 || phase2_iterations < 0) throw ValidationError("iterations", "must be >= 0");
    positive(novel_oversampling, "novel_oversampling");
    if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("momentum", "must lie in [0, 1)");
    if (weight_decay < 0.0) throw ValidationError("weight_decay", "must be >= 0");
    if (grad_clip_norm < 0.0) throw ValidationError("grad_clip_norm", "must be >= 0");
    if (background_samples < 1) throw ValidationError("background_samples", "must be at least 1");
    if (heldout_images < 0) throw ValidationError("heldout_images", "must be >= 0");
    if (eval_every < 1) throw ValidationError("eval_every", "must be at least 1");
    extractor.validate();
  }

  std::size_t thread_count() const { return threads == 0 ? default_thread_count() : threads; }

  LossConfig loss_config() const { return {logit_scale, margin, literal_bg_equation, mean_normalize_hinge}; }
  BatchConfig batch_config() const { return {boxes_per_image, jitter_scale, extractor.input_size, grouping}; }
};

inline Json train_config_to_json(const TrainConfig& c) {
  return {{"images_per_batch", c.images_per_batch},
          {"boxes_per_image", c.boxes_per_image},
          {"logit_scale", c.logit_scale},
          {"margin", c.margin},
          {"jitter_scale", c.jitter_scale},
          {"phase1_lr", c.phase1_lr},
          {"lr_decay_at", c.lr_decay_at},
          {"lr_decay", c.lr_decay},
          {"phase2_lr", c.phase2_lr},
          {"phase1_iterations", c.phase1_iterations},
          {"phase2_iterations", c.phase2_iterations},
          {"novel_oversampling", c.novel_oversampling},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"seed", c.seed},
          {"crop_size", c.extractor.input_size},
          {"channels", c.extractor.channels},
          {"embedding_dim", c.extractor.embedding_dim},
          {"cgnl_stage", c.extractor.cgnl_stage},
          {"foreground_iou", c.grouping.foreground_iou},
          {"background_iou", c.grouping.background_iou},
          {"top_t", c.grouping.top_t},
          {"require_class_match", c.grouping.require_class_match},
          {"literal_bg_equation", c.literal_bg_equation},
          {"mean_normalize_hinge", c.mean_normalize_hinge},
          {"freeze_imprinted", c.freeze_imprinted},
          {"background_samples", c.background_samples},
          {"heldout_images", c.heldout_images},
          {"eval_every", c.eval_every}};
}

/// Overlays every key present in `j` onto `base`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw ValidationError("config", "top level must be an object");
  const std::set<std::string> known = [] {
    std::set<std::string> k;
    const Json defaults = train_config_to_json(TrainConfig{});
    for (const auto& [key, v] : defaults.items()) k.insert(key);
    return k;
  }();
  for (const auto& [key, v] : j.items())
    if (!known.contains(key)) throw ValidationError("config." + key, "unknown key");
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const Json::exception&) {
      throw ValidationError(std::string("config.") + key, "wrong type");
    }
  };
  get("images_per_batch", c.images_per_batch);
  get("boxes_per_image", c.boxes_per_image);
  get("logit_scale", c.logit_scale);
  get("margin", c.margin);
  get("jitter_scale", c.jitter_scale);
  get("phase1_lr", c.phase1_lr);
  get("lr_decay_at", c.lr_decay_at);
  get("lr_decay", c.lr_decay);
  get("phase2_lr", c.phase2_lr);
  get("phase1_iterations", c.phase1_iterations);
  get("phase2_iterations", c.phase2_iterations);
  get("novel_oversampling", c.novel_oversampling);
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("grad_clip_norm", c.grad_clip_norm);
  get("seed", c.seed);
  get("crop_size", c.extractor.input_size);
  get("channels", c.extractor.channels);
  get("embedding_dim", c.extractor.embedding_dim);
  get("cgnl_stage", c.extractor.cgnl_stage);
  get("foreground_iou", c.grouping.foreground_iou);
  get("background_iou", c.grouping.background_iou);
  get("top_t", c.grouping.top_t);
  get("require_class_match", c.grouping.require_class_match);
  get("literal_bg_equation", c.literal_bg_equation);
  get("mean_normalize_hinge", c.mean_normalize_hinge);
  get("freeze_imprinted", c.freeze_imprinted);
  get("background_samples", c.background_samples);
  get("heldout_images", c.heldout_images);
  get("eval_every", c.eval_every);
  c.validate();
  return c;
}

struct IterationRecord {
  int iteration = 0;
  double lr = 0.0;
  double cls = 0.0, bg = 0.0, sp = 0.0, total = 0.0;
  double grad_norm = 0.0;
};

struct Snapshot {
  int iteration = 0;
  double heldout_cls = 0.0;
  double heldout_accuracy = 0.0;  // argmax over active classes incl. background
  /// Novel-labeled crops: argmax over active foreground classes, and over
  /// all active classes including background.
  std::optional<double> heldout_novel_accuracy;
  std::optional<double> heldout_novel_accuracy_with_bg;
  /// All proposal crops (foreground, false positive, background) drawn from
  /// held-out novel images, argmax over active classes incl. background.
  std::optional<double> heldout_novel_slice_accuracy;
};

struct TrainReport {
  std::string phase;
  std::vector<IterationRecord> iterations;
  std::vector<Snapshot> snapshots;
  double wall_time_seconds = 0.0;  // excluded from reproducibility comparisons
  std::string checkpoint_path;
};

inline Json train_report_to_json(const TrainReport& r) {
  Json its = Json::array();
  for (const auto& i : r.iterations)
    its.push_back({{"iteration", i.iteration},
                   {"lr", i.lr},
                   {"cls", i.cls},
                   {"bg", i.bg},
                   {"sp", i.sp},
                   {"total", i.total},
                   {"grad_norm", i.grad_norm}});
  Json snaps = Json::array();
  for (const auto& s : r.snapshots) {
    Json j = {{"iteration", s.iteration}, {"heldout_cls", s.heldout_cls}, {"heldout_accuracy", s.heldout_accuracy}};
    j["heldout_novel_accuracy"] = s.heldout_novel_accuracy ? Json(*s.heldout_novel_accuracy) : Json(nullptr);
    j["heldout_novel_accuracy_with_bg"] =
        s.heldout_novel_accuracy_with_bg ? Json(*s.heldout_novel_accuracy_with_bg) : Json(nullptr);
    j["heldout_novel_slice_accuracy"] =
        s.heldout_novel_slice_accuracy ? Json(*s.heldout_novel_slice_accuracy) : Json(nullptr);
    snaps.push_back(std::move(j));
  }
  return {{"phase", r.phase},
          {"iterations", its},
          {"snapshots", snaps},
          {"wall_time_seconds", r.wall_time_seconds},
          {"checkpoint_path", r.checkpoint_path}};
}

/// Manifest, decoded images (manifest order) and base-detector output,
/// indexed per image.
class TrainingSet {
 public:
  TrainingSet(const DatasetManifest& manifest, const std::vector<Image>& images, const std::vector<Detection>& dets)
      : manifest_(&manifest), images_(&images), dets_(&dets) {
    if (images.size() != manifest.images.size())
      throw ValidationError("images", "one decoded image per manifest entry required");
    for (std::size_t i = 0; i < manifest.images.size(); ++i) {
      if (images[i].width != manifest.images[i].width || images[i].height != manifest.images[i].height)
        throw ValidationError(manifest.images[i].id, "decoded image size differs from the manifest");
      index_[manifest.images[i].id] = i;
    }
    gt_.resize(manifest.images.size());
    det_.resize(manifest.images.size());
    for (const auto& a : manifest.annotations) gt_[index_.at(a.image_id)].push_back(&a);
    for (const auto& d : dets) {
      auto it = index_.find(d.image_id);
      if (it == index_.end()) throw ValidationError("detections", "unknown image_id '" + d.image_id + "'");
      det_[it->second].push_back(&d);
    }
  }

  const DatasetManifest& manifest() const { return *manifest_; }
  std::size_t size() const { return manifest_->images.size(); }
  int num_classes() const { return manifest_->num_classes(); }
  const Image& image(std::size_t i) const { return (*images_)[i]; }
  const std::vector<const Annotation*>& ground_truth(std::size_t i) const { return gt_[i]; }
  const std::vector<const Detection*>& detections(std::size_t i) const { return det_[i]; }
  std::size_t index_of(const std::string& id) const { return index_.at(id); }

  /// Proposals of image i with ground truth restricted by `keep`.
  template <typename Pred>
  ImageProposals proposals(std::size_t i, Pred keep) const {
    ImageProposals p{&manifest_->images[i], &(*images_)[i], det_[i], {}};
    for (const Annotation* a : gt_[i])
      if (keep(*a)) p.ground_truth.push_back(a);
    return p;
  }

 private:
  const DatasetManifest* manifest_;
  const std::vector<Image>* images_;
  const std::vector<Detection>* dets_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<const Annotation*>> gt_;
  std::vector<std::vector<const Detection*>> det_;
};

/// Which images each phase may use under a k-shot split.
struct PhasePools {
  std::vector<std::size_t> base_train;    // no novel annotation at all
  std::vector<std::size_t> base_heldout;  // tail of the base images, phase-1 held-out loss
  std::vector<std::size_t> novel_shots;   // images holding at least one selected novel annotation
  std::vector<std::size_t> novel_heldout; // novel images without any selected annotation
  std::set<std::string> selected;         // selected novel annotation ids
};

inline PhasePools make_pools(const TrainingSet& data, const std::vector<int>& novel_class_ids,
                             const std::vector<std::string>& selected_ids, int heldout_images) {
  PhasePools p;
  p.selected.insert(selected_ids.begin(), selected_ids.end());
  auto is_novel = [&](int c) {
    return std::find(novel_class_ids.begin(), novel_class_ids.end(), c) != novel_class_ids.end();
  };
  std::vector<std::size_t> base;
  for (std::size_t i = 0; i < data.size(); ++i) {
    bool has_novel = false, has_selected = false;
    for (const Annotation* a : data.ground_truth(i)) {
      has_novel = has_novel || is_novel(a->class_id);
      has_selected = has_selected || p.selected.contains(a->id);
    }
    if (!has_novel) base.push_back(i);
    if (has_selected) p.novel_shots.push_back(i);
    if (has_novel && !has_selected) p.novel_heldout.push_back(i);
  }
  const std::size_t held = std::min(base.size() / 2, static_cast<std::size_t>(heldout_images));
  p.base_train.assign(base.begin(), base.end() - static_cast<std::ptrdiff_t>(held));
  p.base_heldout.assign(base.end() - static_cast<std::ptrdiff_t>(held), base.end());
  return p;
}

namespace detail {

struct LabeledCrops {
  std::vector<std::vector<float>> crops;
  std::vector<int> labels;
};

inline LabeledCrops to_labeled(std::vector<ProposalCrop>&& pcs) {
  LabeledCrops out;
  for (auto& p : pcs) {
    out.crops.push_back(std::move(p.crop));
    out.labels.push_back(p.label);
  }
  return out;
}

/// One SGD-with-momentum optimizer over extractor params + head weights.
class Sgd {
 public:
  Sgd(const Model& m, double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& t : m.extractor.params()) velocity_.emplace_back(t.size(), Real(0));
    velocity_.emplace_back(m.head.weights.size(), Real(0));
  }

  /// `frozen_head_rows` are left untouched (including their velocity).
  void step(Model& m, const Gradients<Real>& grads, double lr, const std::vector<int>& frozen_head_rows) {
    auto& params = m.extractor.params();
    for (std::size_t p = 0; p <= params.size(); ++p) {
      Real* w = p < params.size() ? params[p].values.data() : m.head.weights.data();
      const std::size_t n = velocity_[p].size();
      for (std::size_t i = 0; i < n; ++i) {
        if (p == params.size() && !frozen_head_rows.empty()) {
          const int row = static_cast<int>(i / static_cast<std::size_t>(m.head.weights.cols()));
          if (std::find(frozen_head_rows.begin(), frozen_head_rows.end(), row) != frozen_head_rows.end()) continue;
        }
        const Real g = grads[p][i] + static_cast<Real>(weight_decay_) * w[i];
        velocity_[p][i] = static_cast<Real>(momentum_) * velocity_[p][i] + g;
        w[i] -= static_cast<Real>(lr) * velocity_[p][i];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<Real>> velocity_;
};

struct StepResult {
  LossBreakdown<Real> loss;
  double grad_norm = 0.0;
  Gradients<Real> grads;  // extractor params, then head weights
};

/// Forward, objective and backward for one labeled batch. Per-crop work runs
/// in fixed chunks whose gradients are summed in chunk order.
inline StepResult compute_step(const Model& m, const LabeledCrops& batch, const ClassRoles& roles,
                               const LossConfig& loss_cfg, std::size_t threads) {
  using Cache = FeatureExtractor<Real>::Cache;
  const std::size_t n = batch.crops.size();
  const int d = m.extractor.embedding_dim();
  std::vector<Cache> caches(n);
  MatrixR<Real> features(static_cast<Eigen::Index>(n), d);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto emb = m.extractor.forward(std::span<const float>(batch.crops[i]), &caches[i]);
    for (int j = 0; j < d; ++j) features(static_cast<Eigen::Index>(i), j) = emb[j];
  });

  const auto obj = evaluate_objective(features, batch.labels, m.head, roles, loss_cfg);
  StepResult out;
  out.loss = obj.loss;

  const auto chunks = make_chunks(n);
  std::vector<Gradients<Real>> partial(chunks.size(), zero_gradients(m.extractor.params()));
  run_chunks(chunks, threads, [&](const ChunkRange& c) {
    std::vector<Real> d_emb(d);
    for (std::size_t i = c.begin; i < c.end; ++i) {
      for (int j = 0; j < d; ++j) d_emb[j] = obj.d_features(static_cast<Eigen::Index>(i), j);
      m.extractor.backward(caches[i], std::span<const Real>(d_emb), partial[c.index]);
      caches[i] = Cache{};
    }
  });
  out.grads = zero_gradients(m.extractor.params());
  for (const auto& p : partial)
    for (std::size_t t = 0; t < p.size(); ++t)
      for (std::size_t i = 0; i < p[t].size(); ++i) out.grads[t][i] += p[t][i];
  out.grads.emplace_back(obj.d_weights.data(), obj.d_weights.data() + obj.d_weights.size());

  double sq = 0.0;
  for (const auto& g : out.grads)
    for (Real v : g) sq += static_cast<double>(v) * v;
  out.grad_norm = std::sqrt(sq);
  return out;
}

inline bool finite(const LossBreakdown<Real>& l) {
  return std::isfinite(l.cls) && std::isfinite(l.bg) && std::isfinite(l.sp);
}

inline std::vector<std::size_t> sample_images(const std::vector<std::size_t>& pool, const std::vector<double>& weights,
                                              int n, Rng& rng) {
  std::vector<std::size_t> out;
  double total = 0.0;
  for (double w : weights) total += w;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    std::size_t pick = pool.size() - 1;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (u < weights[j]) {
        pick = j;
        break;
      }
      u -= weights[j];
    }
    out.push_back(pool[pick]);
  }
  return out;
}

}  // namespace detail

/// Mean cross-entropy and accuracy of `model` on fixed labeled crops.
inline Snapshot measure(const Model& model, const detail::LabeledCrops& crops, const ClassRoles& roles,
                        std::size_t threads, int iteration) {
  Snapshot s;
  s.iteration = iteration;
  if (crops.crops.empty()) return s;
  const auto features = model.extractor.extract_features(crops.crops, threads);
  const MatrixR<Real> z = normalize_rows(features);
  const auto batch = make_labeled_batch(z, crops.labels, model.head, roles);
  s.heldout_cls = loss_cls(batch, model.head.logit_scale);
  const MatrixR<Real> logits = cosine_logits(z, model.head);
  const int k = model.num_classes();
  auto argmax = [&](int b, bool with_bg) {
    int best = -1;
    for (int c = 0; c <= k; ++c)
      if (roles.active(c) && (with_bg || c < k) && (best < 0 || logits(b, c) > logits(b, best))) best = c;
    return best;
  };
  int correct = 0, novel_total = 0, novel_fg = 0, novel_bg = 0;
  for (int b = 0; b < batch.size(); ++b) {
    const int label = crops.labels[b];
    correct += argmax(b, true) == label;
    if (label < k && roles.is_novel(label)) {
      ++novel_total;
      novel_fg += argmax(b, false) == label;
      novel_bg += argmax(b, true) == label;
    }
  }
  s.heldout_accuracy = static_cast<double>(correct) / batch.size();
  if (novel_total > 0) {
    s.heldout_novel_accuracy = static_cast<double>(novel_fg) / novel_total;
    s.heldout_novel_accuracy_with_bg = static_cast<double>(novel_bg) / novel_total;
  }
  return s;
}

/// Foreground/false-positive/background crops of held-out images (all their
/// annotations visible), built once from a fixed seed.
inline detail::LabeledCrops heldout_proposal_crops(const TrainingSet& data, const std::vector<std::size_t>& images,
                                                   const TrainConfig& cfg, std::string_view key) {
  std::vector<ImageProposals> imgs;
  for (std::size_t i : images) imgs.push_back(data.proposals(i, [](const Annotation&) { return true; }));
  if (imgs.empty()) return {};
  return detail::to_labeled(build_batch(imgs, data.num_classes(), cfg.batch_config(), derive_seed(cfg.seed, key)));
}

/// Crops of novel annotations that were NOT selected as shots: the plain
/// ground-truth box plus `views - 1` jittered copies, from a fixed seed.
inline detail::LabeledCrops heldout_novel_crops(const TrainingSet& data, const std::vector<int>& novel_class_ids,
                                                const std::set<std::string>& selected, const TrainConfig& cfg,
                                                int views = 4) {
  detail::LabeledCrops out;
  const int size = cfg.extractor.input_size;
  for (const auto& a : data.manifest().annotations) {
    if (std::find(novel_class_ids.begin(), novel_class_ids.end(), a.class_id) == novel_class_ids.end()) continue;
    if (selected.contains(a.id)) continue;
    const Image& img = data.image(data.index_of(a.image_id));
    Rng rng(derive_seed(derive_seed(cfg.seed, "heldout-novel"), a.id));
    for (int v = 0; v < views; ++v) {
      BoundingBox box = a.box;
      if (v > 0 && cfg.jitter_scale > 0.0) box = jitter_box(a.box, cfg.jitter_scale, img.width, img.height, rng);
      if (box.area() < 1.0) continue;
      out.crops.push_back(crop_and_resize(img, box, size));
      out.labels.push_back(a.class_id);
    }
  }
  return out;
}

namespace detail {

struct PhaseSpec {
  std::string name;
  int iterations;
  std::vector<std::size_t> pool;
  std::vector<double> weights;
  ClassRoles roles;
  std::function<bool(std::size_t image, const Annotation&)> keep_gt;
  std::function<double(int iteration)> lr;
  std::vector<int> frozen_rows;
  LabeledCrops heldout;
  LabeledCrops novel_slice;
  ClassRoles heldout_roles;
};

inline Snapshot snapshot(const Model& model, const PhaseSpec& spec, std::size_t threads, int iteration) {
  Snapshot s = measure(model, spec.heldout, spec.heldout_roles, threads, iteration);
  if (!spec.novel_slice.crops.empty())
    s.heldout_novel_slice_accuracy = measure(model, spec.novel_slice, spec.heldout_roles, threads, iteration).heldout_accuracy;
  return s;
}

inline TrainReport run_phase(Model& model, const TrainingSet& data, const TrainConfig& cfg, const PhaseSpec& spec) {
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.phase = spec.name;
  const std::size_t threads = cfg.thread_count();
  if (spec.pool.empty() && spec.iterations > 0)
    throw ValidationError(spec.name, "no training images available for this phase");
  Sgd opt(model, cfg.momentum, cfg.weight_decay);
  const auto loss_cfg = cfg.loss_config();
  const auto batch_cfg = cfg.batch_config();
  const std::uint64_t phase_seed = derive_seed(cfg.seed, spec.name);

  report.snapshots.push_back(snapshot(model, spec, threads, 0));
  for (int it = 0; it < spec.iterations; ++it) {
    const std::uint64_t batch_seed = derive_seed(phase_seed, static_cast<std::uint64_t>(it));
    Rng rng(batch_seed);
    const auto picks = sample_images(spec.pool, spec.weights, cfg.images_per_batch, rng);
    std::vector<ImageProposals> imgs;
    for (std::size_t i : picks)
      imgs.push_back(data.proposals(i, [&](const Annotation& a) { return spec.keep_gt(i, a); }));
    auto crops = build_batch(imgs, data.num_classes(), batch_cfg, rng.next_u64());
    if (crops.empty()) continue;
    const auto batch = to_labeled(std::move(crops));
    auto step = compute_step(model, batch, spec.roles, loss_cfg, threads);
    if (!finite(step.loss) || !std::isfinite(step.grad_norm))
      throw DivergenceError(batch_seed, static_cast<std::size_t>(it), spec.name + ": non-finite loss");
    if (cfg.grad_clip_norm > 0.0 && step.grad_norm > cfg.grad_clip_norm) {
      const Real scale = static_cast<Real>(cfg.grad_clip_norm / step.grad_norm);
      for (auto& g : step.grads)
        for (auto& v : g) v *= scale;
    }
    const double lr = spec.lr(it);
    opt.step(model, step.grads, lr, spec.frozen_rows);
    report.iterations.push_back({it, lr, step.loss.cls, step.loss.bg, step.loss.sp, step.loss.total(), step.grad_norm});
    if ((it + 1) % cfg.eval_every == 0 || it + 1 == spec.iterations)
      report.snapshots.push_back(snapshot(model, spec, threads, it + 1));
  }
  report.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace detail

/// Fresh model with novel classes inactive.
inline Model initial_model(const TrainConfig& cfg, const DatasetManifest& manifest,
                           const std::vector<int>& novel_class_ids) {
  cfg.validate();
  return make_model<Real>(cfg.extractor, manifest.class_names, novel_class_ids, static_cast<Real>(cfg.logit_scale),
                          derive_seed(cfg.seed, "init"));
}

inline ClassRoles phase1_roles(const Model& m) {
  return ClassRoles::from_novel_ids(m.num_classes(), m.novel_class_ids, false);
}
inline ClassRoles phase2_roles(const Model& m) {
  return ClassRoles::from_novel_ids(m.num_classes(), m.novel_class_ids, true);
}

/// Phase 1: extractor, non-local block and head trained on base images
/// (images without any novel annotation) over base classes + background.
inline std::pair<Model, TrainReport> train_phase1(const TrainingSet& data, const std::vector<int>& novel_class_ids,
                                                  const TrainConfig& cfg) {
  cfg.validate();
  Model model = initial_model(cfg, data.manifest(), novel_class_ids);
  const auto pools = make_pools(data, novel_class_ids, {}, cfg.heldout_images);
  const auto roles = phase1_roles(model);
  detail::PhaseSpec spec;
  spec.name = "phase1";
  spec.iterations = cfg.phase1_iterations;
  spec.pool = pools.base_train;
  spec.weights.assign(spec.pool.size(), 1.0);
  spec.roles = roles;
  spec.keep_gt = [](std::size_t, const Annotation&) { return true; };
  const int decay_at = static_cast<int>(std::floor(cfg.lr_decay_at * cfg.phase1_iterations));
  spec.lr = [&cfg, decay_at](int it) { return it >= decay_at ? cfg.phase1_lr * cfg.lr_decay : cfg.phase1_lr; };
  spec.heldout = heldout_proposal_crops(data, pools.base_heldout, cfg, "heldout");
  spec.heldout_roles = roles;
  auto report = detail::run_phase(model, data, cfg, spec);
  model.stage = "phase1";
  return {std::move(model), std::move(report)};
}

/// Novel rows imprinted from the selected shots (ground-truth boxes cropped
/// directly); background row re-inferred from background proposals pooled
/// from base and novel-shot images, balanced between the two sources.
inline Model imprint_and_infer(const Model& phase1, const TrainingSet& data, const KShotSplit& split,
                               const TrainConfig& cfg) {
  cfg.validate();
  const int size = phase1.extractor.config().input_size;
  const std::size_t threads = cfg.thread_count();
  Model out = phase1;
  std::set<std::string> selected(split.selected_novel_annotation_ids.begin(), split.selected_novel_annotation_ids.end());

  std::vector<std::pair<int, MatrixR<Real>>> shots;
  for (int c : split.novel_class_ids) {
    std::vector<std::vector<float>> crops;
    for (const auto& id : split.selected_novel_annotation_ids)
      for (const auto& a : data.manifest().annotations)
        if (a.id == id && a.class_id == c) crops.push_back(crop_and_resize(data.image(data.index_of(a.image_id)), a.box, size));
    if (crops.empty())
      throw ValidationError("class " + std::to_string(c), "no shot available for novel class");
    shots.emplace_back(c, normalize_rows(phase1.extractor.extract_features(crops, threads)));
  }
  out.head = imprint_novel_weights(phase1.head, shots);

  // Background proposals (IoU < background_iou with every ground truth).
  const auto pools = make_pools(data, split.novel_class_ids, split.selected_novel_annotation_ids, cfg.heldout_images);
  auto collect = [&](const std::vector<std::size_t>& images, std::uint64_t key) {
    std::vector<std::pair<std::size_t, const Detection*>> found;
    for (std::size_t i : images) {
      std::vector<const Detection*> top;
      for (std::size_t t : top_t_indices(
               [&] {
                 std::vector<Detection> v;
                 for (const Detection* d : data.detections(i)) v.push_back(*d);
                 return v;
               }(),
               [&] {
                 std::vector<std::size_t> idx(data.detections(i).size());
                 for (std::size_t q = 0; q < idx.size(); ++q) idx[q] = q;
                 return idx;
               }(),
               cfg.grouping.top_t))
        top.push_back(data.detections(i)[t]);
      const auto groups = group_proposals(top, data.ground_truth(i), data.num_classes(), cfg.grouping);
      for (std::size_t g = 0; g < groups.size(); ++g)
        if (groups[g].group == ProposalGroup::kBackground && top[g]->box.area() >= 1.0) found.emplace_back(i, top[g]);
    }
    Rng rng(derive_seed(cfg.seed, key));
    const std::size_t want = std::min(found.size(), static_cast<std::size_t>((cfg.background_samples + 1) / 2));
    for (std::size_t q = 0; q < want; ++q) std::swap(found[q], found[q + rng.index(found.size() - q)]);
    found.resize(want);
    std::vector<std::vector<float>> crops;
    for (const auto& [i, d] : found) crops.push_back(crop_and_resize(data.image(i), d->box, size));
    if (crops.empty()) return MatrixR<Real>(0, phase1.extractor.embedding_dim());
    return MatrixR<Real>(normalize_rows(phase1.extractor.extract_features(crops, threads)));
  };
  const MatrixR<Real> bg_base = collect(pools.base_train, hash_string("bg-base"));
  const MatrixR<Real> bg_novel = collect(pools.novel_shots, hash_string("bg-novel"));
  out.head = infer_background_weight(out.head, bg_base, bg_novel);
  out.stage = "imprinted";
  return out;
}

/// Phase 2: all parameters fine-tuned on base images plus the novel-shot
/// images, the latter drawn `novel_oversampling` times as often as a base
/// image. Unselected novel annotations are invisible to training.
inline std::pair<Model, TrainReport> train_phase2(const Model& imprinted, const TrainingSet& data,
                                                  const KShotSplit& split, TrainConfig cfg) {
  cfg.extractor = imprinted.extractor.config();
  cfg.validate();
  Model model = imprinted;
  const auto pools = make_pools(data, split.novel_class_ids, split.selected_novel_annotation_ids, cfg.heldout_images);
  detail::PhaseSpec spec;
  spec.name = "phase2";
  spec.iterations = cfg.phase2_iterations;
  spec.pool = pools.base_train;
  spec.weights.assign(spec.pool.size(), 1.0);
  for (std::size_t i : pools.novel_shots) {
    spec.pool.push_back(i);
    spec.weights.push_back(cfg.novel_oversampling);
  }
  spec.roles = phase2_roles(model);
  const auto& selected = pools.selected;
  spec.keep_gt = [&selected, &split](std::size_t, const Annotation& a) {
    return !split.is_novel(a.class_id) || selected.contains(a.id);
  };
  spec.lr = [&cfg](int) { return cfg.phase2_lr; };
  if (cfg.freeze_imprinted) spec.frozen_rows = split.novel_class_ids;
  spec.heldout = heldout_proposal_crops(data, pools.base_heldout, cfg, "heldout");
  spec.novel_slice = heldout_proposal_crops(data, pools.novel_heldout, cfg, "heldout-novel-slice");
  auto novel_crops = heldout_novel_crops(data, split.novel_class_ids, selected, cfg);
  for (std::size_t i = 0; i < novel_crops.crops.size(); ++i) {
    spec.heldout.crops.push_back(std::move(novel_crops.crops[i]));
    spec.heldout.labels.push_back(novel_crops.labels[i]);
  }
  spec.heldout_roles = spec.roles;
  auto report = detail::run_phase(model, data, cfg, spec);
  model.stage = "phase2";
  return {std::move(model), std::move(report)};
}

}  // namespace lscn
