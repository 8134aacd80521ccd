#pragma once

#include <string>
#include <vector>

#include "lscn/datamodel.hpp"
#include "lscn/detsim.hpp"
#include "lscn/eval.hpp"
#include "lscn/fusion.hpp"
#include "lscn/trainer.hpp"

namespace lscn {

/// Synthetic low-shot benchmark: 12 base + 4 novel classes, novel classes
/// only in rare images of the training set, uniform classes in the test set,
/// degraded-novel detector noise on both.
struct BenchmarkConfig {
  SceneSpec train_scene;
  SceneSpec test_scene;
  int train_images = 200;
  int test_images = 100;
  std::uint64_t train_seed = 7;
  std::uint64_t test_seed = 8;
  std::uint64_t detector_seed = 11;
  std::uint64_t split_seed = 3;
  std::vector<int> novel_class_ids{12, 13, 14, 15};
  std::vector<int> shots{1, 5};
  double base_accuracy = 0.8;
  double novel_accuracy = 0.3;
  TrainConfig train;

  BenchmarkConfig() {
    train_scene.num_classes = 16;
    train_scene.rare_classes = novel_class_ids;
    train_scene.rare_image_fraction = 0.25;
    test_scene = train_scene;
    test_scene.rare_classes.clear();
    test_scene.rare_image_fraction = 0.0;
    train.extractor.input_size = 32;
  }

  DetectorNoise noise() const {
    return DetectorNoise::degraded_novel(train_scene.num_classes, novel_class_ids, base_accuracy, novel_accuracy);
  }
};

struct ShotResult {
  int k = 0;
  TrainReport phase2;
  EvalReport imprinted;
  EvalReport refined;
};

struct BenchmarkResult {
  TrainReport phase1;
  EvalReport baseline;
  std::vector<ShotResult> shots;
};

struct BenchmarkData {
  SyntheticDataset train, test;
  std::vector<Detection> train_detections, test_detections;
};

inline BenchmarkData make_benchmark_data(const BenchmarkConfig& cfg) {
  BenchmarkData d;
  d.train = generate_dataset(cfg.train_scene, cfg.train_images, cfg.train_seed);
  d.test = generate_dataset(cfg.test_scene, cfg.test_images, cfg.test_seed);
  const auto noise = cfg.noise();
  d.train_detections = simulate_detections(d.train.manifest, noise, cfg.novel_class_ids, cfg.detector_seed);
  d.test_detections = simulate_detections(d.test.manifest, noise, cfg.novel_class_ids, derive_seed(cfg.detector_seed, 1));
  return d;
}

/// Refines every detection of `dets` (manifest order) and returns the fused
/// detections.
inline std::vector<Detection> refine_all(const Model& model, const DatasetManifest& manifest,
                                         const std::vector<Image>& images, const std::vector<Detection>& dets,
                                         std::size_t threads = 1) {
  const auto by_image = detections_by_image(dets);
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (std::size_t i = 0; i < manifest.images.size(); ++i) {
    auto it = by_image.find(manifest.images[i].id);
    if (it == by_image.end()) continue;
    std::vector<Detection> mine;
    for (std::size_t j : it->second) mine.push_back(dets[j]);
    for (const auto& r : refine_detections(images[i], mine, model, 64, threads)) out.push_back(r.fused());
  }
  return out;
}

inline BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, const BenchmarkData& data) {
  BenchmarkResult r;
  const TrainingSet set(data.train.manifest, data.train.images, data.train_detections);
  r.baseline = evaluate(data.test_detections, data.test.manifest, cfg.novel_class_ids);
  auto [phase1, report1] = train_phase1(set, cfg.novel_class_ids, cfg.train);
  r.phase1 = std::move(report1);
  for (int k : cfg.shots) {
    const auto split = make_kshot_split(data.train.manifest, cfg.novel_class_ids, k, cfg.split_seed);
    const Model imprinted = imprint_and_infer(phase1, set, split, cfg.train);
    auto [tuned, report2] = train_phase2(imprinted, set, split, cfg.train);
    ShotResult s;
    s.k = k;
    s.phase2 = std::move(report2);
    const std::size_t threads = cfg.train.thread_count();
    s.imprinted = evaluate(refine_all(imprinted, data.test.manifest, data.test.images, data.test_detections, threads),
                           data.test.manifest, cfg.novel_class_ids);
    s.refined = evaluate(refine_all(tuned, data.test.manifest, data.test.images, data.test_detections, threads),
                         data.test.manifest, cfg.novel_class_ids);
    r.shots.push_back(std::move(s));
  }
  return r;
}

/// Metrics only (no wall times): equal across reproducible runs.
inline Json benchmark_metrics_to_json(const BenchmarkResult& r) {
  auto strip = [](const TrainReport& t) {
    Json j = train_report_to_json(t);
    j.erase("wall_time_seconds");
    return j;
  };
  Json shots = Json::array();
  for (const auto& s : r.shots)
    shots.push_back({{"k", s.k},
                     {"phase2", strip(s.phase2)},
                     {"imprinted", eval_report_to_json(s.imprinted)},
                     {"refined", eval_report_to_json(s.refined)}});
  return {{"phase1", strip(r.phase1)}, {"baseline", eval_report_to_json(r.baseline)}, {"shots", shots}};
}

}  // namespace lscn
