#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"

using namespace lscn;
using namespace lscn::testing;

namespace {

struct TrainWorld {
  SyntheticDataset data;
  std::vector<Detection> dets;
  std::vector<int> novel{5};
};

const TrainWorld& train_world() {
  static const TrainWorld w = [] {
    TrainWorld t;
    auto spec = small_scene(6);
    spec.rare_classes = {5};
    spec.rare_image_fraction = 0.3;
    t.data = generate_dataset(spec, 30, 4);
    t.dets = simulate_detections(t.data.manifest, DetectorNoise::degraded_novel(6, {5}), {5}, 2);
    return t;
  }();
  return w;
}

TrainingSet training_set() {
  const auto& w = train_world();
  return TrainingSet(w.data.manifest, w.data.images, w.dets);
}

std::vector<std::vector<float>> probe_crops(const TrainWorld& w, int size) {
  std::vector<std::vector<float>> crops;
  for (std::size_t i = 0; i < 6; ++i) crops.push_back(crop_and_resize(w.data.images[i], w.dets[i].box, size));
  return crops;
}

void expect_same_model(const Model& a, const Model& b) {
  const auto ta = a.tensors(), tb = b.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].values, tb[i].values) << ta[i].name;
}

}  // namespace

TEST(TrainConfig, DefaultsMatchPublishedSetup) {
  const TrainConfig c;
  EXPECT_EQ(c.images_per_batch, 4);
  EXPECT_EQ(c.boxes_per_image, 32);
  EXPECT_EQ(c.grouping.top_t, 300);
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfig, JsonRoundTripAndRejections) {
  TrainConfig c = tiny_train_config();
  c.margin = 0.35;
  c.seed = 99;
  c.grouping.require_class_match = true;
  const auto back = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
  EXPECT_THROW(train_config_from_json(Json{{"learning_rate", 0.1}}), ValidationError);
  EXPECT_THROW(train_config_from_json(Json{{"margin", "wide"}}), ValidationError);
  EXPECT_THROW(train_config_from_json(Json{{"margin", -1.0}}), ValidationError);
  EXPECT_THROW(train_config_from_json(Json::array()), ValidationError);
  // Overlay keeps fields that are absent.
  EXPECT_EQ(train_config_from_json(Json{{"seed", 5}}, c).margin, 0.35);
}

TEST(Trainer, ZeroIterationsLeaveInitialModel) {
  auto cfg = tiny_train_config();
  cfg.phase1_iterations = 0;
  const auto set = training_set();
  const auto [model, report] = train_phase1(set, train_world().novel, cfg);
  expect_same_model(model, initial_model(cfg, train_world().data.manifest, train_world().novel));
  EXPECT_TRUE(report.iterations.empty());
  EXPECT_EQ(model.stage, "phase1");
}

TEST(Trainer, SingleThreadRunsAreBitwiseIdentical) {
  auto cfg = tiny_train_config();
  const auto set = training_set();
  const auto a = train_phase1(set, train_world().novel, cfg);
  const auto b = train_phase1(set, train_world().novel, cfg);
  expect_same_model(a.first, b.first);
  EXPECT_EQ(train_report_to_json(a.second)["iterations"], train_report_to_json(b.second)["iterations"]);
  cfg.seed = 2;
  const auto c = train_phase1(set, train_world().novel, cfg);
  EXPECT_NE(a.first.tensors().back().values, c.first.tensors().back().values);
}

TEST(Trainer, LossesAreFiniteAndRecorded) {
  const auto cfg = tiny_train_config();
  const auto [model, report] = train_phase1(training_set(), train_world().novel, cfg);
  ASSERT_EQ(report.iterations.size(), 4u);
  for (const auto& it : report.iterations) {
    EXPECT_TRUE(std::isfinite(it.total));
    EXPECT_NEAR(it.total, it.cls + it.bg + it.sp, 1e-5 * (1.0 + std::abs(it.total)));
    EXPECT_EQ(it.sp, 0.0);  // no novel class is active in phase 1
  }
  EXPECT_EQ(report.snapshots.size(), 3u);
}

TEST(Trainer, ImprintLeavesBaseRowsAndNormalizesNovelRows) {
  const auto cfg = tiny_train_config();
  const auto set = training_set();
  const auto& w = train_world();
  const auto phase1 = train_phase1(set, w.novel, cfg).first;
  const auto split = make_kshot_split(w.data.manifest, w.novel, 2, 1);
  const auto imprinted = imprint_and_infer(phase1, set, split, cfg);
  EXPECT_EQ(imprinted.stage, "imprinted");
  for (int c = 0; c < 5; ++c) EXPECT_EQ(imprinted.head.weights.row(c), phase1.head.weights.row(c)) << c;
  EXPECT_NEAR(imprinted.head.weights.row(5).norm(), 1.0, 1e-6);
  EXPECT_NEAR(imprinted.head.weights.row(6).norm(), 1.0, 1e-6);
  const auto ta = imprinted.extractor.params(), tb = phase1.extractor.params();
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].values, tb[i].values);

  const auto [tuned, report] = train_phase2(imprinted, set, split, cfg);
  EXPECT_EQ(tuned.stage, "phase2");
  EXPECT_EQ(report.iterations.size(), 3u);
  ASSERT_FALSE(report.snapshots.empty());
  EXPECT_TRUE(report.snapshots.back().heldout_novel_slice_accuracy.has_value());
}

TEST(Trainer, FrozenImprintedRowsStayFixed) {
  auto cfg = tiny_train_config();
  cfg.freeze_imprinted = true;
  const auto set = training_set();
  const auto& w = train_world();
  const auto split = make_kshot_split(w.data.manifest, w.novel, 1, 1);
  const auto imprinted = imprint_and_infer(train_phase1(set, w.novel, cfg).first, set, split, cfg);
  const auto tuned = train_phase2(imprinted, set, split, cfg).first;
  EXPECT_EQ(tuned.head.weights.row(5), imprinted.head.weights.row(5));
  EXPECT_NE(tuned.head.weights.row(0), imprinted.head.weights.row(0));
}

TEST(Trainer, ThreadCountDoesNotChangeInference) {
  const auto cfg = tiny_train_config();
  const auto model = train_phase1(training_set(), train_world().novel, cfg).first;
  const auto crops = probe_crops(train_world(), cfg.extractor.input_size);
  EXPECT_EQ(model.extractor.extract_features(crops, 1), model.extractor.extract_features(crops, 4));
}

TEST(Checkpoint, RoundTripGivesIdenticalOutputs) {
  const auto cfg = tiny_train_config();
  const auto model = train_phase1(training_set(), train_world().novel, cfg).first;
  const auto dir = std::filesystem::temp_directory_path() / "lscn_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "model.json").string();
  save_checkpoint(model, path);
  const auto back = load_checkpoint<Real>(path);
  expect_same_model(model, back);
  EXPECT_EQ(back.class_names, model.class_names);
  EXPECT_EQ(back.novel_class_ids, model.novel_class_ids);
  EXPECT_EQ(back.stage, model.stage);
  const auto crops = probe_crops(train_world(), cfg.extractor.input_size);
  const auto a = model.probabilities(model.extractor.extract_features(crops, 1));
  const auto b = back.probabilities(back.extractor.extract_features(crops, 1));
  EXPECT_EQ(a, b);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsMalformedFiles) {
  const auto cfg = tiny_train_config();
  const auto model = initial_model(cfg, train_world().data.manifest, train_world().novel);
  auto j = checkpoint_to_json(model);
  j["format"] = "other";
  EXPECT_THROW(checkpoint_from_json<Real>(j), ValidationError);
  j = checkpoint_to_json(model);
  j["tensors"].erase(0);
  EXPECT_THROW(checkpoint_from_json<Real>(j), ValidationError);
  EXPECT_THROW(load_checkpoint<Real>("/nonexistent/model.json"), ValidationError);
}

TEST(Trainer, PhaseOneReducesHeldOutLoss) {
  const auto& w = train_world();
  auto cfg = tiny_train_config();
  cfg.extractor.input_size = 24;
  cfg.extractor.channels = {8, 16, 32};
  cfg.extractor.embedding_dim = 32;
  cfg.extractor.cgnl_stage = 3;
  cfg.boxes_per_image = 16;
  cfg.phase1_iterations = 250;
  cfg.eval_every = 250;
  cfg.heldout_images = 6;
  const auto report = train_phase1(training_set(), w.novel, cfg).second;
  ASSERT_EQ(report.snapshots.size(), 2u);
  const double before = report.snapshots.front().heldout_cls;
  const double after = report.snapshots.back().heldout_cls;
  EXPECT_LT(after, 0.7 * before) << before << " -> " << after;
  EXPECT_GT(report.snapshots.back().heldout_accuracy, report.snapshots.front().heldout_accuracy);
}
