#include <gtest/gtest.h>

#include "support.hpp"

using namespace lscn;
using namespace lscn::testing;

namespace {

struct FusionWorld {
  SyntheticDataset data;
  std::vector<Detection> dets;  // image 0 only
  CorrectionModel<float> model;
};

FusionWorld fusion_world() {
  auto data = generate_dataset(small_scene(5), 2, 8);
  auto all = simulate_detections(data.manifest, DetectorNoise::degraded_novel(5, {4}), {4}, 3);
  std::vector<Detection> dets;
  for (const auto& d : all)
    if (d.image_id == data.manifest.images[0].id) dets.push_back(d);
  ExtractorConfig cfg;
  cfg.input_size = 12;
  cfg.channels = {4, 8};
  cfg.embedding_dim = 6;
  cfg.cgnl_stage = 2;
  auto model = make_model<float>(cfg, data.manifest.class_names, {4}, 8.0f, 5);
  return {std::move(data), std::move(dets), std::move(model)};
}

}  // namespace

TEST(Fusion, FusedScoreIsExactProduct) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const int k = rng.integer(1, 8);
    std::vector<double> base(k), probs(k + 1);
    for (auto& v : base) v = rng.uniform();
    double s = 0;
    for (auto& v : probs) s += (v = rng.uniform());
    for (auto& v : probs) v /= s;
    const auto fused = fuse_scores(base, probs);
    ASSERT_EQ(fused.size(), base.size());
    for (int c = 0; c < k; ++c) {
      EXPECT_EQ(fused[c], base[c] * probs[c]);
      EXPECT_LE(fused[c], base[c]);
    }
  }
  EXPECT_THROW(fuse_scores(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}), ValidationError);
}

TEST(Fusion, RefinementKeepsBoxesAndFusesExactly) {
  const auto w = fusion_world();
  ASSERT_FALSE(w.dets.empty());
  const auto refined = refine_detections(w.data.images[0], w.dets, w.model);
  ASSERT_EQ(refined.size(), w.dets.size());
  for (std::size_t i = 0; i < refined.size(); ++i) {
    const auto& r = refined[i];
    EXPECT_TRUE(r.refined);
    EXPECT_EQ(r.original, w.dets[i]);
    EXPECT_EQ(r.fused().box, w.dets[i].box);
    EXPECT_EQ(r.fused().image_id, w.dets[i].image_id);
    ASSERT_EQ(r.lscn_probs.size(), 6u);
    double sum = 0;
    for (double p : r.lscn_probs) sum += p;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(r.fused_scores[c], w.dets[i].scores[c] * r.lscn_probs[c]);
      EXPECT_LE(r.fused_scores[c], w.dets[i].scores[c]);
    }
  }
}

TEST(Fusion, BatchingAndThreadsDoNotChangeScores) {
  const auto w = fusion_world();
  const auto ref = refine_detections(w.data.images[0], w.dets, w.model, 64, 1);
  for (auto [batch, threads] : {std::pair<std::size_t, std::size_t>{1, 1}, {3, 1}, {2, 3}, {64, 4}}) {
    const auto other = refine_detections(w.data.images[0], w.dets, w.model, batch, threads);
    for (std::size_t i = 0; i < ref.size(); ++i)
      for (std::size_t c = 0; c < ref[i].lscn_probs.size(); ++c)
        EXPECT_NEAR(other[i].lscn_probs[c], ref[i].lscn_probs[c], 1e-6) << batch << "/" << threads;
  }
}

TEST(Fusion, DegenerateBoxesPassThrough) {
  auto w = fusion_world();
  w.dets.push_back({w.dets[0].image_id, {5, 5, 5.5, 5.5}, w.dets[0].scores});
  const auto refined = refine_detections(w.data.images[0], w.dets, w.model);
  EXPECT_FALSE(refined.back().refined);
  EXPECT_TRUE(refined.back().lscn_probs.empty());
  EXPECT_EQ(refined.back().fused_scores, w.dets.back().scores);
  EXPECT_TRUE(refined.front().refined);
}

TEST(Fusion, RejectsScoreLengthMismatch) {
  auto w = fusion_world();
  w.dets[0].scores.push_back(0.0);
  EXPECT_THROW(refine_detections(w.data.images[0], w.dets, w.model), ValidationError);
  EXPECT_THROW(refine_detections(w.data.images[0], {}, w.model, 0), ValidationError);
}

TEST(Fusion, JsonCarriesBaseAndCorrectionScores) {
  const auto w = fusion_world();
  const auto refined = refine_detections(w.data.images[0], w.dets, w.model);
  const auto j = refined_to_json(refined);
  ASSERT_EQ(j.size(), refined.size());
  EXPECT_EQ(j[0]["base_scores"].get<std::vector<double>>(), w.dets[0].scores);
  EXPECT_EQ(j[0]["lscn_probs"].get<std::vector<double>>(), refined[0].lscn_probs);
}

TEST(Nms, KeepsHighestScoringBoxPerCluster) {
  const std::vector<Detection> dets = {
      {"a", {0, 0, 10, 10}, {0.5, 0.1}},
      {"a", {1, 0, 11, 10}, {0.1, 0.9}},
      {"a", {30, 30, 40, 40}, {0.3, 0.0}},
      {"b", {0, 0, 10, 10}, {0.2, 0.0}},
  };
  EXPECT_EQ(greedy_nms(dets, 0.5), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(greedy_nms(dets, 0.95), (std::vector<std::size_t>{0, 1, 2, 3}));
}
