#include <gtest/gtest.h>

#include "support.hpp"

using namespace lscn;
using namespace lscn::testing;

TEST(Detsim, DatasetIsDeterministicAndSeedDependent) {
  const auto spec = small_scene();
  const auto a = generate_dataset(spec, 6, 3);
  const auto b = generate_dataset(spec, 6, 3);
  const auto c = generate_dataset(spec, 6, 4);
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_EQ(a.images, b.images);
  EXPECT_NE(a.manifest, c.manifest);
}

TEST(Detsim, DatasetSatisfiesManifestInvariants) {
  auto spec = small_scene(8);
  spec.rare_classes = {6, 7};
  spec.rare_image_fraction = 0.3;
  const auto ds = generate_dataset(spec, 60, 11);
  EXPECT_NO_THROW(validate_manifest(ds.manifest));
  EXPECT_EQ(ds.manifest.num_classes(), 8);
  EXPECT_EQ(ds.images.size(), 60u);
  std::map<std::string, int> rare_per_image;
  for (const auto& a : ds.manifest.annotations) {
    EXPECT_GE(a.box.x1, 0.0);
    EXPECT_LE(a.box.x2, spec.canvas_width);
    EXPECT_GE(a.box.width(), spec.min_object_size - 1e-9);
    if (a.class_id >= 6) ++rare_per_image[a.image_id];
  }
  for (const auto& [id, n] : rare_per_image) EXPECT_EQ(n, 1) << id;
  EXPECT_GT(rare_per_image.size(), 5u);
  EXPECT_LT(rare_per_image.size(), 35u);
  for (const auto& img : ds.images)
    for (float v : img.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Detsim, SceneSpecValidation) {
  auto s = small_scene();
  s.num_classes = 1;
  EXPECT_THROW(generate_dataset(s, 1, 1), ValidationError);
  s = small_scene();
  s.min_object_size = 100;
  s.max_object_size = 120;
  EXPECT_THROW(generate_dataset(s, 1, 1), ValidationError);
  s = small_scene();
  s.rare_classes = {9};
  EXPECT_THROW(generate_dataset(s, 1, 1), ValidationError);
}

TEST(Detsim, NoiselessDetectorGivesPerfectAp50) {
  const auto ds = generate_dataset(small_scene(6), 30, 2);
  const auto dets = simulate_detections(ds.manifest, DetectorNoise::noiseless(6), {4, 5}, 1);
  EXPECT_EQ(dets.size(), ds.manifest.annotations.size());
  for (int c = 0; c < 6; ++c) {
    const auto ap = average_precision(dets, ds.manifest.annotations, c, 0.5);
    ASSERT_TRUE(ap.has_value());
    EXPECT_EQ(*ap, 1.0) << "class " << c;
  }
}

TEST(Detsim, ScoresAreValidProbabilitiesOfLengthK) {
  const auto ds = generate_dataset(small_scene(6), 20, 2);
  const auto noise = DetectorNoise::degraded_novel(6, {4, 5});
  for (const auto& row : noise.confusion) {
    double s = 0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const auto dets = simulate_detections(ds.manifest, noise, {4, 5}, 3);
  const auto idx = image_index(ds.manifest);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_NO_THROW(validate_detection(dets[i], i, 6, idx));
    double sum = 0;
    for (double v : dets[i].scores) sum += v;
    EXPECT_LE(sum, 1.0 + 1e-9);
  }
}

TEST(Detsim, SimulationDeterministicUnderSeed) {
  const auto ds = generate_dataset(small_scene(6), 10, 2);
  const auto noise = DetectorNoise::degraded_novel(6, {5});
  EXPECT_EQ(simulate_detections(ds.manifest, noise, {5}, 7), simulate_detections(ds.manifest, noise, {5}, 7));
  EXPECT_NE(simulate_detections(ds.manifest, noise, {5}, 7), simulate_detections(ds.manifest, noise, {5}, 8));
}

TEST(Detsim, FalsePositiveCountMatchesRate) {
  const auto ds = generate_dataset(small_scene(4), 3000, 5);
  auto noise = DetectorNoise::noiseless(4);
  noise.false_positive_rate = 2.5;
  noise.near_miss_fraction = 0.0;
  const auto dets = simulate_detections(ds.manifest, noise, {}, 9);
  const double n = ds.manifest.images.size();
  const double fp = double(dets.size() - ds.manifest.annotations.size());
  EXPECT_NEAR(fp / n, 2.5, 4 * std::sqrt(2.5 / n));
}

TEST(Detsim, DegradedNovelClassesAreMostlyMisclassified) {
  const auto ds = generate_dataset(small_scene(6), 400, 5);
  auto noise = DetectorNoise::degraded_novel(6, {5}, 0.8, 0.3);
  noise.false_positive_rate = 0.0;
  const auto dets = simulate_detections(ds.manifest, noise, {5}, 1);
  int novel = 0, novel_right = 0, base = 0, base_right = 0;
  for (const auto& d : dets) {
    for (const auto& a : ds.manifest.annotations) {
      if (a.image_id != d.image_id || iou(a.box, d.box) < 0.3) continue;
      (a.class_id == 5 ? novel : base)++;
      if (d.argmax() == a.class_id) (a.class_id == 5 ? novel_right : base_right)++;
      break;
    }
  }
  ASSERT_GT(novel, 50);
  EXPECT_NEAR(double(novel_right) / novel, 0.3, 0.1);
  EXPECT_NEAR(double(base_right) / base, 0.8, 0.06);
}

TEST(Detsim, NoiseValidation) {
  auto n = DetectorNoise::noiseless(3);
  n.confusion[0][1] = 0.5;
  EXPECT_THROW(n.validate(), ValidationError);
  n = DetectorNoise::noiseless(3);
  n.false_positive_rate = -1;
  EXPECT_THROW(n.validate(), ValidationError);
  const auto ds = generate_dataset(small_scene(4), 2, 1);
  EXPECT_THROW(simulate_detections(ds.manifest, DetectorNoise::noiseless(3), {}, 1), ValidationError);
}
