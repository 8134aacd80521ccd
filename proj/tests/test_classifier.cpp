#include <gtest/gtest.h>

#include "support.hpp"

using namespace lscn;
using namespace lscn::testing;

namespace {

MatrixR<double> random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  MatrixR<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

}  // namespace

TEST(Classifier, LogitsBoundedByScale) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const double alpha = rng.uniform(0.5, 40.0);
    auto head = CosineHead<double>::random(rng.integer(1, 6), rng.integer(2, 9), alpha, rng);
    const auto z = normalize_rows(random_matrix(rng, 5, head.dim(), rng.uniform(1e-3, 1e3)));
    const auto logits = cosine_logits(z, head);
    EXPECT_LE(logits.cwiseAbs().maxCoeff(), alpha);
    // Aligned rows reach the bound.
    const auto self = cosine_logits(head.normalized_rows(), head);
    for (Eigen::Index c = 0; c < self.rows(); ++c) EXPECT_NEAR(self(c, c), alpha, 1e-12);
  }
}

TEST(Classifier, NormalizationHandValues) {
  const auto n = normalize_embedding(std::vector<double>{3.0, 4.0});
  EXPECT_DOUBLE_EQ(n.value[0], 0.6);
  EXPECT_DOUBLE_EQ(n.value[1], 0.8);
  EXPECT_FALSE(n.degenerate);
  const auto zero = normalize_embedding(std::vector<double>{0.0, 1e-13});
  EXPECT_EQ(zero.value, (std::vector<double>{0.0, 0.0}));
  EXPECT_TRUE(zero.degenerate);
}

TEST(Classifier, SoftmaxInvariantToEmbeddingRescale) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    auto head = CosineHead<double>::random(4, 6, 16.0, rng);
    const auto raw = random_matrix(rng, 1, 6);
    const double s = std::exp(rng.uniform(-5, 5));
    const auto a = cosine_logits(normalize_rows(raw), head);
    const auto b = cosine_logits(normalize_rows(MatrixR<double>(raw * s)), head);
    const auto pa = softmax(std::span<const double>(a.data(), a.size()));
    const auto pb = softmax(std::span<const double>(b.data(), b.size()));
    for (std::size_t c = 0; c < pa.size(); ++c) EXPECT_NEAR(pa[c], pb[c], 1e-12);
    EXPECT_EQ(std::max_element(pa.begin(), pa.end()) - pa.begin(), std::max_element(pb.begin(), pb.end()) - pb.begin());
  }
}

TEST(Classifier, LogitGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto head = CosineHead<double>::random(3, 5, 8.0, rng);
    const auto z = normalize_rows(random_matrix(rng, 4, 5));
    const auto up = random_matrix(rng, 4, 4);
    const auto g = cosine_logits_backward(z, head, up);
    std::vector<double> w(head.weights.data(), head.weights.data() + head.weights.size());
    std::vector<double> gw(g.d_weights.data(), g.d_weights.data() + g.d_weights.size());
    auto loss = [&] {
      CosineHead<double> h = head;
      for (std::size_t i = 0; i < w.size(); ++i) h.weights.data()[i] = w[i];
      MatrixR<double> l = h.logit_scale * (z * h.normalized_rows().transpose());
      return (l.array() * up.array()).sum();
    };
    EXPECT_LT(max_fd_error(w, gw, loss), 1e-4);
    std::vector<double> zv(z.data(), z.data() + z.size());
    std::vector<double> gz(g.d_z.data(), g.d_z.data() + g.d_z.size());
    auto loss_z = [&] {
      const MatrixR<double> zz = Eigen::Map<const MatrixR<double>>(zv.data(), 4, 5);
      MatrixR<double> l = head.logit_scale * (zz * head.normalized_rows().transpose());
      return (l.array() * up.array()).sum();
    };
    EXPECT_LT(max_fd_error(zv, gz, loss_z), 1e-4);
  }
}

TEST(Classifier, ImprintedRowsAreUnitNormMeans) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto head = CosineHead<double>::random(5, 7, 16.0, rng);
    const int shots = rng.integer(2, 6);
    const auto z = normalize_rows(random_matrix(rng, shots, 7));
    const auto out = imprint_novel_weights(head, {{3, z}});
    EXPECT_NEAR(out.weights.row(3).norm(), 1.0, 1e-6);
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(7);
    for (int s = 0; s < shots; ++s) mean += z.row(s);
    mean /= mean.norm();
    for (int j = 0; j < 7; ++j) EXPECT_NEAR(out.weights(3, j), mean(j), 1e-12);
    for (int c = 0; c <= 5; ++c) {
      if (c == 3) continue;
      EXPECT_EQ(out.weights.row(c), head.weights.row(c));
    }
  }
}

TEST(Classifier, SingleShotImprintReproducesEmbeddingExactly) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto head = CosineHead<float>::random(3, 9, 16.0f, rng);
    MatrixR<float> raw(1, 9);
    for (int j = 0; j < 9; ++j) raw(0, j) = static_cast<float>(rng.normal());
    const MatrixR<float> z = normalize_rows(raw);
    const auto out = imprint_novel_weights(head, {{1, z}});
    EXPECT_EQ(out.weights.row(1), z.row(0));
  }
}

TEST(Classifier, BackgroundRowFromPooledSources) {
  Rng rng(6);
  const auto head = CosineHead<double>::random(2, 4, 16.0, rng);
  const auto a = normalize_rows(random_matrix(rng, 3, 4));
  const auto b = normalize_rows(random_matrix(rng, 2, 4));
  const auto out = infer_background_weight(head, a, b);
  Eigen::RowVectorXd mean = a.colwise().sum() + b.colwise().sum();
  mean /= mean.norm();
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(out.weights(2, j), mean(j), 1e-12);
  EXPECT_EQ(out.weights.topRows(2), head.weights.topRows(2));
}

TEST(Classifier, ImprintRejectsDegenerateInput) {
  Rng rng(7);
  const auto head = CosineHead<double>::random(2, 2, 16.0, rng);
  MatrixR<double> opposite(2, 2);
  opposite << 1, 0, -1, 0;
  EXPECT_THROW(imprint_novel_weights(head, {{0, opposite}}), ValidationError);
  EXPECT_THROW(imprint_novel_weights(head, {{0, MatrixR<double>(0, 2)}}), ValidationError);
  EXPECT_THROW(imprint_novel_weights(head, {{5, normalize_rows(random_matrix(rng, 1, 2))}}), ValidationError);
  EXPECT_THROW(imprint_novel_weights(head, {{0, normalize_rows(random_matrix(rng, 1, 3))}}), ValidationError);
  EXPECT_THROW(cosine_logits(random_matrix(rng, 1, 3), head), ValidationError);
}
