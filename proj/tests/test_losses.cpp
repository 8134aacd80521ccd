#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace lscn;
using namespace lscn::testing;

namespace {

/// Two foreground classes (0 base, 1 novel) and background in the plane.
Plain planar() {
  Plain p;
  p.roles = {ClassRole::kBase, ClassRole::kNovel};
  p.theta = {{1, 0}, {0, 1}, {-1, 0}};
  return p;
}

}  // namespace

TEST(Losses, HandComputedPlanarCases) {
  auto p = planar();
  p.z = {{1, 0}, {0.6, 0.8}, {0, 1}};
  p.labels = {0, 2, 1};
  const auto b = to_batch(p);
  // Background sample: best foreground is class 1 (0.8); 0.2 + 0.6 + 0.8.
  EXPECT_NEAR(loss_bg(b, 0.2), 1.6, 1e-12);
  // Novel sample (0, 1): rival base class 0 at similarity 0 gives max(0, 0.2 - 1) = 0.
  EXPECT_EQ(loss_sp(b, 0.2), 0.0);
  // Literal placement: background sample max(0, 0.2 - 0.8 - 0.6) = 0; class-0 sample 0.2 + 1 + 1;
  // class-1 sample 0.2 + 0 + 1.
  EXPECT_NEAR(loss_bg(b, 0.2, true), 2.2 + 1.2, 1e-12);
  EXPECT_NEAR(loss_sp(b, 1.5), 0.5 + 0.5, 1e-12);
}

TEST(Losses, HingesMatchScalarOraclesOnRandomBatches) {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const auto p = random_plain(rng);
    const auto b = to_batch(p);
    const double m = rng.uniform(0.01, 1.0);
    for (bool literal : {false, true})
      for (bool mean : {false, true}) EXPECT_NEAR(loss_bg(b, m, literal, mean), oracle_bg(p, m, literal, mean), 1e-12);
    for (bool mean : {false, true}) EXPECT_NEAR(loss_sp(b, m, mean), oracle_sp(p, m, mean), 1e-12);
    EXPECT_NEAR(loss_cls(b, 16.0), oracle_cls(p, 16.0), 1e-10);
  }
}

TEST(Losses, AllLossesNonNegative) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto b = to_batch(random_plain(rng));
    const auto l = loss_total(b, LossConfig{});
    EXPECT_GE(l.cls, 0.0);
    EXPECT_GE(l.bg, 0.0);
    EXPECT_GE(l.sp, 0.0);
  }
}

TEST(Losses, HingesExactlyZeroWhenMarginsSatisfied) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    // Orthonormal templates; every embedding equals its own template.
    const int k = rng.integer(2, 5);
    Plain p;
    for (int c = 0; c < k; ++c) p.roles.push_back(c % 2 ? ClassRole::kNovel : ClassRole::kBase);
    for (int c = 0; c <= k; ++c) {
      Vec e(k + 1, 0.0);
      e[c] = 1.0;
      p.theta.push_back(e);
    }
    for (int i = 0; i < 8; ++i) {
      const int y = rng.integer(0, k);
      p.z.push_back(p.theta[y]);
      p.labels.push_back(y);
    }
    const auto b = to_batch(p);
    auto g = LossGradients<double>::zeros(b);
    EXPECT_EQ(loss_bg(b, 0.9, false, false, &g), 0.0);
    EXPECT_EQ(loss_sp(b, 0.9, false, &g), 0.0);
    EXPECT_EQ(g.d_embeddings.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.d_templates.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Losses, HingesMonotoneInMargin) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto b = to_batch(random_plain(rng));
    double prev_bg = -1, prev_sp = -1;
    for (double m = 0.05; m <= 2.0; m += 0.05) {
      const double bg = loss_bg(b, m), sp = loss_sp(b, m);
      EXPECT_GE(bg, prev_bg);
      EXPECT_GE(sp, prev_sp);
      prev_bg = bg;
      prev_sp = sp;
    }
  }
}

TEST(Losses, PermutingTheBatchChangesNothing) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    auto p = random_plain(rng);
    const auto a = loss_total(to_batch(p), LossConfig{});
    std::vector<std::size_t> perm(p.z.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    Plain q = p;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      q.z[i] = p.z[perm[i]];
      q.labels[i] = p.labels[perm[i]];
    }
    const auto b = loss_total(to_batch(q), LossConfig{});
    EXPECT_NEAR(a.cls, b.cls, 1e-12);
    EXPECT_NEAR(a.bg, b.bg, 1e-12);
    EXPECT_NEAR(a.sp, b.sp, 1e-12);
  }
}

TEST(Losses, KinkTakesTheInactiveBranch) {
  auto p = planar();
  p.theta[2] = {0.75, 0.0};  // background template at similarity 0.75 from z = (1, 0)
  p.z = {{1, 0}};
  p.labels = {0};
  const auto b = to_batch(p);
  // Hinge argument: m - 1 + 0.75, zero at m = 0.25.
  for (double m : {0.25 - 1e-6, 0.25}) {
    auto g = LossGradients<double>::zeros(b);
    EXPECT_EQ(loss_bg(b, m, false, false, &g), 0.0);
    EXPECT_EQ(g.d_embeddings.cwiseAbs().maxCoeff(), 0.0);
  }
  auto g = LossGradients<double>::zeros(b);
  EXPECT_NEAR(loss_bg(b, 0.25 + 1e-6, false, false, &g), 1e-6, 1e-15);
  EXPECT_NEAR(g.d_embeddings(0, 0), -0.25, 1e-15);
  EXPECT_NEAR(g.d_templates(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(g.d_templates(2, 0), 1.0, 1e-15);
}

TEST(Losses, InactiveClassesTakeNoPart) {
  auto p = planar();
  p.roles[1] = ClassRole::kInactive;
  p.z = {{0, 1}};
  p.labels = {2};
  const auto b = to_batch(p);
  // Only class 0 competes: 0.2 - 0 + 0.
  EXPECT_NEAR(loss_bg(b, 0.2), 0.2, 1e-15);
  EXPECT_EQ(loss_sp(b, 0.2), 0.0);
  EXPECT_NEAR(loss_cls(b, 1.0), std::log(2.0), 1e-12);
  auto bad = p;
  bad.labels = {1};
  EXPECT_THROW(loss_cls(to_batch(bad), 1.0), ValidationError);
}

TEST(Losses, ObjectiveGradientsMatchFiniteDifferences) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const int k = rng.integer(2, 5), d = rng.integer(2, 5), n = rng.integer(2, 8);
    auto head = CosineHead<double>::random(k, d, rng.uniform(2.0, 16.0), rng);
    ClassRoles roles = ClassRoles::all_base(k);
    for (int c = 0; c < k; ++c)
      if (rng.bernoulli(0.4)) roles.roles[c] = c % 2 ? ClassRole::kNovel : ClassRole::kInactive;
    std::vector<int> active;
    for (int c = 0; c <= k; ++c)
      if (roles.active(c)) active.push_back(c);
    MatrixR<double> feats(n, d);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) feats(i, j) = rng.normal() * 3.0;
      labels.push_back(active[rng.index(active.size())]);
    }
    LossConfig cfg;
    cfg.margin = rng.uniform(0.1, 0.8);
    cfg.literal_bg_equation = rng.bernoulli(0.5);
    cfg.mean_normalize_hinge = rng.bernoulli(0.5);
    const auto res = evaluate_objective(feats, labels, head, roles, cfg);
    std::vector<double> f(feats.data(), feats.data() + feats.size());
    std::vector<double> w(head.weights.data(), head.weights.data() + head.weights.size());
    auto loss = [&] {
      const MatrixR<double> ff = Eigen::Map<const MatrixR<double>>(f.data(), n, d);
      CosineHead<double> h = head;
      h.weights = Eigen::Map<const MatrixR<double>>(w.data(), k + 1, d);
      return evaluate_objective(ff, labels, h, roles, cfg, false).loss.total();
    };
    std::vector<double> gf(res.d_features.data(), res.d_features.data() + res.d_features.size());
    std::vector<double> gw(res.d_weights.data(), res.d_weights.data() + res.d_weights.size());
    EXPECT_LT(max_fd_error(f, gf, loss), 1e-4) << "trial " << t;
    EXPECT_LT(max_fd_error(w, gw, loss), 1e-4) << "trial " << t;
  }
}

TEST(Losses, MarginMustBePositive) {
  const auto p = planar();
  Plain q = p;
  q.z = {{1, 0}};
  q.labels = {0};
  EXPECT_THROW(loss_bg(to_batch(q), 0.0), ValidationError);
  EXPECT_THROW(loss_sp(to_batch(q), -0.1), ValidationError);
}
