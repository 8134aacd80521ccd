#pragma once

#include <functional>

#include "support.hpp"

namespace lscn::testing {

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

inline CgnlWeights<double> random_cgnl(Rng& rng, int c) {
  CgnlWeights<double> w(c);
  for (auto* m : {&w.theta, &w.phi, &w.g, &w.z}) *m = random_values(rng, std::size_t(c) * c, 0.5);
  return w;
}

/// Z = W_z (theta phi^T) g + X with the M x M pairwise matrix formed
/// explicitly, M = C*H*W.
inline std::vector<double> cgnl_materialized(const FeatureMap<double>& x, const CgnlWeights<double>& w) {
  const int c = x.channels, p = x.plane();
  const int m = c * p;
  auto conv = [&](const std::vector<double>& k) {
    std::vector<double> out(m, 0.0);
    for (int o = 0; o < c; ++o)
      for (int i = 0; i < c; ++i)
        for (int s = 0; s < p; ++s) out[o * p + s] += k[o * c + i] * x.data[i * p + s];
    return out;
  };
  const auto theta = conv(w.theta), phi = conv(w.phi), g = conv(w.g);
  std::vector<double> f(std::size_t(m) * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) f[std::size_t(i) * m + j] = theta[i] * phi[j];
  std::vector<double> y(m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) y[i] += f[std::size_t(i) * m + j] * g[j];
  std::vector<double> z(x.data);
  for (int o = 0; o < c; ++o)
    for (int i = 0; i < c; ++i)
      for (int s = 0; s < p; ++s) z[o * p + s] += w.z[o * c + i] * y[i * p + s];
  return z;
}

inline FeatureMap<double> random_map(Rng& rng, int c, int h, int w) {
  FeatureMap<double> x(c, h, w);
  x.data = random_values(rng, x.data.size());
  return x;
}


using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Plain-data batch for the scalar oracles.
struct Plain {
  std::vector<Vec> z;      // normalized embeddings
  std::vector<Vec> theta;  // K + 1 normalized templates
  std::vector<int> labels;
  std::vector<ClassRole> roles;  // K entries
};

inline int plain_k(const Plain& p) { return static_cast<int>(p.roles.size()); }
inline bool plain_active(const Plain& p, int c) { return c == plain_k(p) || p.roles[c] != ClassRole::kInactive; }

inline double oracle_cls(const Plain& p, double alpha) {
  double total = 0;
  for (std::size_t b = 0; b < p.z.size(); ++b) {
    double denom = 0;
    for (int c = 0; c <= plain_k(p); ++c)
      if (plain_active(p, c)) denom += std::exp(alpha * dot(p.z[b], p.theta[c]));
    total += -std::log(std::exp(alpha * dot(p.z[b], p.theta[p.labels[b]])) / denom);
  }
  return total / p.z.size();
}

inline int oracle_best(const Plain& p, std::size_t b, const std::function<bool(int)>& pick) {
  int best = -1;
  for (int c = 0; c < plain_k(p); ++c)
    if (pick(c) && (best < 0 || dot(p.z[b], p.theta[c]) > dot(p.z[b], p.theta[best]))) best = c;
  return best;
}

inline double oracle_bg(const Plain& p, double m, bool literal, bool mean) {
  const int bg = plain_k(p);
  double total = 0;
  for (std::size_t b = 0; b < p.z.size(); ++b) {
    int pos = p.labels[b], neg = bg;
    if (pos == bg) {
      neg = oracle_best(p, b, [&](int c) { return p.roles[c] != ClassRole::kInactive; });
      if (neg < 0) continue;
    }
    if (literal) std::swap(pos, neg);
    total += std::max(0.0, m - dot(p.z[b], p.theta[pos]) + dot(p.z[b], p.theta[neg]));
  }
  return mean ? total / p.z.size() : total;
}

inline double oracle_sp(const Plain& p, double m, bool mean) {
  const int bg = plain_k(p);
  const bool has_base = std::count(p.roles.begin(), p.roles.end(), ClassRole::kBase) > 0;
  const bool has_novel = std::count(p.roles.begin(), p.roles.end(), ClassRole::kNovel) > 0;
  if (!has_base || !has_novel) return 0.0;
  double total = 0;
  int n = 0;
  for (std::size_t b = 0; b < p.z.size(); ++b) {
    const int y = p.labels[b];
    if (y == bg) continue;
    ++n;
    const ClassRole want = p.roles[y] == ClassRole::kNovel ? ClassRole::kBase : ClassRole::kNovel;
    const int rival = oracle_best(p, b, [&](int c) { return p.roles[c] == want; });
    total += std::max(0.0, m - dot(p.z[b], p.theta[y]) + dot(p.z[b], p.theta[rival]));
  }
  return mean && n > 0 ? total / n : total;
}

inline Vec random_unit(Rng& rng, int d) {
  Vec v(d);
  double n = 0;
  for (auto& x : v) {
    x = rng.normal();
    n += x * x;
  }
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

inline Plain random_plain(Rng& rng) {
  Plain p;
  const int k = rng.integer(2, 6), d = rng.integer(2, 6), b = rng.integer(1, 12);
  for (int c = 0; c < k; ++c) {
    const double r = rng.uniform();
    p.roles.push_back(r < 0.2 ? ClassRole::kInactive : (r < 0.6 ? ClassRole::kBase : ClassRole::kNovel));
  }
  for (int c = 0; c <= k; ++c) p.theta.push_back(random_unit(rng, d));
  std::vector<int> active;
  for (int c = 0; c <= k; ++c)
    if (plain_active(p, c)) active.push_back(c);
  for (int i = 0; i < b; ++i) {
    p.z.push_back(random_unit(rng, d));
    p.labels.push_back(active[rng.index(active.size())]);
  }
  return p;
}

inline LabeledBatch<double> to_batch(const Plain& p) {
  LabeledBatch<double> b;
  const int d = static_cast<int>(p.theta[0].size());
  b.embeddings.resize(static_cast<Eigen::Index>(p.z.size()), d);
  b.templates.resize(static_cast<Eigen::Index>(p.theta.size()), d);
  for (std::size_t i = 0; i < p.z.size(); ++i)
    for (int j = 0; j < d; ++j) b.embeddings(static_cast<Eigen::Index>(i), j) = p.z[i][j];
  for (std::size_t i = 0; i < p.theta.size(); ++i)
    for (int j = 0; j < d; ++j) b.templates(static_cast<Eigen::Index>(i), j) = p.theta[i][j];
  b.labels = p.labels;
  b.roles.roles = p.roles;
  return b;
}

}  // namespace lscn::testing
