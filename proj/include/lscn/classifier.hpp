#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lscn/common.hpp"
#include "lscn/netcore.hpp"

namespace lscn {

inline constexpr double kNormEpsilon = 1e-12;

template <typename Scalar>
struct NormalizedEmbedding {
  std::vector<Scalar> value;
  bool degenerate = false;  // input norm below kNormEpsilon; value is all zeros
};

/// f / ||f||_2, or the zero vector (flagged) when ||f|| < 1e-12.
template <typename Scalar>
NormalizedEmbedding<Scalar> normalize_embedding(std::span<const Scalar> f) {
  double sq = 0.0;
  for (Scalar v : f) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  NormalizedEmbedding<Scalar> out{std::vector<Scalar>(f.size(), Scalar(0)), norm < kNormEpsilon};
  if (!out.degenerate)
    for (std::size_t i = 0; i < f.size(); ++i) out.value[i] = static_cast<Scalar>(f[i] / norm);
  return out;
}

template <typename Scalar>
NormalizedEmbedding<Scalar> normalize_embedding(const std::vector<Scalar>& f) {
  return normalize_embedding(std::span<const Scalar>(f));
}

/// Row-wise L2 normalization; zero rows stay zero.
template <typename Scalar>
MatrixR<Scalar> normalize_rows(const MatrixR<Scalar>& m) {
  MatrixR<Scalar> out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Scalar n = m.row(r).norm();
    if (static_cast<double>(n) < kNormEpsilon)
      out.row(r).setZero();
    else
      out.row(r) /= n;
  }
  return out;
}

/// Backpropagates through row normalization: given rows of `raw` and the
/// gradient w.r.t. the normalized rows, returns the gradient w.r.t. `raw`.
template <typename Scalar>
MatrixR<Scalar> normalize_rows_backward(const MatrixR<Scalar>& raw, const MatrixR<Scalar>& d_normalized) {
  MatrixR<Scalar> out(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const Scalar n = raw.row(r).norm();
    if (static_cast<double>(n) < kNormEpsilon) {
      out.row(r).setZero();
      continue;
    }
    const auto u = raw.row(r) / n;
    out.row(r) = (d_normalized.row(r) - u * u.dot(d_normalized.row(r))) / n;
  }
  return out;
}

/// Zero-bias cosine classifier over K foreground classes plus background
/// (row K). Rows are stored raw and normalized on every forward pass.
template <typename Scalar>
struct CosineHead {
  MatrixR<Scalar> weights;  // (K + 1) x d
  Scalar logit_scale = Scalar(16);

  int num_classes() const noexcept { return static_cast<int>(weights.rows()) - 1; }
  int background() const noexcept { return num_classes(); }
  int dim() const noexcept { return static_cast<int>(weights.cols()); }

  void validate(int expected_dim = -1) const {
    if (weights.rows() < 2) throw ValidationError("head", "need at least one foreground class plus background");
    if (expected_dim >= 0 && weights.cols() != expected_dim)
      throw ValidationError("head", "weight dimension " + std::to_string(weights.cols()) +
                                        " does not match embedding dimension " + std::to_string(expected_dim));
    if (!(logit_scale > Scalar(0))) throw ValidationError("logit_scale", "must be positive");
    if (!weights.allFinite()) throw ValidationError("head", "non-finite weights");
  }

  MatrixR<Scalar> normalized_rows() const { return normalize_rows(weights); }

  static CosineHead random(int num_classes, int dim, Scalar logit_scale, Rng& rng) {
    CosineHead h;
    h.weights.resize(num_classes + 1, dim);
    for (Eigen::Index i = 0; i < h.weights.size(); ++i) h.weights.data()[i] = static_cast<Scalar>(rng.normal());
    h.logit_scale = logit_scale;
    return h;
  }
};

/// logits[b, c] = alpha * <w_c / ||w_c||, z_b>; every entry lies in [-alpha, alpha].
template <typename Scalar>
MatrixR<Scalar> cosine_logits(const MatrixR<Scalar>& z, const CosineHead<Scalar>& head) {
  head.validate();
  if (z.cols() != head.weights.cols())
    throw ValidationError("cosine_logits", "embedding dimension " + std::to_string(z.cols()) +
                                               " does not match head dimension " +
                                               std::to_string(head.weights.cols()));
  MatrixR<Scalar> logits = head.logit_scale * (z * head.normalized_rows().transpose());
  // Rounding can push |cos| a hair above 1.
  return logits.cwiseMax(-head.logit_scale).cwiseMin(head.logit_scale);
}

template <typename Scalar>
struct CosineLogitGradients {
  MatrixR<Scalar> d_z;        // B x d
  MatrixR<Scalar> d_weights;  // (K + 1) x d, w.r.t. the raw rows
};

/// Backward pass of cosine_logits for an upstream gradient d_logits (B x (K+1)).
template <typename Scalar>
CosineLogitGradients<Scalar> cosine_logits_backward(const MatrixR<Scalar>& z, const CosineHead<Scalar>& head,
                                                    const MatrixR<Scalar>& d_logits) {
  const MatrixR<Scalar> w = head.normalized_rows();
  CosineLogitGradients<Scalar> g;
  g.d_z = head.logit_scale * (d_logits * w);
  const MatrixR<Scalar> d_w = head.logit_scale * (d_logits.transpose() * z);
  g.d_weights = normalize_rows_backward(head.weights, d_w);
  return g;
}

template <typename Scalar>
std::vector<Scalar> softmax(std::span<const Scalar> logits) {
  std::vector<Scalar> p(logits.size());
  if (logits.empty()) return p;
  Scalar mx = logits[0];
  for (Scalar v : logits) mx = std::max(mx, v);
  Scalar sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

namespace detail {

template <typename Scalar>
std::vector<Scalar> normalized_mean(const MatrixR<Scalar>& rows, const std::string& what) {
  if (rows.rows() == 0) throw ValidationError(what, "no embeddings supplied");
  // A single already-normalized embedding is its own normalized mean; copy
  // it verbatim instead of dividing by a norm that differs from 1 by rounding.
  if (rows.rows() == 1 && std::abs(static_cast<double>(rows.row(0).norm()) - 1.0) <= 1e-6)
    return std::vector<Scalar>(rows.data(), rows.data() + rows.cols());
  Eigen::Matrix<double, 1, Eigen::Dynamic> mean = rows.template cast<double>().colwise().sum() / double(rows.rows());
  const double n = mean.norm();
  if (n < kNormEpsilon)
    throw ValidationError(what, "mean of normalized embeddings is (near) zero; supply different shots");
  std::vector<Scalar> out(rows.cols());
  for (Eigen::Index j = 0; j < rows.cols(); ++j) out[j] = static_cast<Scalar>(mean(j) / n);
  return out;
}

}  // namespace detail

/// Imprints novel rows: w_c = mean(z) / ||mean(z)|| over the normalized shot
/// embeddings of class c. Other rows are copied unchanged.
template <typename Scalar>
CosineHead<Scalar> imprint_novel_weights(const CosineHead<Scalar>& head,
                                         const std::vector<std::pair<int, MatrixR<Scalar>>>& shots_per_class) {
  head.validate();
  CosineHead<Scalar> out = head;
  for (const auto& [cls, shots] : shots_per_class) {
    const std::string what = "class " + std::to_string(cls);
    if (cls < 0 || cls >= head.num_classes()) throw ValidationError(what, "not a foreground class of the head");
    if (shots.cols() != head.dim()) throw ValidationError(what, "shot embedding dimension mismatch");
    const auto row = detail::normalized_mean(shots, what);
    for (int j = 0; j < head.dim(); ++j) out.weights(cls, j) = row[j];
  }
  return out;
}

/// Background row from a pooled set of normalized background embeddings
/// drawn from base and novel images; same mean-then-normalize rule.
template <typename Scalar>
CosineHead<Scalar> infer_background_weight(const CosineHead<Scalar>& head, const MatrixR<Scalar>& from_base,
                                           const MatrixR<Scalar>& from_novel) {
  head.validate();
  if (from_base.rows() > 0 && from_base.cols() != head.dim())
    throw ValidationError("background", "embedding dimension mismatch");
  if (from_novel.rows() > 0 && from_novel.cols() != head.dim())
    throw ValidationError("background", "embedding dimension mismatch");
  if (from_base.rows() == 0 || from_novel.rows() == 0)
    log_warning("background weight inferred from " + std::string(from_base.rows() == 0 ? "novel" : "base") +
                " images only; expected proposals from both splits");
  else
    log_info("background pool: " + std::to_string(from_base.rows()) + " base / " + std::to_string(from_novel.rows()) +
             " novel embeddings");
  MatrixR<Scalar> pooled(from_base.rows() + from_novel.rows(), head.dim());
  if (from_base.rows() > 0) pooled.topRows(from_base.rows()) = from_base;
  if (from_novel.rows() > 0) pooled.bottomRows(from_novel.rows()) = from_novel;
  const auto row = detail::normalized_mean(pooled, "background");
  CosineHead<Scalar> out = head;
  for (int j = 0; j < head.dim(); ++j) out.weights(head.background(), j) = row[j];
  return out;
}

}  // namespace lscn
