#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lscn/classifier.hpp"
#include "lscn/common.hpp"
#include "lscn/netcore.hpp"

namespace lscn {

enum class ClassRole { kInactive, kBase, kNovel };

/// Role of each foreground class in the current training phase. Inactive
/// classes take no part in the softmax or in template selection.
struct ClassRoles {
  std::vector<ClassRole> roles;  // one per foreground class

  int num_classes() const noexcept { return static_cast<int>(roles.size()); }
  bool active(int c) const { return c == num_classes() || roles.at(c) != ClassRole::kInactive; }
  bool is_base(int c) const { return c < num_classes() && roles[c] == ClassRole::kBase; }
  bool is_novel(int c) const { return c < num_classes() && roles[c] == ClassRole::kNovel; }

  static ClassRoles all_base(int k) { return {std::vector<ClassRole>(k, ClassRole::kBase)}; }

  /// Base classes active; novel classes active only when `novel_active`.
  static ClassRoles from_novel_ids(int k, const std::vector<int>& novel_ids, bool novel_active) {
    ClassRoles r = all_base(k);
    for (int c : novel_ids) r.roles.at(c) = novel_active ? ClassRole::kNovel : ClassRole::kInactive;
    return r;
  }

  friend bool operator==(const ClassRoles&, const ClassRoles&) = default;
};

/// Normalized embeddings, labels in [0, K] (K = background) and the
/// normalized class templates theta (one row per class incl. background).
template <typename Scalar>
struct LabeledBatch {
  MatrixR<Scalar> embeddings;  // B x d
  std::vector<int> labels;
  MatrixR<Scalar> templates;  // (K + 1) x d
  ClassRoles roles;

  int size() const noexcept { return static_cast<int>(labels.size()); }
  int background() const noexcept { return roles.num_classes(); }

  void validate() const {
    const int k = roles.num_classes();
    if (templates.rows() != k + 1) throw ValidationError("batch", "templates must have K + 1 rows");
    if (embeddings.rows() != static_cast<Eigen::Index>(labels.size()))
      throw ValidationError("batch", "one label per embedding required");
    if (embeddings.rows() > 0 && embeddings.cols() != templates.cols())
      throw ValidationError("batch", "embedding and template dimensions differ");
    for (std::size_t b = 0; b < labels.size(); ++b)
      if (labels[b] < 0 || labels[b] > k || !roles.active(labels[b]))
        throw ValidationError("labels[" + std::to_string(b) + "]",
                              "label " + std::to_string(labels[b]) + " is not an active class");
  }
};

template <typename Scalar>
LabeledBatch<Scalar> make_labeled_batch(const MatrixR<Scalar>& normalized_embeddings, std::vector<int> labels,
                                        const CosineHead<Scalar>& head, ClassRoles roles) {
  if (roles.num_classes() != head.num_classes()) throw ValidationError("roles", "one role per head class required");
  LabeledBatch<Scalar> b{normalized_embeddings, std::move(labels), head.normalized_rows(), std::move(roles)};
  b.validate();
  return b;
}

struct LossConfig {
  double logit_scale = 16.0;
  double margin = 0.2;
  /// Run the background-suppression hinge with the template placement as
  /// printed in the equation instead of the prose reading.
  bool literal_bg_equation = false;
  /// Divide each hinge sum by the number of samples it ranges over.
  bool mean_normalize_hinge = false;
};

template <typename Scalar>
struct LossBreakdown {
  Scalar cls = 0;
  Scalar bg = 0;
  Scalar sp = 0;
  Scalar total() const { return cls + bg + sp; }
};

/// Gradients w.r.t. the normalized embeddings and normalized templates.
template <typename Scalar>
struct LossGradients {
  MatrixR<Scalar> d_embeddings;
  MatrixR<Scalar> d_templates;

  static LossGradients zeros(const LabeledBatch<Scalar>& b) {
    return {MatrixR<Scalar>::Zero(b.embeddings.rows(), b.templates.cols()),
            MatrixR<Scalar>::Zero(b.templates.rows(), b.templates.cols())};
  }
};

namespace detail {

/// Highest-response class among those accepted by `pick`; -1 when none.
template <typename Scalar, typename Pred>
int best_response(const LabeledBatch<Scalar>& batch, int b, Pred pick) {
  int best = -1;
  Scalar best_sim = -std::numeric_limits<Scalar>::infinity();
  for (int c = 0; c < batch.roles.num_classes(); ++c) {
    if (!pick(c)) continue;
    const Scalar s = batch.embeddings.row(b).dot(batch.templates.row(c));
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return best;
}

/// max(m - pos.z + neg.z, 0). The kink belongs to the inactive branch: a
/// term contributes gradient only when its argument is strictly positive.
template <typename Scalar>
Scalar hinge_term(const LabeledBatch<Scalar>& batch, int b, int pos, int neg, Scalar margin, Scalar weight,
                  LossGradients<Scalar>* grads) {
  const auto z = batch.embeddings.row(b);
  const Scalar arg = margin - z.dot(batch.templates.row(pos)) + z.dot(batch.templates.row(neg));
  if (!(arg > Scalar(0))) return Scalar(0);
  if (grads) {
    grads->d_embeddings.row(b) += weight * (batch.templates.row(neg) - batch.templates.row(pos));
    grads->d_templates.row(pos) -= weight * z;
    grads->d_templates.row(neg) += weight * z;
  }
  return arg;
}

}  // namespace detail

/// Mean softmax cross-entropy of alpha * cosine logits over active classes.
template <typename Scalar>
Scalar loss_cls(const LabeledBatch<Scalar>& batch, Scalar logit_scale, LossGradients<Scalar>* grads = nullptr) {
  batch.validate();
  if (batch.size() == 0) throw ValidationError("loss_cls", "empty batch");
  const int classes = batch.roles.num_classes() + 1;
  std::vector<int> active;
  for (int c = 0; c < classes; ++c)
    if (batch.roles.active(c)) active.push_back(c);

  const Scalar inv_b = Scalar(1) / Scalar(batch.size());
  Scalar total = 0;
  std::vector<Scalar> logits(active.size());
  for (int b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 0; i < active.size(); ++i)
      logits[i] = logit_scale * batch.embeddings.row(b).dot(batch.templates.row(active[i]));
    Scalar mx = logits[0];
    for (Scalar v : logits) mx = std::max(mx, v);
    Scalar sum = 0;
    for (Scalar v : logits) sum += std::exp(v - mx);
    const Scalar log_z = mx + std::log(sum);
    std::size_t label_pos = 0;
    while (active[label_pos] != batch.labels[b]) ++label_pos;
    total += log_z - logits[label_pos];
    if (grads) {
      for (std::size_t i = 0; i < active.size(); ++i) {
        const Scalar p = std::exp(logits[i] - log_z);
        const Scalar d = (p - (i == label_pos ? Scalar(1) : Scalar(0))) * inv_b * logit_scale;
        grads->d_embeddings.row(b) += d * batch.templates.row(active[i]);
        grads->d_templates.row(active[i]) += d * batch.embeddings.row(b);
      }
    }
  }
  return total * inv_b;
}

/// Background-suppression hinge. Background samples take the background
/// template as positive and the highest-responding active foreground
/// template as negative; foreground samples take their own class as positive
/// and background as negative. `literal_bg_equation` swaps the templates in
/// both sums. Returns 0 on an empty batch.
template <typename Scalar>
Scalar loss_bg(const LabeledBatch<Scalar>& batch, Scalar margin, bool literal_bg_equation = false,
               bool mean_normalize = false, LossGradients<Scalar>* grads = nullptr) {
  batch.validate();
  if (!(margin > Scalar(0))) throw ValidationError("margin", "must be positive");
  if (batch.size() == 0) return Scalar(0);
  const int bg = batch.background();
  const Scalar weight = mean_normalize ? Scalar(1) / Scalar(batch.size()) : Scalar(1);
  Scalar total = 0;
  for (int b = 0; b < batch.size(); ++b) {
    const int y = batch.labels[b];
    int pos, neg;
    if (y == bg) {
      const int f = detail::best_response(batch, b, [&](int c) { return batch.roles.active(c); });
      if (f < 0) continue;
      pos = bg;
      neg = f;
    } else {
      pos = y;
      neg = bg;
    }
    if (literal_bg_equation) std::swap(pos, neg);
    total += detail::hinge_term(batch, b, pos, neg, margin, weight, grads);
  }
  return total * weight;
}

/// Inter-class separation hinge over foreground samples: a base sample's own
/// class must beat the highest-responding novel class by the margin, and a
/// novel sample's own class the highest-responding base class. Zero when
/// either pool is empty.
template <typename Scalar>
Scalar loss_sp(const LabeledBatch<Scalar>& batch, Scalar margin, bool mean_normalize = false,
               LossGradients<Scalar>* grads = nullptr) {
  batch.validate();
  if (!(margin > Scalar(0))) throw ValidationError("margin", "must be positive");
  bool any_base = false, any_novel = false;
  for (int c = 0; c < batch.roles.num_classes(); ++c) {
    any_base = any_base || batch.roles.is_base(c);
    any_novel = any_novel || batch.roles.is_novel(c);
  }
  if (!any_base || !any_novel) return Scalar(0);
  int n_fg = 0;
  for (int y : batch.labels) n_fg += y != batch.background();
  if (n_fg == 0) return Scalar(0);
  const Scalar weight = mean_normalize ? Scalar(1) / Scalar(n_fg) : Scalar(1);
  Scalar total = 0;
  for (int b = 0; b < batch.size(); ++b) {
    const int y = batch.labels[b];
    if (y == batch.background()) continue;
    const bool novel = batch.roles.is_novel(y);
    const int rival = detail::best_response(
        batch, b, [&](int c) { return novel ? batch.roles.is_base(c) : batch.roles.is_novel(c); });
    total += detail::hinge_term(batch, b, y, rival, margin, weight, grads);
  }
  return total * weight;
}

/// L_cls + L_bg + L_sp with unit weights.
template <typename Scalar>
LossBreakdown<Scalar> loss_total(const LabeledBatch<Scalar>& batch, const LossConfig& cfg,
                                 LossGradients<Scalar>* grads = nullptr) {
  LossBreakdown<Scalar> out;
  out.cls = loss_cls(batch, static_cast<Scalar>(cfg.logit_scale), grads);
  out.bg = loss_bg(batch, static_cast<Scalar>(cfg.margin), cfg.literal_bg_equation, cfg.mean_normalize_hinge, grads);
  out.sp = loss_sp(batch, static_cast<Scalar>(cfg.margin), cfg.mean_normalize_hinge, grads);
  return out;
}

template <typename Scalar>
struct ObjectiveResult {
  LossBreakdown<Scalar> loss;
  MatrixR<Scalar> d_features;  // w.r.t. raw (unnormalized) embeddings
  MatrixR<Scalar> d_weights;   // w.r.t. raw head rows
};

/// Full objective from raw extractor outputs and raw head weights, with
/// gradients through both L2 normalizations. The head's logit scale is used
/// in place of cfg.logit_scale.
template <typename Scalar>
ObjectiveResult<Scalar> evaluate_objective(const MatrixR<Scalar>& features, const std::vector<int>& labels,
                                           const CosineHead<Scalar>& head, const ClassRoles& roles,
                                           const LossConfig& cfg, bool with_gradients = true) {
  const MatrixR<Scalar> z = normalize_rows(features);
  const auto batch = make_labeled_batch(z, labels, head, roles);
  LossConfig local = cfg;
  local.logit_scale = static_cast<double>(head.logit_scale);
  ObjectiveResult<Scalar> out;
  if (!with_gradients) {
    out.loss = loss_total(batch, local);
    return out;
  }
  auto grads = LossGradients<Scalar>::zeros(batch);
  out.loss = loss_total(batch, local, &grads);
  out.d_features = normalize_rows_backward(features, grads.d_embeddings);
  out.d_weights = normalize_rows_backward(head.weights, grads.d_templates);
  return out;
}

}  // namespace lscn
