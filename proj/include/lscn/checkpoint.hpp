#pragma once

#include <string>
#include <vector>

#include "lscn/classifier.hpp"
#include "lscn/datamodel.hpp"
#include "lscn/losses.hpp"
#include "lscn/netcore.hpp"

namespace lscn {

inline constexpr int kCheckpointSchemaVersion = 1;

/// Extractor + cosine head + class bookkeeping: everything needed to score
/// crops. `stage` records which training step produced it.
template <typename Scalar>
struct CorrectionModel {
  FeatureExtractor<Scalar> extractor;
  CosineHead<Scalar> head;
  std::vector<std::string> class_names;
  std::vector<int> novel_class_ids;
  std::string stage = "init";  // init | phase1 | imprinted | phase2

  int num_classes() const noexcept { return head.num_classes(); }

  /// Tensors of the whole model; the head weights come last.
  std::vector<Tensor<Scalar>> tensors() const {
    auto out = extractor.params();
    out.push_back({"head.weight", {static_cast<int>(head.weights.rows()), static_cast<int>(head.weights.cols())},
                   std::vector<Scalar>(head.weights.data(), head.weights.data() + head.weights.size())});
    return out;
  }

  /// Class probabilities (softmax over all K + 1 cosine logits) for a batch.
  MatrixR<Scalar> probabilities(const MatrixR<Scalar>& raw_embeddings) const {
    const MatrixR<Scalar> logits = cosine_logits(normalize_rows(raw_embeddings), head);
    MatrixR<Scalar> probs(logits.rows(), logits.cols());
    for (Eigen::Index b = 0; b < logits.rows(); ++b) {
      const auto p = softmax(std::span<const Scalar>(logits.row(b).data(), static_cast<std::size_t>(logits.cols())));
      for (Eigen::Index c = 0; c < logits.cols(); ++c) probs(b, c) = p[c];
    }
    return probs;
  }
};

template <typename Scalar>
CorrectionModel<Scalar> make_model(const ExtractorConfig& cfg, std::vector<std::string> class_names,
                                   std::vector<int> novel_class_ids, Scalar logit_scale, std::uint64_t seed) {
  Rng rng(seed);
  FeatureExtractor<Scalar> ex(cfg);
  ex.initialize(rng);
  auto head = CosineHead<Scalar>::random(static_cast<int>(class_names.size()), cfg.embedding_dim, logit_scale, rng);
  return {std::move(ex), std::move(head), std::move(class_names), std::move(novel_class_ids), "init"};
}

template <typename Scalar>
Json checkpoint_to_json(const CorrectionModel<Scalar>& m) {
  const auto& c = m.extractor.config();
  Json tensors = Json::array();
  for (const auto& t : m.tensors()) {
    Json values = Json::array();
    for (Scalar v : t.values) values.push_back(static_cast<double>(v));
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"values", std::move(values)}});
  }
  return {{"format", "lscn-checkpoint"},
          {"schema_version", kCheckpointSchemaVersion},
          {"scalar", sizeof(Scalar) == 4 ? "float32" : "float64"},
          {"stage", m.stage},
          {"extractor",
           {{"input_size", c.input_size},
            {"channels", c.channels},
            {"embedding_dim", c.embedding_dim},
            {"cgnl_stage", c.cgnl_stage}}},
          {"logit_scale", static_cast<double>(m.head.logit_scale)},
          {"class_names", m.class_names},
          {"novel_class_ids", m.novel_class_ids},
          {"tensors", std::move(tensors)}};
}

template <typename Scalar>
CorrectionModel<Scalar> checkpoint_from_json(const Json& j) {
  const std::string rec = "checkpoint";
  if (detail::required<std::string>(j, "format", rec) != "lscn-checkpoint")
    throw ValidationError(rec, "not an lscn checkpoint");
  const int version = detail::required<int>(j, "schema_version", rec);
  if (version != kCheckpointSchemaVersion)
    throw ValidationError(rec, "unsupported schema_version " + std::to_string(version));
  const Json& e = j.at("extractor");
  ExtractorConfig cfg;
  cfg.input_size = detail::required<int>(e, "input_size", rec);
  cfg.channels = detail::required<std::vector<int>>(e, "channels", rec);
  cfg.embedding_dim = detail::required<int>(e, "embedding_dim", rec);
  cfg.cgnl_stage = detail::required<int>(e, "cgnl_stage", rec);

  CorrectionModel<Scalar> m{FeatureExtractor<Scalar>(cfg), {}, {}, {}, ""};
  m.class_names = detail::required<std::vector<std::string>>(j, "class_names", rec);
  m.novel_class_ids = detail::required<std::vector<int>>(j, "novel_class_ids", rec);
  m.stage = detail::required<std::string>(j, "stage", rec);
  m.head.logit_scale = static_cast<Scalar>(detail::required<double>(j, "logit_scale", rec));

  const Json& tensors = j.at("tensors");
  auto& params = m.extractor.params();
  if (!tensors.is_array() || tensors.size() != params.size() + 1)
    throw ValidationError(rec, "tensor count does not match the extractor configuration");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string name = detail::required<std::string>(tensors[i], "name", rec);
    const auto shape = detail::required<std::vector<int>>(tensors[i], "shape", rec);
    const auto values = detail::required<std::vector<double>>(tensors[i], "values", rec);
    if (i < params.size()) {
      if (name != params[i].name || shape != params[i].shape || values.size() != params[i].size())
        throw ValidationError(rec + "." + name, "tensor does not match the extractor configuration");
      for (std::size_t v = 0; v < values.size(); ++v) params[i].values[v] = static_cast<Scalar>(values[v]);
    } else {
      const int k1 = static_cast<int>(m.class_names.size()) + 1;
      if (name != "head.weight" || shape != std::vector<int>{k1, cfg.embedding_dim} ||
          values.size() != static_cast<std::size_t>(k1) * cfg.embedding_dim)
        throw ValidationError(rec + "." + name, "head tensor does not match class list");
      m.head.weights.resize(k1, cfg.embedding_dim);
      for (std::size_t v = 0; v < values.size(); ++v) m.head.weights.data()[v] = static_cast<Scalar>(values[v]);
    }
  }
  m.head.validate(cfg.embedding_dim);
  return m;
}

template <typename Scalar>
void save_checkpoint(const CorrectionModel<Scalar>& m, const std::string& path) {
  detail::write_text_file(path, checkpoint_to_json(m).dump() + "\n");
}

template <typename Scalar>
CorrectionModel<Scalar> load_checkpoint(const std::string& path) {
  return checkpoint_from_json<Scalar>(detail::read_json_file(path));
}

}  // namespace lscn
