#pragma once

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lscn/common.hpp"
#include "lscn/parallel.hpp"
#include "lscn/random.hpp"

namespace lscn {

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapR = Eigen::Map<MatrixR<Scalar>>;
template <typename Scalar>
using ConstMapR = Eigen::Map<const MatrixR<Scalar>>;

/// Named, shaped parameter block; values are row-major.
template <typename Scalar>
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<Scalar> values;

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename Scalar>
using Gradients = std::vector<std::vector<Scalar>>;

template <typename Scalar>
Gradients<Scalar> zero_gradients(const std::vector<Tensor<Scalar>>& params) {
  Gradients<Scalar> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g[i].assign(params[i].size(), Scalar(0));
  return g;
}

// ---------------------------------------------------------------------------
// Compact generalized non-local block
//
// X (C x H x W) is flattened to M = C*H*W entries. theta, phi, g are 1x1
// maps over channels. The pairwise term is the plain dot product
// f = theta * phi^T (M x M, no normalization), Y = f * g, and the block
// returns Z = W_z * Y + X. Since f * g = theta * (phi . g), the production
// path never forms the M x M matrix.

template <typename Scalar>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<Scalar> data;  // C x H x W

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, Scalar fill = Scalar(0))
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}
  int plane() const noexcept { return height * width; }
};

/// Non-owning view of the four C x C channel maps (row = output channel).
template <typename Scalar>
struct CgnlView {
  int channels = 0;
  const Scalar* theta = nullptr;
  const Scalar* phi = nullptr;
  const Scalar* g = nullptr;
  const Scalar* z = nullptr;
};

template <typename Scalar>
struct CgnlWeights {
  int channels = 0;
  std::vector<Scalar> theta, phi, g, z;

  explicit CgnlWeights(int c = 0)
      : channels(c),
        theta(static_cast<std::size_t>(c) * c),
        phi(static_cast<std::size_t>(c) * c),
        g(static_cast<std::size_t>(c) * c),
        z(static_cast<std::size_t>(c) * c) {}

  static CgnlWeights identity(int c) {
    CgnlWeights w(c);
    for (int i = 0; i < c; ++i) {
      const std::size_t d = static_cast<std::size_t>(i) * c + i;
      w.theta[d] = w.phi[d] = w.g[d] = w.z[d] = Scalar(1);
    }
    return w;
  }

  void validate() const {
    const std::size_t n = static_cast<std::size_t>(channels) * channels;
    if (channels < 1 || theta.size() != n || phi.size() != n || g.size() != n || z.size() != n)
      throw ValidationError("cgnl weights", "all four maps must be C x C");
    for (const auto* m : {&theta, &phi, &g, &z})
      for (Scalar v : *m)
        if (!std::isfinite(static_cast<double>(v))) throw ValidationError("cgnl weights", "non-finite entry");
  }

  CgnlView<Scalar> view() const { return {channels, theta.data(), phi.data(), g.data(), z.data()}; }
};

template <typename Scalar>
struct CgnlCache {
  MatrixR<Scalar> theta, phi, g, y;  // C x HW
  Scalar similarity = Scalar(0);     // phi . g
};

namespace detail {

template <typename Scalar>
void cgnl_forward_raw(const Scalar* x, int channels, int plane, const CgnlView<Scalar>& w, Scalar* z_out,
                      CgnlCache<Scalar>& cache) {
  const int c = channels;
  ConstMapR<Scalar> X(x, c, plane);
  ConstMapR<Scalar> Wt(w.theta, c, c), Wp(w.phi, c, c), Wg(w.g, c, c), Wz(w.z, c, c);
  cache.theta.noalias() = Wt * X;
  cache.phi.noalias() = Wp * X;
  cache.g.noalias() = Wg * X;
  cache.similarity = (cache.phi.array() * cache.g.array()).sum();
  cache.y = cache.similarity * cache.theta;
  MapR<Scalar> Z(z_out, c, plane);
  Z.noalias() = Wz * cache.y;
  Z += X;
}

/// Accumulates weight gradients into d_theta..d_z (C x C each) and writes
/// the input gradient into dx (overwritten).
template <typename Scalar>
void cgnl_backward_raw(const Scalar* x, int channels, int plane, const CgnlView<Scalar>& w,
                       const CgnlCache<Scalar>& cache, const Scalar* dz, Scalar* dx, Scalar* d_theta, Scalar* d_phi,
                       Scalar* d_g, Scalar* d_z) {
  const int c = channels;
  ConstMapR<Scalar> X(x, c, plane);
  ConstMapR<Scalar> dZ(dz, c, plane);
  ConstMapR<Scalar> Wt(w.theta, c, c), Wp(w.phi, c, c), Wg(w.g, c, c), Wz(w.z, c, c);
  MapR<Scalar>(d_z, c, c).noalias() += dZ * cache.y.transpose();
  const MatrixR<Scalar> dY = Wz.transpose() * dZ;
  const MatrixR<Scalar> dTheta = cache.similarity * dY;
  const Scalar ds = (cache.theta.array() * dY.array()).sum();
  const MatrixR<Scalar> dPhi = ds * cache.g;
  const MatrixR<Scalar> dG = ds * cache.phi;
  MapR<Scalar>(d_theta, c, c).noalias() += dTheta * X.transpose();
  MapR<Scalar>(d_phi, c, c).noalias() += dPhi * X.transpose();
  MapR<Scalar>(d_g, c, c).noalias() += dG * X.transpose();
  MapR<Scalar> dX(dx, c, plane);
  dX = dZ;
  dX.noalias() += Wt.transpose() * dTheta;
  dX.noalias() += Wp.transpose() * dPhi;
  dX.noalias() += Wg.transpose() * dG;
}

template <typename Scalar>
void check_cgnl_dims(const FeatureMap<Scalar>& x, const CgnlView<Scalar>& w) {
  if (x.channels != w.channels)
    throw ValidationError("cgnl", "feature map has " + std::to_string(x.channels) + " channels, weights expect " +
                                      std::to_string(w.channels));
  if (x.data.size() != static_cast<std::size_t>(x.channels) * x.plane())
    throw ValidationError("cgnl", "feature map storage does not match its shape");
}

}  // namespace detail

template <typename Scalar>
FeatureMap<Scalar> cgnl_forward(const FeatureMap<Scalar>& x, const CgnlWeights<Scalar>& weights,
                                CgnlCache<Scalar>* cache = nullptr) {
  weights.validate();
  detail::check_cgnl_dims(x, weights.view());
  FeatureMap<Scalar> z(x.channels, x.height, x.width);
  CgnlCache<Scalar> local;
  detail::cgnl_forward_raw(x.data.data(), x.channels, x.plane(), weights.view(), z.data.data(),
                           cache ? *cache : local);
  return z;
}

/// Gradients of sum(dz .* Z) with respect to X and the four maps.
template <typename Scalar>
struct CgnlGradients {
  FeatureMap<Scalar> dx;
  CgnlWeights<Scalar> dw;
};

template <typename Scalar>
CgnlGradients<Scalar> cgnl_backward(const FeatureMap<Scalar>& x, const CgnlWeights<Scalar>& weights,
                                    const CgnlCache<Scalar>& cache, const FeatureMap<Scalar>& dz) {
  detail::check_cgnl_dims(x, weights.view());
  if (dz.data.size() != x.data.size()) throw ValidationError("cgnl", "upstream gradient shape mismatch");
  CgnlGradients<Scalar> out{FeatureMap<Scalar>(x.channels, x.height, x.width), CgnlWeights<Scalar>(x.channels)};
  detail::cgnl_backward_raw(x.data.data(), x.channels, x.plane(), weights.view(), cache, dz.data.data(),
                            out.dx.data.data(), out.dw.theta.data(), out.dw.phi.data(), out.dw.g.data(),
                            out.dw.z.data());
  return out;
}

// ---------------------------------------------------------------------------
// Feature extractor: stride-2 3x3 conv stages with ReLU, a CGNL block after
// one stage, global average pooling and a linear embedding.

struct ExtractorConfig {
  int input_size = 64;
  std::vector<int> channels{16, 32, 64, 128};
  int embedding_dim = 128;
  int cgnl_stage = 3;  // 1-based stage after which CGNL runs; 0 disables it

  void validate() const {
    if (input_size < 1) throw ValidationError("input_size", "must be positive");
    if (channels.empty()) throw ValidationError("channels", "at least one conv stage required");
    for (int c : channels)
      if (c < 1) throw ValidationError("channels", "channel counts must be positive");
    if (embedding_dim < 2) throw ValidationError("embedding_dim", "must be at least 2");
    if (cgnl_stage < 0 || cgnl_stage > static_cast<int>(channels.size()))
      throw ValidationError("cgnl_stage", "must be 0 or a valid 1-based stage index");
  }

  /// Spatial size after each stage.
  std::vector<int> spatial_sizes() const {
    std::vector<int> out;
    int s = input_size;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      s = (s - 1) / 2 + 1;
      out.push_back(s);
    }
    return out;
  }

  friend bool operator==(const ExtractorConfig&, const ExtractorConfig&) = default;
};

template <typename Scalar>
class FeatureExtractor {
 public:
  struct StageCache {
    MatrixR<Scalar> col;  // (Cin*9) x (Ho*Wo)
    MatrixR<Scalar> pre;  // Cout x (Ho*Wo), before ReLU
  };

  /// Per-sample activations kept between forward and backward.
  struct Cache {
    std::vector<StageCache> stages;
    std::vector<Scalar> cgnl_input;
    CgnlCache<Scalar> cgnl;
    std::vector<Scalar> pooled;
  };

  explicit FeatureExtractor(ExtractorConfig config) : config_(std::move(config)) {
    config_.validate();
    int in = 3;
    for (std::size_t s = 0; s < config_.channels.size(); ++s) {
      const int out = config_.channels[s];
      params_.push_back({"conv" + std::to_string(s + 1) + ".weight", {out, in * 9},
                         std::vector<Scalar>(static_cast<std::size_t>(out) * in * 9)});
      params_.push_back({"conv" + std::to_string(s + 1) + ".bias", {out}, std::vector<Scalar>(out)});
      in = out;
    }
    if (config_.cgnl_stage > 0) {
      const int c = config_.channels[config_.cgnl_stage - 1];
      cgnl_index_ = params_.size();
      for (const char* n : {"cgnl.theta", "cgnl.phi", "cgnl.g", "cgnl.z"})
        params_.push_back({n, {c, c}, std::vector<Scalar>(static_cast<std::size_t>(c) * c)});
    }
    embed_index_ = params_.size();
    params_.push_back({"embed.weight", {config_.embedding_dim, in},
                       std::vector<Scalar>(static_cast<std::size_t>(config_.embedding_dim) * in)});
  }

  const ExtractorConfig& config() const noexcept { return config_; }
  int embedding_dim() const noexcept { return config_.embedding_dim; }
  std::size_t input_numel() const noexcept {
    return static_cast<std::size_t>(3) * config_.input_size * config_.input_size;
  }

  std::vector<Tensor<Scalar>>& params() noexcept { return params_; }
  const std::vector<Tensor<Scalar>>& params() const noexcept { return params_; }

  /// He-normal convolutions, zero biases, 1/sqrt(C) channel maps for the
  /// non-local block with a zero output projection (block starts as identity).
  void initialize(Rng& rng) {
    for (std::size_t s = 0; s < config_.channels.size(); ++s) {
      auto& w = params_[2 * s];
      const double std = std::sqrt(2.0 / w.shape[1]);
      for (auto& v : w.values) v = static_cast<Scalar>(rng.normal() * std);
      std::fill(params_[2 * s + 1].values.begin(), params_[2 * s + 1].values.end(), Scalar(0));
    }
    if (config_.cgnl_stage > 0) {
      const int c = params_[cgnl_index_].shape[0];
      for (int i = 0; i < 3; ++i)
        for (auto& v : params_[cgnl_index_ + i].values) v = static_cast<Scalar>(rng.normal() / std::sqrt(double(c)));
      std::fill(params_[cgnl_index_ + 3].values.begin(), params_[cgnl_index_ + 3].values.end(), Scalar(0));
    }
    auto& e = params_[embed_index_];
    for (auto& v : e.values) v = static_cast<Scalar>(rng.normal() / std::sqrt(double(e.shape[1])));
  }

  /// Embedding of one 3 x S x S crop (values in [0, 1]). When `cache` is
  /// given, the activations needed by backward() are stored in it.
  template <typename In>
  std::vector<Scalar> forward(std::span<const In> crop, Cache* cache = nullptr) const {
    if (crop.size() != input_numel())
      throw ValidationError("crop", "expected 3x" + std::to_string(config_.input_size) + "x" +
                                        std::to_string(config_.input_size) + " input, got " +
                                        std::to_string(crop.size()) + " values");
    const auto sizes = config_.spatial_sizes();
    if (cache) cache->stages.resize(config_.channels.size());

    std::vector<Scalar> act(crop.size());
    for (std::size_t i = 0; i < crop.size(); ++i) act[i] = static_cast<Scalar>(crop[i]) - Scalar(0.5);
    int in_c = 3;
    int in_s = config_.input_size;
    StageCache scratch;
    for (std::size_t s = 0; s < config_.channels.size(); ++s) {
      const int out_c = config_.channels[s];
      const int out_s = sizes[s];
      StageCache& sc = cache ? cache->stages[s] : scratch;
      im2col(act.data(), in_c, in_s, out_s, sc.col);
      ConstMapR<Scalar> W(params_[2 * s].values.data(), out_c, in_c * 9);
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(params_[2 * s + 1].values.data(), out_c);
      sc.pre.noalias() = W * sc.col;
      sc.pre.colwise() += b;
      act.assign(sc.pre.data(), sc.pre.data() + sc.pre.size());
      for (auto& v : act) v = v > Scalar(0) ? v : Scalar(0);
      if (static_cast<int>(s) + 1 == config_.cgnl_stage) {
        std::vector<Scalar> z(act.size());
        CgnlCache<Scalar> local;
        detail::cgnl_forward_raw(act.data(), out_c, out_s * out_s, cgnl_view(), z.data(), cache ? cache->cgnl : local);
        if (cache) cache->cgnl_input = act;
        act.swap(z);
      }
      in_c = out_c;
      in_s = out_s;
    }
    const int plane = in_s * in_s;
    std::vector<Scalar> pooled(in_c, Scalar(0));
    for (int c = 0; c < in_c; ++c) {
      Scalar acc = 0;
      for (int p = 0; p < plane; ++p) acc += act[static_cast<std::size_t>(c) * plane + p];
      pooled[c] = acc / static_cast<Scalar>(plane);
    }
    const auto& e = params_[embed_index_];
    std::vector<Scalar> emb(config_.embedding_dim);
    MapR<Scalar>(emb.data(), config_.embedding_dim, 1).noalias() =
        ConstMapR<Scalar>(e.values.data(), e.shape[0], e.shape[1]) * ConstMapR<Scalar>(pooled.data(), in_c, 1);
    if (cache) cache->pooled = std::move(pooled);
    return emb;
  }

  template <typename In>
  std::vector<Scalar> forward(const std::vector<In>& crop, Cache* cache = nullptr) const {
    return forward(std::span<const In>(crop), cache);
  }

  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(embedding).
  /// Returns d(loss)/d(input) when `input_grad` is non-null.
  void backward(const Cache& cache, std::span<const Scalar> d_embedding, Gradients<Scalar>& grads,
                std::vector<Scalar>* input_grad = nullptr) const {
    const auto sizes = config_.spatial_sizes();
    const int last_c = config_.channels.back();
    const int last_s = sizes.back();
    const int plane = last_s * last_s;
    const auto& e = params_[embed_index_];
    ConstMapR<Scalar> dEmb(d_embedding.data(), config_.embedding_dim, 1);
    MapR<Scalar>(grads[embed_index_].data(), e.shape[0], e.shape[1]).noalias() +=
        dEmb * ConstMapR<Scalar>(cache.pooled.data(), 1, last_c);
    std::vector<Scalar> d_pooled(last_c);
    MapR<Scalar>(d_pooled.data(), last_c, 1).noalias() =
        ConstMapR<Scalar>(e.values.data(), e.shape[0], e.shape[1]).transpose() * dEmb;

    // Gradient w.r.t. the output of the last stage (after CGNL if placed there).
    std::vector<Scalar> d_act(static_cast<std::size_t>(last_c) * plane);
    for (int c = 0; c < last_c; ++c)
      for (int p = 0; p < plane; ++p) d_act[static_cast<std::size_t>(c) * plane + p] = d_pooled[c] / Scalar(plane);

    for (std::size_t si = config_.channels.size(); si-- > 0;) {
      const int out_c = config_.channels[si];
      const int out_s = sizes[si];
      const int in_c = si == 0 ? 3 : config_.channels[si - 1];
      const int in_s = si == 0 ? config_.input_size : sizes[si - 1];
      const StageCache& sc = cache.stages[si];

      if (static_cast<int>(si) + 1 == config_.cgnl_stage) {
        std::vector<Scalar> dx(d_act.size());
        detail::cgnl_backward_raw(cache.cgnl_input.data(), out_c, out_s * out_s, cgnl_view(), cache.cgnl, d_act.data(),
                                  dx.data(), grads[cgnl_index_].data(), grads[cgnl_index_ + 1].data(),
                                  grads[cgnl_index_ + 2].data(), grads[cgnl_index_ + 3].data());
        d_act.swap(dx);
      }
      MatrixR<Scalar> d_pre(out_c, out_s * out_s);
      for (Eigen::Index i = 0; i < d_pre.size(); ++i)
        d_pre.data()[i] = sc.pre.data()[i] > Scalar(0) ? d_act[static_cast<std::size_t>(i)] : Scalar(0);
      MapR<Scalar>(grads[2 * si].data(), out_c, in_c * 9).noalias() += d_pre * sc.col.transpose();
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(grads[2 * si + 1].data(), out_c) += d_pre.rowwise().sum();
      if (si == 0 && !input_grad) break;
      const MatrixR<Scalar> d_col = ConstMapR<Scalar>(params_[2 * si].values.data(), out_c, in_c * 9).transpose() * d_pre;
      d_act.assign(static_cast<std::size_t>(in_c) * in_s * in_s, Scalar(0));
      col2im(d_col, in_c, in_s, out_s, d_act.data());
    }
    if (input_grad) *input_grad = std::move(d_act);
  }

  /// Batch inference; rows of the result are embeddings. Crops are processed
  /// independently, so the result does not depend on batch composition.
  template <typename In>
  MatrixR<Scalar> extract_features(const std::vector<std::vector<In>>& crops, std::size_t threads = 1) const {
    MatrixR<Scalar> out(static_cast<Eigen::Index>(crops.size()), config_.embedding_dim);
    for (const auto& c : crops)
      if (c.size() != input_numel())
        throw ValidationError("crop", "expected " + std::to_string(input_numel()) + " values per crop, got " +
                                          std::to_string(c.size()));
    parallel_for(crops.size(), threads, [&](std::size_t i) {
      const auto emb = forward(std::span<const In>(crops[i]));
      for (int j = 0; j < config_.embedding_dim; ++j) out(static_cast<Eigen::Index>(i), j) = emb[j];
    });
    return out;
  }

  std::size_t cgnl_param_index() const noexcept { return cgnl_index_; }
  std::size_t embed_param_index() const noexcept { return embed_index_; }

 private:
  CgnlView<Scalar> cgnl_view() const {
    const int c = params_[cgnl_index_].shape[0];
    return {c, params_[cgnl_index_].values.data(), params_[cgnl_index_ + 1].values.data(),
            params_[cgnl_index_ + 2].values.data(), params_[cgnl_index_ + 3].values.data()};
  }

  // 3x3 kernel, stride 2, padding 1.
  static void im2col(const Scalar* in, int channels, int in_s, int out_s, MatrixR<Scalar>& col) {
    col.resize(static_cast<Eigen::Index>(channels) * 9, static_cast<Eigen::Index>(out_s) * out_s);
    for (int c = 0; c < channels; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          Scalar* row = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * out_s * out_s;
          for (int oy = 0; oy < out_s; ++oy) {
            const int iy = oy * 2 - 1 + ky;
            for (int ox = 0; ox < out_s; ++ox) {
              const int ix = ox * 2 - 1 + kx;
              row[oy * out_s + ox] = (iy >= 0 && iy < in_s && ix >= 0 && ix < in_s)
                                         ? in[(static_cast<std::size_t>(c) * in_s + iy) * in_s + ix]
                                         : Scalar(0);
            }
          }
        }
  }

  static void col2im(const MatrixR<Scalar>& col, int channels, int in_s, int out_s, Scalar* out) {
    for (int c = 0; c < channels; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const Scalar* row = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * out_s * out_s;
          for (int oy = 0; oy < out_s; ++oy) {
            const int iy = oy * 2 - 1 + ky;
            if (iy < 0 || iy >= in_s) continue;
            for (int ox = 0; ox < out_s; ++ox) {
              const int ix = ox * 2 - 1 + kx;
              if (ix < 0 || ix >= in_s) continue;
              out[(static_cast<std::size_t>(c) * in_s + iy) * in_s + ix] += row[oy * out_s + ox];
            }
          }
        }
  }

  ExtractorConfig config_;
  std::vector<Tensor<Scalar>> params_;
  std::size_t cgnl_index_ = 0;
  std::size_t embed_index_ = 0;
};

}  // namespace lscn
