#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "solar/geometry.hpp"
#include "solar/numerics/graph.hpp"
#include "solar/random.hpp"
#include "solar/stream.hpp"

namespace solar {

/// Encoder d -> hidden -> feature (BN + ReLU after the hidden layer), projector
/// feature -> proj_hidden -> proj (BN after both layers), predictor bottleneck
/// proj -> pred_hidden -> proj.
struct ModelConfig {
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 32;
  std::size_t proj_hidden_dim = 32;
  std::size_t proj_dim = 16;
  std::size_t pred_hidden_dim = 8;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;
};

enum class Mode { train, eval };

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
class SSLModel {
 public:
  using NodeId = typename Graph<T>::NodeId;

  /// Parameter leaves of one model on one graph, plus the training-mode batch
  /// norm nodes created so far (in creation order) for the running update.
  struct Binding {
    Mode mode = Mode::train;
    std::vector<NodeId> params;
    std::vector<std::pair<std::size_t, NodeId>> bn_nodes;
  };

  SSLModel() = default;

  explicit SSLModel(const ModelConfig& cfg) : cfg_(cfg) {
    Rng rng = make_rng(cfg.seed, 0x30DE1);
    enc1_ = linear(cfg.input_dim, cfg.hidden_dim, rng);
    enc2_ = linear(cfg.hidden_dim, cfg.feature_dim, rng);
    proj1_ = linear(cfg.feature_dim, cfg.proj_hidden_dim, rng);
    proj2_ = linear(cfg.proj_hidden_dim, cfg.proj_dim, rng);
    pred1_ = linear(cfg.proj_dim, cfg.pred_hidden_dim, rng);
    pred2_ = linear(cfg.pred_hidden_dim, cfg.proj_dim, rng);
    enc_bn_ = batch_norm(cfg.hidden_dim);
    proj_bn1_ = batch_norm(cfg.proj_hidden_dim);
    proj_bn2_ = batch_norm(cfg.proj_dim);
    pred_bn_ = batch_norm(cfg.pred_hidden_dim);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Trainable tensors in a fixed order; Binding::params follows the same order.
  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& [name, lin] : linears()) {
      out.emplace_back(name + ".weight", &lin->weight);
      out.emplace_back(name + ".bias", &lin->bias);
    }
    for (auto& [name, bn] : norms()) {
      out.emplace_back(name + ".gamma", &bn->gamma);
      out.emplace_back(name + ".beta", &bn->beta);
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [name, p] : const_cast<SSLModel*>(this)->parameters()) out.emplace_back(name, p);
    return out;
  }

  /// Parameters followed by batch-norm running statistics (everything a
  /// checkpoint must persist).
  std::vector<std::pair<std::string, Tensor<T>*>> state() {
    auto out = parameters();
    for (auto& [name, bn] : norms()) {
      out.emplace_back(name + ".running_mean", &bn->running_mean);
      out.emplace_back(name + ".running_var", &bn->running_var);
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> state() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [name, p] : const_cast<SSLModel*>(this)->state()) out.emplace_back(name, p);
    return out;
  }

  /// Encoder-only parameter names (prefix "encoder").
  static bool is_encoder(const std::string& name) { return name.rfind("encoder", 0) == 0; }

  Binding bind(Graph<T>& g, Mode mode) const {
    Binding b;
    b.mode = mode;
    for (auto& [name, p] : parameters()) b.params.push_back(g.parameter(name, *p));
    return b;
  }

  NodeId encode(Graph<T>& g, Binding& b, NodeId x) const {
    if (g.value(x).cols() != cfg_.input_dim) {
      throw std::invalid_argument("encoder expects input dimension " + std::to_string(cfg_.input_dim) + ", got " +
                                  std::to_string(g.value(x).cols()));
    }
    NodeId h = apply_linear(g, b, 0, x);
    h = apply_bn(g, b, 0, h);
    h = g.relu(h);
    return apply_linear(g, b, 1, h);
  }

  NodeId project(Graph<T>& g, Binding& b, NodeId f) const {
    NodeId h = apply_linear(g, b, 2, f);
    h = apply_bn(g, b, 1, h);
    h = g.relu(h);
    h = apply_linear(g, b, 3, h);
    return apply_bn(g, b, 2, h);
  }

  NodeId predict(Graph<T>& g, Binding& b, NodeId z) const {
    NodeId h = apply_linear(g, b, 4, z);
    h = apply_bn(g, b, 3, h);
    h = g.relu(h);
    return apply_linear(g, b, 5, h);
  }

  /// Folds the batch statistics recorded during a training-mode forward into
  /// the running averages, in the order the nodes were created.
  void update_running_stats(const Graph<T>& g, const Binding& b) {
    if (b.mode != Mode::train) return;
    auto layers = norms();
    const T mom = static_cast<T>(cfg_.bn_momentum);
    for (const auto& [layer, node] : b.bn_nodes) {
      const auto& stats = g.batch_statistics(node);
      auto& bn = *layers[layer].second;
      const T unbias = static_cast<T>(stats.count) / static_cast<T>(stats.count - 1);
      for (std::size_t c = 0; c < stats.mean.size(); ++c) {
        bn.running_mean[c] = (T{1} - mom) * bn.running_mean[c] + mom * stats.mean[c];
        bn.running_var[c] = (T{1} - mom) * bn.running_var[c] + mom * stats.variance[c] * unbias;
      }
    }
  }

  template <typename U>
  SSLModel<U> cast() const {
    SSLModel<U> out(cfg_);
    auto dst = out.state();
    auto src = state();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }

 private:
  static LinearLayer<T> linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    LinearLayer<T> l{Tensor<T>({in, out}), Tensor<T>({out})};
    for (auto& v : l.weight.data()) v = static_cast<T>(bound * (2.0 * uniform01(rng) - 1.0));
    for (auto& v : l.bias.data()) v = static_cast<T>(bound * (2.0 * uniform01(rng) - 1.0));
    return l;
  }

  static BatchNormLayer<T> batch_norm(std::size_t width) {
    return {Tensor<T>({width}, T{1}), Tensor<T>({width}, T{0}), Tensor<T>({width}, T{0}), Tensor<T>({width}, T{1})};
  }

  std::vector<std::pair<std::string, LinearLayer<T>*>> linears() {
    return {{"encoder.fc1", &enc1_},   {"encoder.fc2", &enc2_},     {"projector.fc1", &proj1_},
            {"projector.fc2", &proj2_}, {"predictor.fc1", &pred1_}, {"predictor.fc2", &pred2_}};
  }

  std::vector<std::pair<std::string, BatchNormLayer<T>*>> norms() {
    return {{"encoder.bn1", &enc_bn_},
            {"projector.bn1", &proj_bn1_},
            {"projector.bn2", &proj_bn2_},
            {"predictor.bn1", &pred_bn_}};
  }

  NodeId apply_linear(Graph<T>& g, const Binding& b, std::size_t layer, NodeId x) const {
    const NodeId w = b.params[2 * layer];
    const NodeId bias = b.params[2 * layer + 1];
    return g.add_bias(g.matmul(x, w), bias);
  }

  NodeId apply_bn(Graph<T>& g, Binding& b, std::size_t layer, NodeId x) const {
    constexpr std::size_t kLinearParams = 12;
    const NodeId gamma = b.params[kLinearParams + 2 * layer];
    const NodeId beta = b.params[kLinearParams + 2 * layer + 1];
    const T eps = static_cast<T>(cfg_.bn_eps);
    if (b.mode == Mode::train) {
      const NodeId out = g.batch_norm(x, gamma, beta, eps);
      b.bn_nodes.emplace_back(layer, out);
      return out;
    }
    const auto& bn = *const_cast<SSLModel*>(this)->norms()[layer].second;
    return g.batch_norm_eval(x, gamma, beta, bn.running_mean, bn.running_var, eps);
  }

  ModelConfig cfg_;
  LinearLayer<T> enc1_, enc2_, proj1_, proj2_, pred1_, pred2_;
  BatchNormLayer<T> enc_bn_, proj_bn1_, proj_bn2_, pred_bn_;
};

// -- batches -----------------------------------------------------------------

template <typename T, typename Row>
Tensor<T> stack_rows(std::span<const Row> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty batch");
  const std::size_t d = rows.front().size();
  Tensor<T> out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != d) throw std::invalid_argument("stack_rows: ragged batch");
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = static_cast<T>(rows[r][c]);
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> to_rows(const Tensor<T>& t) {
  std::vector<std::vector<double>> out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[r][c] = static_cast<double>(t.at(r, c));
  return out;
}

// -- forward passes and losses -----------------------------------------------

template <typename T>
struct ViewOutputs {
  using NodeId = typename Graph<T>::NodeId;
  NodeId feature1, feature2;        // encoder space
  NodeId projection1, projection2;  // projection space
  NodeId prediction1, prediction2;
};

/// Runs both views through encoder, projector and predictor. Each view is its
/// own batch for batch normalization.
template <typename T>
ViewOutputs<T> forward_views(const SSLModel<T>& model, Graph<T>& g, typename SSLModel<T>::Binding& b,
                             typename Graph<T>::NodeId view1, typename Graph<T>::NodeId view2) {
  if (!g.value(view1).same_shape(g.value(view2))) throw std::invalid_argument("forward_views: view shapes differ");
  ViewOutputs<T> out{};
  out.feature1 = model.encode(g, b, view1);
  out.projection1 = model.project(g, b, out.feature1);
  out.prediction1 = model.predict(g, b, out.projection1);
  out.feature2 = model.encode(g, b, view2);
  out.projection2 = model.project(g, b, out.feature2);
  out.prediction2 = model.predict(g, b, out.projection2);
  return out;
}

/// Per-sample symmetric SimSiam loss
///   l_i = -1/2 [S_C(p1_i, sg(z2_i)) + S_C(p2_i, sg(z1_i))],
/// in [-1, 1]. Returns a node of shape [n].
template <typename T>
typename Graph<T>::NodeId simsiam_pair_loss(Graph<T>& g, typename Graph<T>::NodeId p1, typename Graph<T>::NodeId p2,
                                            typename Graph<T>::NodeId z1, typename Graph<T>::NodeId z2) {
  const auto c1 = g.row_cosine(p1, g.stop_gradient(z2));
  const auto c2 = g.row_cosine(p2, g.stop_gradient(z1));
  return g.scale(g.add(c1, c2), T(-0.5));
}

/// Positive-only instance-discrimination loss over n views:
///   L = -sum_{i != j} S_C(z_i, z_j)  (ordered pairs).
inline double multiview_ssl_loss(std::span<const std::vector<double>> views) {
  if (views.size() < 2) throw std::invalid_argument("multiview_ssl_loss needs at least 2 views");
  double loss = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i)
    for (std::size_t j = 0; j < views.size(); ++j)
      if (i != j) loss -= geometry::cosine(views[i], views[j]);
  return loss;
}

/// Mean pairwise angle of the two training views of each row, over ordered
/// pairs including the two zero self-pairs: (0 + a + a + 0) / 4 = a / 2.
template <typename T>
typename Graph<T>::NodeId two_view_mean_angle(Graph<T>& g, typename Graph<T>::NodeId f1, typename Graph<T>::NodeId f2) {
  return g.scale(g.arccos(g.row_cosine(f1, f2)), T(0.5));
}

template <typename T>
typename Graph<T>::NodeId two_view_mean_feature(Graph<T>& g, typename Graph<T>::NodeId f1, typename Graph<T>::NodeId f2) {
  return g.scale(g.add(f1, f2), T(0.5));
}

// -- frozen-model summaries ----------------------------------------------------

template <typename T>
struct Embeddings {
  Tensor<T> features;     // [n, feature_dim]
  Tensor<T> projections;  // [n, proj_dim]
  Tensor<T> predictions;  // [n, proj_dim]
};

/// Inference-mode forward (running batch-norm statistics); never mutates the model.
template <typename T>
Embeddings<T> embed(const SSLModel<T>& model, Tensor<T> batch) {
  Graph<T> g;
  auto b = model.bind(g, Mode::eval);
  const auto x = g.input("x", std::move(batch));
  const auto f = model.encode(g, b, x);
  const auto z = model.project(g, b, f);
  const auto p = model.predict(g, b, z);
  return {g.value(f), g.value(z), g.value(p)};
}

/// Encoder features for a dataset, processed in chunks.
template <typename T>
std::vector<std::vector<double>> encode_dataset(const SSLModel<T>& model, const Dataset& data,
                                                std::size_t chunk = 512) {
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    Tensor<T> batch({end - start, data[start].x.size()});
    for (std::size_t r = start; r < end; ++r)
      for (std::size_t c = 0; c < batch.cols(); ++c) batch.at(r - start, c) = static_cast<T>(data[r].x[c]);
    auto rows = to_rows(embed(model, std::move(batch)).features);
    for (auto& r : rows) out.push_back(std::move(r));
  }
  return out;
}

struct AngleOptions {
  bool include_self_pairs = true;
};

/// Mean of arccos(S_C) over ordered view pairs; self-pairs contribute 0 and
/// are counted in the denominator unless excluded.
inline double mean_pairwise_angle(std::span<const std::vector<double>> views, AngleOptions opt = {}) {
  if (views.empty()) throw std::invalid_argument("mean_pairwise_angle: no views");
  const std::size_t n = views.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) total += geometry::angle(views[i], views[j]);
  if (!opt.include_self_pairs) {
    return n < 2 ? 0.0 : total / static_cast<double>(n * (n - 1));
  }
  return total / static_cast<double>(n * n);
}

struct PerSampleOutput {
  std::optional<double> loss;  // SimSiam pair loss, only for n_views == 2
  std::vector<double> mean_feature;
  double mean_angle = 0.0;
  std::vector<std::vector<double>> feature_views;
  std::vector<std::vector<double>> projected_views;
};

/// Draws `n_views` augmentations of `x` and summarizes them on the frozen
/// model: mean encoder feature, mean pairwise encoder-space angle, and (for
/// two views) the SimSiam pair loss.
template <typename T>
PerSampleOutput per_sample_stats(const SSLModel<T>& model, const std::vector<float>& x, std::size_t n_views,
                                 const AugmentationConfig& cfg, Rng& rng, AngleOptions opt = {}) {
  if (n_views < 2) throw std::invalid_argument("per_sample_stats needs at least 2 views");
  std::vector<std::vector<float>> views;
  views.reserve(n_views);
  for (std::size_t i = 0; i < n_views; ++i) views.push_back(augment(x, cfg, rng));
  auto emb = embed(model, stack_rows<T, std::vector<float>>(views));

  PerSampleOutput out;
  out.feature_views = to_rows(emb.features);
  out.projected_views = to_rows(emb.projections);
  out.mean_feature = geometry::mean_vector(out.feature_views);
  out.mean_angle = mean_pairwise_angle(out.feature_views, opt);
  if (n_views == 2) {
    const auto p = to_rows(emb.predictions);
    const auto& z = out.projected_views;
    out.loss = -0.5 * (geometry::cosine(p[0], z[1]) + geometry::cosine(p[1], z[0]));
  }
  return out;
}

}  // namespace solar
