#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "solar/geometry.hpp"
#include "solar/model.hpp"
#include "solar/random.hpp"
#include "solar/stream.hpp"

namespace solar {

/// A sample's augmented views and their summary. `mean` and `mean_angle` live
/// in encoder space; `projected_views` (projection space) feed Deviation.
/// Online summaries carry no views at all.
struct Hyperball {
  std::vector<std::vector<double>> views;
  std::vector<double> mean;
  double mean_angle = 0.0;
  std::vector<std::vector<double>> projected_views;

  static Hyperball from_views(std::vector<std::vector<double>> feature_views, AngleOptions opt = {}) {
    Hyperball b;
    b.mean = geometry::mean_vector(feature_views);
    b.mean_angle = mean_pairwise_angle(feature_views, opt);
    b.views = std::move(feature_views);
    return b;
  }

  static Hyperball from_stats(std::vector<double> mean, double mean_angle) {
    Hyperball b;
    b.mean = std::move(mean);
    b.mean_angle = mean_angle;
    return b;
  }
};

/// Mean pairwise cosine distance over ordered view pairs (self-pairs included):
///   (1/n^2) sum_{i,j} (1 - S_C(z_i, z_j)),  in [0, 2].
inline double deviation(std::span<const std::vector<double>> views) {
  if (views.empty()) throw std::invalid_argument("deviation: no views");
  const std::size_t n = views.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) total += 1.0 - geometry::cosine(views[i], views[j]);
  return total / static_cast<double>(n * n);
}

inline double mean_angle(std::span<const std::vector<double>> views, AngleOptions opt = {}) {
  return mean_pairwise_angle(views, opt);
}

/// (theta_a + theta_b) - angle(mean_a, mean_b); positive means the balls intersect.
inline double overlap(std::span<const double> mean_a, double angle_a, std::span<const double> mean_b, double angle_b) {
  return (angle_a + angle_b) - geometry::angle(mean_a, mean_b);
}

inline double overlap(const Hyperball& a, const Hyperball& b) {
  return overlap(a.mean, a.mean_angle, b.mean, b.mean_angle);
}

struct OverlapCountOptions {
  bool include_self_pairs = true;
};

/// Fraction of ordered ball pairs with strictly positive Overlap.
inline double avg_overlap_count(std::span<const Hyperball> balls, OverlapCountOptions opt = {}) {
  if (balls.empty()) throw std::invalid_argument("avg_overlap_count: empty set");
  const std::size_t n = balls.size();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (opt.include_self_pairs && overlap(balls[i], balls[i]) > 0.0) ++hits;
    for (std::size_t j = i + 1; j < n; ++j)
      if (overlap(balls[i], balls[j]) > 0.0) hits += 2;  // Ov is symmetric
  }
  const double pairs = opt.include_self_pairs ? static_cast<double>(n * n) : static_cast<double>(n * (n - 1));
  return pairs > 0.0 ? static_cast<double>(hits) / pairs : 0.0;
}

/// Offline hyperball of one sample: `n_aug` views through the frozen model.
template <typename T>
Hyperball hyperball_summary(const SSLModel<T>& model, const std::vector<float>& x, std::size_t n_aug,
                            const AugmentationConfig& cfg, Rng& rng, AngleOptions opt = {}) {
  auto stats = per_sample_stats(model, x, n_aug, cfg, rng, opt);
  Hyperball b;
  b.views = std::move(stats.feature_views);
  b.mean = std::move(stats.mean_feature);
  b.mean_angle = stats.mean_angle;
  b.projected_views = std::move(stats.projected_views);
  return b;
}

/// log of the mean over distinct unordered pairs of exp(-2 |u - v|^2), with
/// every vector L2-normalized first.
inline double uniformity_loss(std::span<const std::vector<double>> features) {
  if (features.size() < 2) throw std::invalid_argument("uniformity_loss needs at least 2 vectors");
  std::vector<std::vector<double>> unit(features.begin(), features.end());
  for (auto& u : unit) {
    const double nr = std::max(geometry::norm(u), kCosineEps);
    for (auto& v : u) v /= nr;
  }
  // log-sum-exp keeps tiny kernels from underflowing to log(0)
  std::vector<double> logs;
  logs.reserve(unit.size() * (unit.size() - 1) / 2);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < unit.size(); ++i)
    for (std::size_t j = i + 1; j < unit.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < unit[i].size(); ++k) d2 += (unit[i][k] - unit[j][k]) * (unit[i][k] - unit[j][k]);
      logs.push_back(-2.0 * d2);
      top = std::max(top, logs.back());
    }
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - top);
  return top + std::log(acc / static_cast<double>(logs.size()));
}

struct SpectrumReport {
  std::vector<double> singular_values;  // descending
  std::vector<double> normalized;       // sigma_i / sigma_1
  std::vector<double> cumulative;       // CEV(k), k = 1..len
};

/// Singular spectrum of the row-normalized feature matrix.
inline SpectrumReport svd_collapse_metrics(std::span<const std::vector<double>> features) {
  if (features.empty()) throw std::invalid_argument("svd_collapse_metrics: need at least one row");
  const auto rows = static_cast<Eigen::Index>(features.size());
  const auto cols = static_cast<Eigen::Index>(features.front().size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& f = features[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(f.size()) != cols) throw std::invalid_argument("svd_collapse_metrics: ragged rows");
    const double nr = std::max(geometry::norm(f), kCosineEps);
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f[static_cast<std::size_t>(c)] / nr;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  const Eigen::VectorXd s = svd.singularValues();

  SpectrumReport rep;
  rep.singular_values.assign(s.data(), s.data() + s.size());
  const double top = rep.singular_values.empty() ? 0.0 : rep.singular_values.front();
  double total = 0.0;
  for (double v : rep.singular_values) total += v;
  double running = 0.0;
  for (double v : rep.singular_values) {
    rep.normalized.push_back(top > 0.0 ? v / top : 0.0);
    running += v;
    rep.cumulative.push_back(total > 0.0 ? running / total : 0.0);
  }
  return rep;
}

// -- dataset-level evaluation ------------------------------------------------

struct MetricsConfig {
  std::size_t views = 20;
  std::uint64_t seed = 7;
  std::size_t subsample = 0;  // 0 = every sample
  bool include_self_pairs = true;
};

struct LatentMetrics {
  std::size_t step = 0;
  double deviation_mean = 0.0;
  double avg_overlap_count = 0.0;
  double uniformity = 0.0;
  std::vector<std::pair<std::size_t, double>> cev;  // (k, CEV(k)) for k = 1, 2, 4, ...
};

/// Offline latent metrics over a dataset on a frozen model. The augmentation
/// rng is re-seeded from `cfg.seed` on every call, so checkpoints are compared
/// on identical view draws.
template <typename T>
LatentMetrics evaluate_latent_metrics(const SSLModel<T>& model, const Dataset& data, const AugmentationConfig& aug,
                                      const MetricsConfig& cfg, std::size_t step = 0) {
  if (data.empty()) throw std::invalid_argument("evaluate_latent_metrics: empty dataset");
  if (cfg.views < 2) throw std::invalid_argument("evaluate_latent_metrics: need at least 2 views");
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng = make_rng(cfg.seed, 0);
  if (cfg.subsample > 0 && cfg.subsample < idx.size()) {
    Rng pick = make_rng(cfg.seed, 1);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(pick, i)]);
    idx.resize(cfg.subsample);
    std::sort(idx.begin(), idx.end());
  }

  const AngleOptions angle_opt{cfg.include_self_pairs};
  constexpr std::size_t kSamplesPerChunk = 64;
  std::vector<Hyperball> balls;
  balls.reserve(idx.size());
  double dev_total = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += kSamplesPerChunk) {
    const std::size_t end = std::min(idx.size(), start + kSamplesPerChunk);
    std::vector<std::vector<float>> views;
    views.reserve((end - start) * cfg.views);
    for (std::size_t s = start; s < end; ++s)
      for (std::size_t v = 0; v < cfg.views; ++v) views.push_back(augment(data[idx[s]].x, aug, rng));
    const auto emb = embed(model, stack_rows<T, std::vector<float>>(views));
    const auto feats = to_rows(emb.features);
    const auto projs = to_rows(emb.projections);
    for (std::size_t s = start; s < end; ++s) {
      const auto off = static_cast<std::ptrdiff_t>((s - start) * cfg.views);
      const auto n = static_cast<std::ptrdiff_t>(cfg.views);
      std::vector<std::vector<double>> f(feats.begin() + off, feats.begin() + off + n);
      const std::span<const std::vector<double>> p(projs.data() + off, cfg.views);
      dev_total += deviation(p);
      Hyperball b;
      b.mean = geometry::mean_vector(f);
      b.mean_angle = mean_pairwise_angle(f, angle_opt);
      balls.push_back(std::move(b));
    }
  }

  LatentMetrics out;
  out.step = step;
  out.deviation_mean = dev_total / static_cast<double>(idx.size());
  out.avg_overlap_count = avg_overlap_count(balls, {cfg.include_self_pairs});

  Dataset clean;
  clean.reserve(idx.size());
  for (auto i : idx) clean.push_back(data[i]);
  const auto features = encode_dataset(model, clean);
  out.uniformity = features.size() >= 2 ? uniformity_loss(features) : 0.0;
  const auto spectrum = svd_collapse_metrics(features);
  for (std::size_t k = 1; k <= spectrum.cumulative.size(); k *= 2) out.cev.emplace_back(k, spectrum.cumulative[k - 1]);
  return out;
}

}  // namespace solar
