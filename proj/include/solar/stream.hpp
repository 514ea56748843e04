#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "solar/random.hpp"

namespace solar {

/// One stream element. The label never reaches the SSL learner; only the
/// schedule builder and the linear probe read it.
struct LabeledSample {
  std::vector<float> x;
  int label = 0;
};

using Dataset = std::vector<LabeledSample>;

inline int num_classes(const Dataset& data) {
  int top = -1;
  for (const auto& s : data) top = std::max(top, s.label);
  return top + 1;
}

// -- synthetic data ----------------------------------------------------------

/// Isotropic Gaussian blobs around seeded random unit directions scaled by
/// `cluster_scale`. Centers depend only on `seed`; `sample_stream` selects an
/// independent draw of the noise so a held-out split shares the same centers.
inline Dataset generate_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t dim,
                                  double cluster_scale, std::uint64_t seed, std::uint64_t sample_stream = 0) {
  if (num_classes == 0 || per_class == 0 || dim == 0) {
    throw std::invalid_argument("generate_synthetic: counts must be positive");
  }
  Rng center_rng = make_rng(seed, 0);
  std::vector<std::vector<double>> centers(num_classes, std::vector<double>(dim));
  for (auto& c : centers) {
    double n2 = 0.0;
    for (auto& v : c) {
      v = standard_normal(center_rng);
      n2 += v * v;
    }
    const double inv = cluster_scale / std::sqrt(n2);
    for (auto& v : c) v *= inv;
  }

  Rng noise_rng = make_rng(seed, 1 + sample_stream);
  Dataset out;
  out.reserve(num_classes * per_class);
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      LabeledSample s;
      s.label = static_cast<int>(k);
      s.x.resize(dim);
      for (std::size_t d = 0; d < dim; ++d) {
        s.x[d] = static_cast<float>(centers[k][d] + standard_normal(noise_rng));
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// -- CIFAR-100 binary --------------------------------------------------------

enum class CifarLabel { coarse, fine };

inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::size_t kCifarPlane = 1024;

class DataFormatError : public std::runtime_error {
 public:
  DataFormatError(std::size_t offset, const std::string& what)
      : std::runtime_error("byte offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Parses CIFAR-100 binary records (coarse byte, fine byte, 3072 pixel bytes
/// as R, G, B planes). Pixels are scaled to [0,1] and then standardized per
/// channel with statistics of the file itself.
inline Dataset parse_cifar_binary(const std::vector<unsigned char>& bytes, CifarLabel which) {
  const std::size_t full = bytes.size() / kCifarRecordBytes;
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw DataFormatError(full * kCifarRecordBytes, "truncated CIFAR record");
  }
  const int label_limit = which == CifarLabel::coarse ? 20 : 100;
  Dataset out(full);
  std::array<double, 3> sum{}, sum_sq{};
  for (std::size_t r = 0; r < full; ++r) {
    const std::size_t base = r * kCifarRecordBytes;
    const int label = bytes[base + (which == CifarLabel::coarse ? 0 : 1)];
    if (label >= label_limit) {
      throw DataFormatError(base, "label " + std::to_string(label) + " out of range [0," +
                                      std::to_string(label_limit) + ")");
    }
    out[r].label = label;
    out[r].x.resize(kCifarPixels);
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      const double v = bytes[base + 2 + p] / 255.0;
      out[r].x[p] = static_cast<float>(v);
      sum[p / kCifarPlane] += v;
      sum_sq[p / kCifarPlane] += v * v;
    }
  }
  if (full == 0) return out;
  std::array<float, 3> mean{}, inv_std{};
  const double count = static_cast<double>(full * kCifarPlane);
  for (int c = 0; c < 3; ++c) {
    const double m = sum[c] / count;
    const double var = std::max(0.0, sum_sq[c] / count - m * m);
    const double sd = std::sqrt(var);
    mean[c] = static_cast<float>(m);
    inv_std[c] = static_cast<float>(sd > 1e-12 ? 1.0 / sd : 1.0);
  }
  for (auto& s : out) {
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      const std::size_t c = p / kCifarPlane;
      s.x[p] = (s.x[p] - mean[c]) * inv_std[c];
    }
  }
  return out;
}

inline Dataset read_cifar_binary(const std::string& path, CifarLabel which) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open CIFAR file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_cifar_binary(bytes, which);
}

// -- schedule ----------------------------------------------------------------

struct StreamBatch {
  std::size_t task = 0;
  std::vector<std::size_t> indices;
};

/// Class-incremental single-pass stream: tasks are disjoint class groups, and
/// within a task the samples are a seeded permutation chunked into minibatches.
struct StreamSchedule {
  std::vector<std::vector<int>> task_classes;
  std::vector<std::vector<std::vector<std::size_t>>> task_batches;
  std::size_t stream_batch_size = 10;
  std::size_t passes = 1;
  std::uint64_t seed = 0;

  std::size_t num_tasks() const { return task_batches.size(); }

  /// Every stream minibatch in emission order.
  std::vector<StreamBatch> batches() const {
    std::vector<StreamBatch> out;
    for (std::size_t t = 0; t < task_batches.size(); ++t)
      for (const auto& b : task_batches[t]) out.push_back({t, b});
    return out;
  }

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& t : task_batches) n += t.size();
    return n * passes;
  }
};

inline StreamSchedule build_schedule(const Dataset& data, std::size_t num_tasks, std::size_t stream_batch_size,
                                     std::size_t passes, std::uint64_t seed, bool shuffle_class_order = false) {
  if (stream_batch_size == 0) throw std::invalid_argument("build_schedule: stream batch size must be >= 1");
  if (passes == 0) throw std::invalid_argument("build_schedule: passes per batch must be >= 1");
  const int classes = num_classes(data);
  if (num_tasks == 0 || num_tasks > static_cast<std::size_t>(classes)) {
    throw std::invalid_argument("build_schedule: " + std::to_string(num_tasks) + " tasks for " +
                                std::to_string(classes) + " classes");
  }

  std::vector<int> order(static_cast<std::size_t>(classes));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_class_order) {
    Rng rng = make_rng(seed, 0xC1A55);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }

  StreamSchedule s;
  s.stream_batch_size = stream_batch_size;
  s.passes = passes;
  s.seed = seed;
  std::vector<int> task_of(static_cast<std::size_t>(classes));
  const std::size_t base = static_cast<std::size_t>(classes) / num_tasks;
  const std::size_t extra = static_cast<std::size_t>(classes) % num_tasks;
  std::size_t pos = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const std::size_t width = base + (t < extra ? 1 : 0);
    std::vector<int> cls(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + width));
    for (int c : cls) task_of[static_cast<std::size_t>(c)] = static_cast<int>(t);
    s.task_classes.push_back(std::move(cls));
    pos += width;
  }

  std::vector<std::vector<std::size_t>> members(num_tasks);
  for (std::size_t i = 0; i < data.size(); ++i) {
    members[static_cast<std::size_t>(task_of[static_cast<std::size_t>(data[i].label)])].push_back(i);
  }
  for (std::size_t t = 0; t < num_tasks; ++t) {
    auto& idx = members[t];
    Rng rng = make_rng(seed, t + 1);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    std::vector<std::vector<std::size_t>> chunks;
    for (std::size_t start = 0; start < idx.size(); start += stream_batch_size) {
      const std::size_t end = std::min(idx.size(), start + stream_batch_size);
      chunks.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                          idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
    s.task_batches.push_back(std::move(chunks));
  }
  return s;
}

// -- augmentation ------------------------------------------------------------

enum class AugmentationKind { synthetic, image };

struct AugmentationConfig {
  AugmentationKind kind = AugmentationKind::synthetic;
  // synthetic-vector pipeline
  double noise_std = 0.1;
  double dropout = 0.2;
  // image pipeline (channel-planar layout)
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t crop_padding = 4;
  double flip_prob = 0.5;
  double jitter_strength = 0.4;
  double jitter_prob = 0.8;
  double grayscale_prob = 0.2;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must be in [0,1]");
    };
    prob(dropout, "dropout");
    prob(flip_prob, "flip_prob");
    prob(jitter_prob, "jitter_prob");
    prob(grayscale_prob, "grayscale_prob");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be >= 0");
    if (!(jitter_strength >= 0.0)) throw std::invalid_argument("jitter_strength must be >= 0");
  }
};

namespace detail {

inline std::vector<float> augment_image(const std::vector<float>& x, const AugmentationConfig& cfg, Rng& rng) {
  const std::size_t C = cfg.channels, H = cfg.height, W = cfg.width;
  if (x.size() != C * H * W) {
    throw std::invalid_argument("image augmentation expects " + std::to_string(C * H * W) + " values, got " +
                                std::to_string(x.size()));
  }
  const std::size_t pad = cfg.crop_padding;
  const auto dy = static_cast<std::ptrdiff_t>(uniform_index(rng, 2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
  const auto dx = static_cast<std::ptrdiff_t>(uniform_index(rng, 2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
  const bool flip = bernoulli(rng, cfg.flip_prob);

  std::vector<float> out(x.size(), 0.0f);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t q = 0; q < W; ++q) {
        const auto sr = static_cast<std::ptrdiff_t>(r) + dy;
        const auto col = flip ? static_cast<std::ptrdiff_t>(W - 1 - q) : static_cast<std::ptrdiff_t>(q);
        const auto sc = col + dx;
        if (sr < 0 || sc < 0 || sr >= static_cast<std::ptrdiff_t>(H) || sc >= static_cast<std::ptrdiff_t>(W)) continue;
        out[(c * H + r) * W + q] = x[(c * H + static_cast<std::size_t>(sr)) * W + static_cast<std::size_t>(sc)];
      }

  if (bernoulli(rng, cfg.jitter_prob)) {
    const double s = cfg.jitter_strength;
    const auto brightness = static_cast<float>(1.0 + s * (2.0 * uniform01(rng) - 1.0));
    const auto contrast = static_cast<float>(1.0 + s * (2.0 * uniform01(rng) - 1.0));
    double m = 0.0;
    for (float v : out) m += v;
    const auto mean = static_cast<float>(m / static_cast<double>(out.size()));
    for (auto& v : out) v = (v * brightness - mean) * contrast + mean;
  }

  if (C == 3 && bernoulli(rng, cfg.grayscale_prob)) {
    const std::size_t plane = H * W;
    for (std::size_t p = 0; p < plane; ++p) {
      const float g = 0.299f * out[p] + 0.587f * out[plane + p] + 0.114f * out[2 * plane + p];
      out[p] = out[plane + p] = out[2 * plane + p] = g;
    }
  }
  return out;
}

}  // namespace detail

/// Draws one augmented view. Two calls with the same rng give the paired views.
inline std::vector<float> augment(const std::vector<float>& x, const AugmentationConfig& cfg, Rng& rng) {
  if (cfg.kind == AugmentationKind::image) return detail::augment_image(x, cfg, rng);
  std::vector<float> out(x.size());
  for (std::size_t d = 0; d < out.size(); ++d) {
    const double noisy = x[d] + cfg.noise_std * standard_normal(rng);
    out[d] = bernoulli(rng, cfg.dropout) ? 0.0f : static_cast<float>(noisy);
  }
  return out;
}

inline std::vector<float> augment(const LabeledSample& sample, const AugmentationConfig& cfg, Rng& rng) {
  return augment(sample.x, cfg, rng);
}

}  // namespace solar
