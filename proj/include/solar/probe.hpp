#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "solar/model.hpp"
#include "solar/random.hpp"
#include "solar/stream.hpp"

namespace solar {

struct ProbeConfig {
  std::size_t batch_size = 256;
  double learning_rate = 0.05;
  double decay_factor = 3.0;
  std::size_t max_epochs = 100;
  std::size_t patience = 3;
  double min_learning_rate = 0.05 / 81.0;
  double val_fraction = 0.1;
  std::uint64_t seed = 5;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("probe batch size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("probe lr must be positive");
    if (!(decay_factor > 1.0)) throw std::invalid_argument("probe decay factor must be > 1");
    if (!(min_learning_rate > 0.0 && min_learning_rate <= learning_rate))
      throw std::invalid_argument("probe min lr must be in (0, lr]");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("probe val fraction must be in (0,1)");
    if (patience == 0) throw std::invalid_argument("probe patience must be positive");
  }
};

/// Multinomial logistic regression on standardized inputs.
struct LinearClassifier {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> weight;  // [dim, classes]
  std::vector<double> bias;    // [classes]
  std::vector<double> shift;   // per-feature mean of the fitting data
  std::vector<double> scale;   // per-feature 1/std (1 where std == 0)
  std::size_t epochs_run = 0;

  std::vector<double> logits(std::span<const double> x) const {
    if (x.size() != dim) throw std::invalid_argument("classifier expects dimension " + std::to_string(dim));
    std::vector<double> out(bias);
    for (std::size_t i = 0; i < dim; ++i) {
      const double v = (x[i] - shift[i]) * scale[i];
      if (v == 0.0) continue;
      for (std::size_t c = 0; c < classes; ++c) out[c] += v * weight[i * classes + c];
    }
    return out;
  }

  int predict(std::span<const double> x) const {
    const auto l = logits(x);
    return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
  }
};

inline double evaluate_accuracy(const LinearClassifier& clf, std::span<const std::vector<double>> features,
                                std::span<const int> labels) {
  if (features.empty()) throw std::invalid_argument("evaluate_accuracy: empty evaluation set");
  if (features.size() != labels.size()) throw std::invalid_argument("evaluate_accuracy: feature/label count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < features.size(); ++i)
    if (clf.predict(features[i]) == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(features.size());
}

namespace detail {

inline void sgd_epoch(LinearClassifier& clf, std::span<const std::vector<double>> x, std::span<const int> y,
                      std::vector<std::size_t>& order, double lr, std::size_t batch, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  const std::size_t C = clf.classes;
  std::vector<double> gw(clf.weight.size()), gb(C), z(clf.dim);
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t k = start; k < end; ++k) {
      const auto& row = x[order[k]];
      auto p = clf.logits(row);
      const double top = *std::max_element(p.begin(), p.end());
      double zsum = 0.0;
      for (auto& v : p) zsum += v = std::exp(v - top);
      for (auto& v : p) v /= zsum;
      p[static_cast<std::size_t>(y[order[k]])] -= 1.0;
      for (std::size_t i = 0; i < clf.dim; ++i) z[i] = (row[i] - clf.shift[i]) * clf.scale[i];
      for (std::size_t i = 0; i < clf.dim; ++i) {
        if (z[i] == 0.0) continue;
        for (std::size_t c = 0; c < C; ++c) gw[i * C + c] += z[i] * p[c];
      }
      for (std::size_t c = 0; c < C; ++c) gb[c] += p[c];
    }
    const double step = lr / static_cast<double>(end - start);
    for (std::size_t i = 0; i < gw.size(); ++i) clf.weight[i] -= step * gw[i];
    for (std::size_t c = 0; c < C; ++c) clf.bias[c] -= step * gb[c];
  }
}

}  // namespace detail

/// Minibatch SGD on the softmax cross-entropy. A seeded `val_fraction` split
/// of the inputs drives plateau decay: the lr is divided by `decay_factor`
/// after `patience` epochs without a validation improvement, and training
/// ends once it reaches `min_learning_rate` or after `max_epochs`.
inline LinearClassifier fit_linear_probe(std::span<const std::vector<double>> features, std::span<const int> labels,
                                         const ProbeConfig& cfg) {
  cfg.validate();
  if (features.size() != labels.size()) throw std::invalid_argument("fit_linear_probe: feature/label count mismatch");
  if (features.size() < 2) throw std::invalid_argument("fit_linear_probe: need at least 2 samples");
  int max_label = -1;
  bool multi = false;
  for (auto l : labels) {
    if (l < 0) throw std::invalid_argument("fit_linear_probe: negative label");
    max_label = std::max(max_label, l);
    if (l != labels.front()) multi = true;
  }
  if (!multi) throw std::invalid_argument("fit_linear_probe: labels contain a single class");

  LinearClassifier clf;
  clf.dim = features.front().size();
  clf.classes = static_cast<std::size_t>(max_label) + 1;
  clf.weight.assign(clf.dim * clf.classes, 0.0);
  clf.bias.assign(clf.classes, 0.0);
  clf.shift.assign(clf.dim, 0.0);
  clf.scale.assign(clf.dim, 1.0);
  for (const auto& f : features) {
    if (f.size() != clf.dim) throw std::invalid_argument("fit_linear_probe: ragged features");
    for (std::size_t i = 0; i < clf.dim; ++i) clf.shift[i] += f[i];
  }
  const double n = static_cast<double>(features.size());
  for (auto& m : clf.shift) m /= n;
  std::vector<double> var(clf.dim, 0.0);
  for (const auto& f : features)
    for (std::size_t i = 0; i < clf.dim; ++i) var[i] += (f[i] - clf.shift[i]) * (f[i] - clf.shift[i]);
  for (std::size_t i = 0; i < clf.dim; ++i) {
    const double sd = std::sqrt(var[i] / n);
    clf.scale[i] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }

  Rng rng = make_rng(cfg.seed, 0x9B0BE);
  std::vector<std::size_t> idx(features.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  std::size_t n_val = static_cast<std::size_t>(std::round(cfg.val_fraction * n));
  n_val = std::clamp<std::size_t>(n_val, 1, features.size() - 1);
  std::vector<std::vector<double>> val_x;
  std::vector<int> val_y;
  for (std::size_t i = 0; i < n_val; ++i) {
    val_x.push_back(features[idx[i]]);
    val_y.push_back(labels[idx[i]]);
  }
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());

  double lr = cfg.learning_rate;
  double best = -1.0;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    detail::sgd_epoch(clf, features, labels, train, lr, cfg.batch_size, rng);
    clf.epochs_run = epoch + 1;
    const double acc = evaluate_accuracy(clf, val_x, val_y);
    if (acc > best) {
      best = acc;
      stale = 0;
      continue;
    }
    if (++stale < cfg.patience) continue;
    stale = 0;
    lr /= cfg.decay_factor;
    if (lr <= cfg.min_learning_rate * (1.0 + 1e-9)) break;
  }
  return clf;
}

struct AccuracyReport {
  std::vector<double> per_checkpoint;
  double final_accuracy = 0.0;
  double average_accuracy = 0.0;
};

inline AccuracyReport summarize(std::span<const double> task_end_accuracies) {
  if (task_end_accuracies.empty()) throw std::invalid_argument("summarize: no checkpoint accuracies");
  AccuracyReport r;
  r.per_checkpoint.assign(task_end_accuracies.begin(), task_end_accuracies.end());
  r.final_accuracy = r.per_checkpoint.back();
  double s = 0.0;
  for (double a : r.per_checkpoint) s += a;
  r.average_accuracy = s / static_cast<double>(r.per_checkpoint.size());
  return r;
}

inline std::vector<int> labels_of(const Dataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(s.label);
  return out;
}

/// Fits a probe on frozen encoder features of `train` and reports top-1
/// accuracy on `test`.
template <typename T>
double probe_accuracy(const SSLModel<T>& model, const Dataset& train, const Dataset& test, const ProbeConfig& cfg) {
  const auto train_f = encode_dataset(model, train);
  const auto clf = fit_linear_probe(train_f, labels_of(train), cfg);
  const auto test_f = encode_dataset(model, test);
  return evaluate_accuracy(clf, test_f, labels_of(test));
}

}  // namespace solar
