#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "solar/model.hpp"
#include "solar/numerics/graph.hpp"
#include "solar/numerics/sgd.hpp"
#include "solar/replay.hpp"
#include "solar/stream.hpp"

namespace solar {

/// solar: SSL loss + weighted Overlap loss. er: SSL loss only (plain
/// experience replay); the buffer policy is chosen independently.
enum class Algorithm { solar, er };

inline std::string_view to_string(Algorithm a) { return a == Algorithm::solar ? "solar" : "er"; }

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "solar") return Algorithm::solar;
  if (s == "er") return Algorithm::er;
  throw std::invalid_argument("unknown algorithm '" + std::string(s) + "'");
}

struct TrainConfig {
  Algorithm algorithm = Algorithm::solar;
  std::size_t total_batch_size = 32;
  double overlap_weight = 1.0;
  std::size_t top_k = 32;
  double ema_decay = 0.5;
  SgdConfig sgd{};
  std::uint64_t augment_seed = 11;

  void validate(std::size_t stream_batch_size) const {
    if (total_batch_size < stream_batch_size) throw std::invalid_argument("total_batch_size must be >= stream batch size");
    if (!(overlap_weight >= 0.0)) throw std::invalid_argument("overlap_weight must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw std::invalid_argument("ema_decay must be in [0,1]");
    if (!(sgd.learning_rate > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) throw std::invalid_argument("momentum must be in [0,1)");
    if (!(sgd.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  }
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t task = 0;
  std::size_t stream_batch = 0;
  std::size_t pass = 0;
  std::size_t batch_size = 0;
  std::size_t stream_samples = 0;
  double ssl_loss = 0.0;
  double overlap_loss = 0.0;
  double total_loss = 0.0;
  std::size_t buffer_size = 0;
  bool skipped = false;
  std::vector<float> sample_losses;
};

/// Hinge on positive Overlap between live minibatch summaries and frozen
/// buffer summaries:
///   (1/b) sum_i (1/K) sum_k max(0, theta_i + theta_k - angle(zbar_i, zbar_k)).
/// `target_means` [K, d] and `target_angles` [K] enter as constants.
template <typename T>
typename Graph<T>::NodeId overlap_loss(Graph<T>& g, typename Graph<T>::NodeId mean_features,
                                       typename Graph<T>::NodeId mean_angles, const Tensor<T>& target_means,
                                       const Tensor<T>& target_angles) {
  if (target_means.rows() != target_angles.size()) throw std::invalid_argument("overlap_loss: target count mismatch");
  const auto zk = g.constant(target_means);
  const auto tk = g.constant(target_angles);
  const auto between = g.arccos(g.pairwise_cosine(mean_features, zk));
  const auto ov = g.add_row_vector(g.add_col_vector(g.scale(between, T{-1}), mean_angles), tk);
  return g.mean(g.relu(ov));
}

template <typename T>
typename Graph<T>::NodeId overlap_loss(Graph<T>& g, typename Graph<T>::NodeId mean_features,
                                       typename Graph<T>::NodeId mean_angles, std::span<const EntrySummary> targets) {
  if (targets.empty()) return g.constant(Tensor<T>::scalar(T{0}));
  const std::size_t d = targets.front().mean_feature.size();
  Tensor<T> means({targets.size(), d});
  Tensor<T> angles({targets.size()});
  for (std::size_t k = 0; k < targets.size(); ++k) {
    for (std::size_t c = 0; c < d; ++c) means.at(k, c) = static_cast<T>(targets[k].mean_feature[c]);
    angles[k] = static_cast<T>(targets[k].mean_angle);
  }
  return overlap_loss(g, mean_features, mean_angles, means, angles);
}

/// Owns the model, optimizer, replay buffer and augmentation stream of one run.
class Trainer {
 public:
  using Scalar = float;

  Trainer(const Dataset& data, const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentationConfig& aug,
          BufferPolicy policy, std::size_t buffer_capacity, std::uint64_t buffer_seed)
      : data_(&data),
        cfg_(cfg),
        aug_(aug),
        model_(model_cfg),
        buffer_(policy, buffer_capacity, buffer_seed),
        aug_rng_(make_rng(cfg.augment_seed, 0xA06)) {
    opt_.config = cfg.sgd;
    aug_.validate();
  }

  /// One training step with the configured algorithm.
  StepRecord step(std::span<const std::size_t> stream_batch, std::size_t pass) {
    return cfg_.algorithm == Algorithm::solar ? solar_step(stream_batch, pass) : er_step(stream_batch, pass);
  }

  StepRecord solar_step(std::span<const std::size_t> stream_batch, std::size_t pass) {
    return run_step(stream_batch, pass, cfg_.overlap_weight);
  }

  StepRecord er_step(std::span<const std::size_t> stream_batch, std::size_t pass) {
    return run_step(stream_batch, pass, 0.0);
  }

  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }
  const AugmentationConfig& augmentation() const { return aug_; }
  const Dataset& dataset() const { return *data_; }
  SSLModel<Scalar>& model() { return model_; }
  const SSLModel<Scalar>& model() const { return model_; }
  ReplayBuffer& buffer() { return buffer_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  OptimizerState<Scalar>& optimizer() { return opt_; }
  const OptimizerState<Scalar>& optimizer() const { return opt_; }
  Rng& augment_rng() { return aug_rng_; }
  const Rng& augment_rng() const { return aug_rng_; }
  std::size_t steps_done() const { return steps_; }
  void set_steps_done(std::size_t s) { steps_ = s; }

 private:
  StepRecord run_step(std::span<const std::size_t> stream_batch, std::size_t pass, double omega) {
    StepRecord rec;
    rec.step = steps_++;
    rec.pass = pass;

    const bool with_stream = pass == 0 && !stream_batch.empty();
    const std::size_t b_s = with_stream ? stream_batch.size() : 0;
    const std::size_t want = cfg_.total_batch_size > b_s ? cfg_.total_batch_size - b_s : 0;
    const ExtractResult ext = buffer_.extract(want);

    std::vector<std::size_t> ids = ext.sample_ids;
    std::vector<std::vector<float>> inputs;
    inputs.reserve(ids.size() + b_s);
    for (auto slot : ext.slots) inputs.push_back(buffer_.entries()[slot].x);
    if (with_stream) {
      for (auto idx : stream_batch) {
        if (idx >= data_->size()) throw std::out_of_range("stream index " + std::to_string(idx) + " outside dataset");
        ids.push_back(idx);
        inputs.push_back((*data_)[idx].x);
      }
    }
    const std::size_t n = ids.size();
    rec.batch_size = n;
    rec.stream_samples = b_s;

    if (n < 2) {
      // Batch statistics are undefined for fewer than two rows.
      rec.skipped = true;
      if (with_stream) {
        std::vector<Candidate> fresh;
        for (auto idx : stream_batch)
          fresh.push_back({idx, (*data_)[idx].x, 0.0f, std::vector<float>(model_.config().feature_dim, 0.0f), 0.0f});
        buffer_.insert(std::move(fresh));
      }
      rec.buffer_size = buffer_.size();
      return rec;
    }

    std::vector<std::vector<float>> view1, view2;
    view1.reserve(n);
    view2.reserve(n);
    for (const auto& x : inputs) {
      view1.push_back(augment(x, aug_, aug_rng_));
      view2.push_back(augment(x, aug_, aug_rng_));
    }

    Graph<Scalar> g;
    auto bind = model_.bind(g, Mode::train);
    const auto x1 = g.input("view1", stack_rows<Scalar, std::vector<float>>(view1));
    const auto x2 = g.input("view2", stack_rows<Scalar, std::vector<float>>(view2));
    const auto out = forward_views(model_, g, bind, x1, x2);
    const auto per_sample = simsiam_pair_loss(g, out.prediction1, out.prediction2, out.projection1, out.projection2);
    const auto ssl = g.mean(per_sample);
    const auto zbar = two_view_mean_feature(g, out.feature1, out.feature2);
    const auto theta = two_view_mean_angle(g, out.feature1, out.feature2);

    auto total = ssl;
    if (omega > 0.0 && cfg_.top_k > 0) {
      const auto targets = buffer_.topk_by_loss(cfg_.top_k, ids);
      if (!targets.empty()) {
        const auto ov = overlap_loss<Scalar>(g, zbar, theta, targets);
        rec.overlap_loss = g.value(ov).item();
        total = g.add(ssl, g.scale(ov, static_cast<Scalar>(omega)));
      }
    }
    rec.ssl_loss = g.value(ssl).item();
    rec.total_loss = g.value(total).item();

    g.backward(total);
    auto params = model_.parameters();
    std::vector<Tensor<Scalar>*> ptrs;
    std::vector<Tensor<Scalar>> grads;
    for (std::size_t i = 0; i < params.size(); ++i) {
      ptrs.push_back(params[i].second);
      grads.push_back(g.grad(bind.params[i]));
    }
    sgd_update<Scalar>(ptrs, grads, opt_);
    model_.update_running_stats(g, bind);

    // Buffer update: stored loss is l + 1 so it is nonnegative.
    const auto& losses = g.value(per_sample);
    const auto& means = g.value(zbar);
    const auto& angles = g.value(theta);
    rec.sample_losses.assign(losses.data().begin(), losses.data().end());
    const std::size_t from_buffer = ext.sample_ids.size();
    std::vector<float> upd_loss, upd_angle;
    std::vector<std::vector<float>> upd_mean;
    for (std::size_t i = 0; i < from_buffer; ++i) {
      upd_loss.push_back(losses[i] + 1.0f);
      upd_mean.emplace_back(means.row(i).begin(), means.row(i).end());
      upd_angle.push_back(angles[i]);
    }
    buffer_.update_stats(ext.sample_ids, upd_loss, upd_mean, upd_angle, cfg_.ema_decay);
    if (with_stream) {
      std::vector<Candidate> fresh;
      fresh.reserve(b_s);
      for (std::size_t i = from_buffer; i < n; ++i) {
        fresh.push_back({ids[i], std::move(inputs[i]), losses[i] + 1.0f,
                         std::vector<float>(means.row(i).begin(), means.row(i).end()), angles[i]});
      }
      buffer_.insert(std::move(fresh));
    }
    rec.buffer_size = buffer_.size();
    return rec;
  }

  const Dataset* data_;
  TrainConfig cfg_;
  AugmentationConfig aug_;
  SSLModel<Scalar> model_;
  OptimizerState<Scalar> opt_;
  ReplayBuffer buffer_;
  Rng aug_rng_;
  std::size_t steps_ = 0;
};

// -- stream driver -------------------------------------------------------------

struct RunHooks {
  std::function<void(const StepRecord&)> on_step;
  std::size_t metrics_every = 0;
  std::function<void(std::size_t steps_done)> on_metrics;
  std::size_t checkpoint_every = 0;
  std::function<void(std::size_t steps_done)> on_checkpoint;
  std::function<void(std::size_t task, std::size_t steps_done)> on_task_end;
  std::size_t stop_after = 0;  // stop once this many global steps are done; 0 = run to the end
};

struct RunSummary {
  std::size_t steps_run = 0;
  std::size_t total_steps = 0;
  std::size_t tasks_completed = 0;
};

class StreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Iterates every stream minibatch once with `passes` training steps each
/// (pass 0 carries the stream batch), resuming at trainer.steps_done().
inline RunSummary run_stream(Trainer& trainer, const StreamSchedule& schedule, const RunHooks& hooks = {}) {
  const auto batches = schedule.batches();
  const std::size_t passes = schedule.passes;
  RunSummary summary;
  summary.total_steps = batches.size() * passes;
  for (std::size_t s = trainer.steps_done(); s < summary.total_steps; ++s) {
    if (hooks.stop_after && s >= hooks.stop_after) break;
    const std::size_t bi = s / passes;
    const std::size_t pass = s % passes;
    const auto& batch = batches[bi];
    StepRecord rec;
    try {
      rec = trainer.step(pass == 0 ? std::span<const std::size_t>(batch.indices) : std::span<const std::size_t>{}, pass);
    } catch (const std::exception& e) {
      throw StreamError("stream batch " + std::to_string(bi) + " pass " + std::to_string(pass) + " (step " +
                        std::to_string(s) + "): " + e.what());
    }
    rec.task = batch.task;
    rec.stream_batch = bi;
    ++summary.steps_run;
    const std::size_t done = s + 1;
    if (hooks.on_step) hooks.on_step(rec);
    if (hooks.metrics_every && hooks.on_metrics && done % hooks.metrics_every == 0) hooks.on_metrics(done);
    const bool task_end = pass + 1 == passes && (bi + 1 == batches.size() || batches[bi + 1].task != batch.task);
    if (task_end) {
      ++summary.tasks_completed;
      if (hooks.on_task_end) hooks.on_task_end(batch.task, done);
    }
    if (hooks.checkpoint_every && hooks.on_checkpoint && done % hooks.checkpoint_every == 0) hooks.on_checkpoint(done);
  }
  return summary;
}

}  // namespace solar
