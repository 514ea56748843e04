#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "solar/io/checkpoint.hpp"
#include "solar/io/config.hpp"
#include "solar/io/csv.hpp"
#include "solar/metrics.hpp"
#include "solar/probe.hpp"
#include "solar/stream.hpp"
#include "solar/trainer.hpp"

namespace solar::io {

struct ExperimentData {
  Dataset train;
  Dataset test;
};

/// Synthetic runs draw a held-out split around the same centers; CIFAR runs
/// fall back to probing on the training file when no test file is given.
inline ExperimentData load_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (c.synthetic) {
    d.train = generate_synthetic(c.num_classes, c.per_class, c.input_dim, c.cluster_scale, c.data_seed, 0);
    d.test = generate_synthetic(c.num_classes, c.test_per_class, c.input_dim, c.cluster_scale, c.data_seed, 1);
  } else {
    d.train = read_cifar_binary(c.train_path, c.cifar_label);
    d.test = c.test_path.empty() ? d.train : read_cifar_binary(c.test_path, c.cifar_label);
  }
  return d;
}

inline Trainer make_trainer(const ExperimentConfig& c, const Dataset& train) {
  return Trainer(train, c.model, c.train, c.augmentation, c.policy, c.buffer_size, c.seed);
}

inline const std::vector<std::string>& steps_header() {
  static const std::vector<std::string> h = {"step",       "task",         "stream_batch", "pass",
                                             "batch_size", "stream_size",  "ssl_loss",     "overlap_loss",
                                             "total_loss", "buffer_size", "skipped"};
  return h;
}

inline std::vector<std::string> step_row(const StepRecord& r) {
  return {std::to_string(r.step),       std::to_string(r.task),       std::to_string(r.stream_batch),
          std::to_string(r.pass),       std::to_string(r.batch_size), std::to_string(r.stream_samples),
          fmt(r.ssl_loss),              fmt(r.overlap_loss),          fmt(r.total_loss),
          std::to_string(r.buffer_size), r.skipped ? "1" : "0"};
}

inline std::vector<std::string> metrics_header(std::size_t feature_dim) {
  std::vector<std::string> h = {"checkpoint_step", "deviation_mean", "avg_overlap_count", "uniformity"};
  for (std::size_t k = 1; k <= feature_dim; k *= 2) h.push_back("cev_at_" + std::to_string(k));
  return h;
}

inline std::vector<std::string> metrics_row(const LatentMetrics& m) {
  std::vector<std::string> row = {std::to_string(m.step), fmt(m.deviation_mean), fmt(m.avg_overlap_count),
                                  fmt(m.uniformity)};
  for (const auto& [k, v] : m.cev) row.push_back(fmt(v));
  return row;
}

inline std::filesystem::path run_directory(const ExperimentConfig& c) {
  return std::filesystem::path(c.output_dir) / c.run_id;
}

inline std::string checkpoint_name(std::size_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "step_%08zu.solr", step);
  return buf;
}

/// Runs one configured experiment into <output_dir>/<run_id>. Returns 0 on
/// success; on failure writes error.txt next to the partial artifacts and
/// returns 1.
inline int run_experiment(const ExperimentConfig& c, std::ostream& log) {
  namespace fs = std::filesystem;
  const fs::path dir = run_directory(c);
  fs::create_directories(dir / "checkpoints");
  {
    std::ofstream echo(dir / "config.resolved");
    echo << c.raw.resolved();
    if (!c.raw.str("output_dir").empty() && c.output_dir != c.raw.str("output_dir"))
      echo << "# output_dir overridden by " << kOutputDirEnv << "=" << c.output_dir << "\n";
  }
  fs::remove(dir / "error.txt");

  std::size_t step_now = 0;
  try {
    const auto data = load_data(c);
    const auto schedule = build_schedule(data.train, c.num_tasks, c.stream_batch_size, c.passes, c.seed,
                                         c.shuffle_class_order);
    Trainer trainer = make_trainer(c, data.train);
    std::vector<TaskAccuracy> history;
    if (!c.resume_from.empty()) {
      const auto ckpt = load_checkpoint(c.resume_from);
      restore(ckpt, trainer);
      history = ckpt.history;
      log << "resumed from " << c.resume_from << " at step " << ckpt.step << "\n";
    }

    CsvWriter steps((dir / "steps.csv").string(), steps_header());
    CsvWriter metrics((dir / "metrics.csv").string(), metrics_header(c.model.feature_dim));
    CsvWriter accuracy((dir / "accuracy.csv").string(), {"task", "step", "accuracy"});
    for (const auto& h : history) accuracy.row({std::to_string(h.task), std::to_string(h.step), fmt(h.accuracy)});

    RunHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
      step_now = r.step + 1;
      steps.row(step_row(r));
    };
    hooks.metrics_every = c.metrics_every;
    hooks.on_metrics = [&](std::size_t done) {
      metrics.row(metrics_row(evaluate_latent_metrics(trainer.model(), data.train, c.augmentation, c.metrics, done)));
    };
    hooks.checkpoint_every = c.checkpoint_every;
    hooks.on_checkpoint = [&](std::size_t done) {
      save_checkpoint((dir / "checkpoints" / checkpoint_name(done)).string(), capture(trainer, history));
    };
    hooks.on_task_end = [&](std::size_t task, std::size_t done) {
      if (!c.probe_at_task_end) return;
      const double acc = probe_accuracy(trainer.model(), data.train, data.test, c.probe);
      history.push_back({task, done, acc});
      accuracy.row({std::to_string(task), std::to_string(done), fmt(acc)});
      log << "task " << task << " done at step " << done << ": probe accuracy " << fmt(acc) << "\n";
    };

    const auto summary = run_stream(trainer, schedule, hooks);
    save_checkpoint((dir / "checkpoints" / "final.solr").string(), capture(trainer, history));

    CsvWriter sum((dir / "summary.csv").string(), {"final_accuracy", "average_accuracy", "tasks", "steps"});
    if (!history.empty()) {
      std::vector<double> accs;
      for (const auto& h : history) accs.push_back(h.accuracy);
      const auto rep = summarize(accs);
      sum.row({fmt(rep.final_accuracy), fmt(rep.average_accuracy), std::to_string(history.size()),
               std::to_string(summary.total_steps)});
    }
    log << "finished " << summary.steps_run << " steps into " << dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::ofstream err(dir / "error.txt");
    err << "step " << step_now << ": " << e.what() << "\n";
    log << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace solar::io
