#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "solar/io/checkpoint.hpp"
#include "solar/io/config.hpp"
#include "solar/io/csv.hpp"
#include "solar/io/experiment.hpp"
#include "solar/io/report.hpp"
#include "solar/metrics.hpp"
#include "solar/probe.hpp"

namespace {

solar::io::ExperimentConfig load(const std::string& path) {
  return solar::io::resolve(solar::io::load_config(path));
}

solar::SSLModel<float> model_from(const solar::io::ExperimentConfig& cfg, const solar::io::ExperimentData& data,
                                  const std::string& checkpoint) {
  auto trainer = solar::io::make_trainer(cfg, data.train);
  solar::io::restore(solar::io::load_checkpoint(checkpoint), trainer);
  return trainer.model();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online continual self-supervised learning lab"};
  app.require_subcommand(1);

  std::string config_path, run_dir, checkpoint;
  auto* run = app.add_subcommand("run", "train one configured experiment");
  run->add_option("config", config_path, "key=value config file")->required();

  auto* rep = app.add_subcommand("report", "summarize a run directory or a directory of runs");
  rep->add_option("dir", run_dir, "run directory")->required();

  auto* probe = app.add_subcommand("probe", "linear-probe accuracy of a checkpoint");
  probe->add_option("checkpoint", checkpoint)->required();
  probe->add_option("config", config_path)->required();

  auto* metrics = app.add_subcommand("metrics", "latent-space metrics of a checkpoint");
  metrics->add_option("checkpoint", checkpoint)->required();
  metrics->add_option("config", config_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return solar::io::run_experiment(load(config_path), std::cerr);
    if (*rep) return solar::io::report(run_dir, std::cout, std::cerr);

    const auto cfg = load(config_path);
    const auto data = solar::io::load_data(cfg);
    const auto model = model_from(cfg, data, checkpoint);
    if (*probe) {
      std::cout << "accuracy," << solar::io::fmt(solar::probe_accuracy(model, data.train, data.test, cfg.probe)) << "\n";
      return 0;
    }
    const auto m = solar::evaluate_latent_metrics(model, data.train, cfg.augmentation, cfg.metrics,
                                                  solar::io::load_checkpoint(checkpoint).step);
    const auto header = solar::io::metrics_header(cfg.model.feature_dim);
    for (std::size_t i = 0; i < header.size(); ++i) std::cout << (i ? "," : "") << header[i];
    std::cout << "\n";
    const auto row = solar::io::metrics_row(m);
    for (std::size_t i = 0; i < row.size(); ++i) std::cout << (i ? "," : "") << row[i];
    std::cout << "\n";
    return 0;
  } catch (const solar::io::ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
