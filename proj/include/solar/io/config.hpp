#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "solar/metrics.hpp"
#include "solar/model.hpp"
#include "solar/probe.hpp"
#include "solar/replay.hpp"
#include "solar/stream.hpp"
#include "solar/trainer.hpp"

namespace solar::io {

inline constexpr const char* kOutputDirEnv = "SOLAR_OUTPUT_DIR";

/// Raised for unknown keys or unparsable values; key() names the offender.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Every accepted key with its default, in echo order.
inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"run_id", "run"},
      {"output_dir", "runs"},
      {"resume_from", ""},
      {"seed", "0"},
      // data
      {"dataset", "synthetic"},
      {"data_seed", "0"},
      {"num_classes", "10"},
      {"per_class", "200"},
      {"test_per_class", "100"},
      {"input_dim", "32"},
      {"cluster_scale", "3"},
      {"train_path", ""},
      {"test_path", ""},
      {"cifar_label", "fine"},
      // stream
      {"num_tasks", "5"},
      {"stream_batch_size", "10"},
      {"passes", "1"},
      {"shuffle_class_order", "false"},
      // augmentation
      {"noise_std", "0.1"},
      {"dropout", "0.2"},
      {"crop_padding", "4"},
      {"flip_prob", "0.5"},
      {"jitter_strength", "0.4"},
      {"jitter_prob", "0.8"},
      {"grayscale_prob", "0.2"},
      // model
      {"hidden_dim", "64"},
      {"feature_dim", "32"},
      {"proj_hidden_dim", "32"},
      {"proj_dim", "16"},
      {"pred_hidden_dim", "8"},
      {"bn_eps", "1e-05"},
      {"bn_momentum", "0.1"},
      // replay
      {"policy", "deviation_aware"},
      {"buffer_size", "256"},
      // trainer
      {"algorithm", "solar"},
      {"total_batch_size", "32"},
      {"overlap_weight", "1"},
      {"top_k", "32"},
      {"ema_decay", "0.5"},
      {"lr", "0.05"},
      {"momentum", "0.9"},
      {"weight_decay", "0.0001"},
      // probe
      {"probe_at_task_end", "true"},
      {"probe_batch_size", "256"},
      {"probe_lr", "0.05"},
      {"probe_decay", "3"},
      {"probe_max_epochs", "100"},
      {"probe_patience", "3"},
      {"probe_min_lr", "0.000617283951"},
      {"probe_val_fraction", "0.1"},
      // metrics
      {"metrics_every", "0"},
      {"metrics_views", "20"},
      {"metrics_seed", "7"},
      {"metrics_subsample", "0"},
      {"include_self_pairs", "true"},
      // checkpoints
      {"checkpoint_every", "0"},
  };
  return keys;
}

/// Flat key=value settings with every default filled in.
class ConfigMap {
 public:
  ConfigMap() {
    for (const auto& [k, v] : config_defaults()) values_[k] = v;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError(key, "unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(key, "unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (!s.empty() && s.front() == '-') throw std::invalid_argument("negative");
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ConfigError(key, "key '" + key + "': expected a non-negative integer, got '" + s + "'");
    return v;
  }

  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  double real(const std::string& key) const {
    const auto& s = str(key);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ConfigError(key, "key '" + key + "': expected a number, got '" + s + "'");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key, "key '" + key + "': expected true/false, got '" + s + "'");
  }

  /// key=value lines in default order.
  std::string resolved() const {
    std::string out;
    for (const auto& [k, d] : config_defaults()) out += k + "=" + values_.at(k) + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(line, "line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ConfigMap load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Typed view of a ConfigMap.
struct ExperimentConfig {
  ConfigMap raw;
  std::string run_id;
  std::string output_dir;
  std::string resume_from;
  bool synthetic = true;
  std::uint64_t data_seed = 0;
  std::size_t num_classes = 10, per_class = 200, test_per_class = 100, input_dim = 32;
  double cluster_scale = 3.0;
  std::string train_path, test_path;
  CifarLabel cifar_label = CifarLabel::fine;
  std::size_t num_tasks = 5, stream_batch_size = 10, passes = 1;
  bool shuffle_class_order = false;
  std::uint64_t seed = 0;
  AugmentationConfig augmentation;
  ModelConfig model;
  BufferPolicy policy = BufferPolicy::deviation_aware;
  std::size_t buffer_size = 256;
  TrainConfig train;
  bool probe_at_task_end = true;
  ProbeConfig probe;
  std::size_t metrics_every = 0;
  MetricsConfig metrics;
  std::size_t checkpoint_every = 0;
};

inline ExperimentConfig resolve(const ConfigMap& m) {
  ExperimentConfig c;
  c.raw = m;
  c.run_id = m.str("run_id");
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos)
    throw ConfigError("run_id", "key 'run_id': must be a non-empty name without '/'");
  c.output_dir = m.str("output_dir");
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) c.output_dir = env;
  c.resume_from = m.str("resume_from");
  c.seed = m.u64("seed");

  const auto& ds = m.str("dataset");
  if (ds == "synthetic") c.synthetic = true;
  else if (ds == "cifar100") c.synthetic = false;
  else throw ConfigError("dataset", "key 'dataset': expected synthetic or cifar100, got '" + ds + "'");
  c.data_seed = m.u64("data_seed");
  c.num_classes = m.size("num_classes");
  c.per_class = m.size("per_class");
  c.test_per_class = m.size("test_per_class");
  c.input_dim = m.size("input_dim");
  c.cluster_scale = m.real("cluster_scale");
  c.train_path = m.str("train_path");
  c.test_path = m.str("test_path");
  const auto& lvl = m.str("cifar_label");
  if (lvl == "fine") c.cifar_label = CifarLabel::fine;
  else if (lvl == "coarse") c.cifar_label = CifarLabel::coarse;
  else throw ConfigError("cifar_label", "key 'cifar_label': expected fine or coarse, got '" + lvl + "'");
  if (!c.synthetic && c.train_path.empty()) throw ConfigError("train_path", "key 'train_path': required for cifar100");

  c.num_tasks = m.size("num_tasks");
  c.stream_batch_size = m.size("stream_batch_size");
  c.passes = m.size("passes");
  if (c.stream_batch_size == 0) throw ConfigError("stream_batch_size", "key 'stream_batch_size': must be >= 1");
  if (c.passes == 0) throw ConfigError("passes", "key 'passes': must be >= 1");
  c.shuffle_class_order = m.flag("shuffle_class_order");

  auto& a = c.augmentation;
  a.kind = c.synthetic ? AugmentationKind::synthetic : AugmentationKind::image;
  a.noise_std = m.real("noise_std");
  a.dropout = m.real("dropout");
  a.crop_padding = m.size("crop_padding");
  a.flip_prob = m.real("flip_prob");
  a.jitter_strength = m.real("jitter_strength");
  a.jitter_prob = m.real("jitter_prob");
  a.grayscale_prob = m.real("grayscale_prob");
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    throw ConfigError(what.substr(0, what.find(' ')), "key '" + what.substr(0, what.find(' ')) + "': " + what);
  }

  auto& md = c.model;
  md.input_dim = c.synthetic ? c.input_dim : kCifarPixels;
  md.hidden_dim = m.size("hidden_dim");
  md.feature_dim = m.size("feature_dim");
  md.proj_hidden_dim = m.size("proj_hidden_dim");
  md.proj_dim = m.size("proj_dim");
  md.pred_hidden_dim = m.size("pred_hidden_dim");
  md.bn_eps = m.real("bn_eps");
  md.bn_momentum = m.real("bn_momentum");
  md.seed = c.seed;
  for (const char* k : {"hidden_dim", "feature_dim", "proj_hidden_dim", "proj_dim", "pred_hidden_dim"})
    if (m.size(k) == 0) throw ConfigError(k, std::string("key '") + k + "': must be >= 1");

  try {
    c.policy = parse_policy(m.str("policy"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("policy", std::string("key 'policy': ") + e.what());
  }
  c.buffer_size = m.size("buffer_size");
  if (c.buffer_size == 0) throw ConfigError("buffer_size", "key 'buffer_size': must be >= 1");

  auto& t = c.train;
  try {
    t.algorithm = parse_algorithm(m.str("algorithm"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("algorithm", std::string("key 'algorithm': ") + e.what());
  }
  t.total_batch_size = m.size("total_batch_size");
  t.overlap_weight = m.real("overlap_weight");
  t.top_k = m.size("top_k");
  t.ema_decay = m.real("ema_decay");
  t.sgd.learning_rate = m.real("lr");
  t.sgd.momentum = m.real("momentum");
  t.sgd.weight_decay = m.real("weight_decay");
  t.augment_seed = c.seed;
  if (t.total_batch_size < c.stream_batch_size)
    throw ConfigError("total_batch_size", "key 'total_batch_size': must be >= stream_batch_size");
  if (!(t.overlap_weight >= 0.0)) throw ConfigError("overlap_weight", "key 'overlap_weight': must be >= 0");
  if (!(t.ema_decay >= 0.0 && t.ema_decay <= 1.0)) throw ConfigError("ema_decay", "key 'ema_decay': must be in [0,1]");
  if (!(t.sgd.learning_rate > 0.0)) throw ConfigError("lr", "key 'lr': must be > 0");
  if (!(t.sgd.momentum >= 0.0 && t.sgd.momentum < 1.0)) throw ConfigError("momentum", "key 'momentum': must be in [0,1)");
  if (!(t.sgd.weight_decay >= 0.0)) throw ConfigError("weight_decay", "key 'weight_decay': must be >= 0");

  c.probe_at_task_end = m.flag("probe_at_task_end");
  auto& p = c.probe;
  p.batch_size = m.size("probe_batch_size");
  p.learning_rate = m.real("probe_lr");
  p.decay_factor = m.real("probe_decay");
  p.max_epochs = m.size("probe_max_epochs");
  p.patience = m.size("probe_patience");
  p.min_learning_rate = m.real("probe_min_lr");
  p.val_fraction = m.real("probe_val_fraction");
  p.seed = c.seed;
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("probe", std::string("probe settings: ") + e.what());
  }

  c.metrics_every = m.size("metrics_every");
  c.metrics.views = m.size("metrics_views");
  c.metrics.seed = m.u64("metrics_seed");
  c.metrics.subsample = m.size("metrics_subsample");
  c.metrics.include_self_pairs = m.flag("include_self_pairs");
  if (c.metrics.views < 2) throw ConfigError("metrics_views", "key 'metrics_views': must be >= 2");
  c.checkpoint_every = m.size("checkpoint_every");
  return c;
}

}  // namespace solar::io
