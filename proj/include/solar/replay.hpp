#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "solar/random.hpp"

namespace solar {

enum class BufferPolicy { fifo, reservoir, lars, per, deviation_aware };

inline std::string_view to_string(BufferPolicy p) {
  switch (p) {
    case BufferPolicy::fifo: return "fifo";
    case BufferPolicy::reservoir: return "reservoir";
    case BufferPolicy::lars: return "lars";
    case BufferPolicy::per: return "per";
    case BufferPolicy::deviation_aware: return "deviation_aware";
  }
  return "unknown";
}

inline BufferPolicy parse_policy(std::string_view s) {
  for (auto p : {BufferPolicy::fifo, BufferPolicy::reservoir, BufferPolicy::lars, BufferPolicy::per,
                 BufferPolicy::deviation_aware})
    if (to_string(p) == s) return p;
  throw std::invalid_argument("unknown buffer policy '" + std::string(s) + "'");
}

/// <x, loss, mean feature, mean angle, extraction count> plus the dataset
/// index used for membership tests.
struct BufferEntry {
  std::size_t sample_id = 0;
  std::vector<float> x;
  float loss = 0.0f;
  std::vector<float> mean_feature;
  float mean_angle = 0.0f;
  std::uint64_t extraction_count = 0;

  friend bool operator==(const BufferEntry&, const BufferEntry&) = default;
};

/// A sample offered to the buffer together with its just-computed statistics.
struct Candidate {
  std::size_t sample_id = 0;
  std::vector<float> x;
  float loss = 0.0f;
  std::vector<float> mean_feature;
  float mean_angle = 0.0f;
};

struct ExtractResult {
  std::vector<std::size_t> slots;       // positions in entries() at extraction time
  std::vector<std::size_t> sample_ids;  // same order as slots
  bool short_extraction = false;        // fewer entries than requested
};

/// Frozen snapshot of a buffer entry's latent summary.
struct EntrySummary {
  std::size_t sample_id = 0;
  float loss = 0.0f;
  std::vector<float> mean_feature;
  float mean_angle = 0.0f;
};

/// Min-max normalization to [0,1]; a degenerate range maps to all zeros.
inline std::vector<double> min_max_normalize(std::span<const double> v) {
  std::vector<double> out(v.size(), 0.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - top);
  for (auto& p : out) p /= z;
  return out;
}

/// Bounded replay memory with pluggable insertion and extraction rules.
///
/// Insertion:
///   fifo / per        append, drop the oldest beyond capacity
///   reservoir         classic reservoir sampling, accept with probability M/t
///   lars              reservoir acceptance, but overwrite the lowest-loss entry
///   deviation_aware   append, then drop the lowest-loss excess
/// Extraction (always without replacement):
///   deviation_aware   softmax(-minmax(extraction counts))
///   per               softmax(minmax(loss))
///   others            uniform
class ReplayBuffer {
 public:
  ReplayBuffer(BufferPolicy policy, std::size_t capacity, std::uint64_t seed)
      : policy_(policy), capacity_(capacity), rng_(make_rng(seed, 0xB0FF)) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
  }

  BufferPolicy policy() const { return policy_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t stream_counter() const { return seen_; }
  const std::vector<BufferEntry>& entries() const { return entries_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

  std::optional<std::size_t> find(std::size_t sample_id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].sample_id == sample_id) return i;
    return std::nullopt;
  }

  void insert(Candidate c) {
    std::vector<Candidate> one;
    one.push_back(std::move(c));
    insert(std::move(one));
  }

  void insert(std::vector<Candidate> batch) {
    for (auto& c : batch) {
      ++seen_;
      switch (policy_) {
        case BufferPolicy::fifo:
        case BufferPolicy::per:
          entries_.push_back(make_entry(std::move(c)));
          if (entries_.size() > capacity_) entries_.erase(entries_.begin());
          break;
        case BufferPolicy::reservoir:
        case BufferPolicy::lars: {
          if (entries_.size() < capacity_) {
            entries_.push_back(make_entry(std::move(c)));
            break;
          }
          const std::uint64_t j = uniform_index(rng_, seen_);
          if (j >= capacity_) break;
          const std::size_t slot = policy_ == BufferPolicy::reservoir ? static_cast<std::size_t>(j) : lowest_loss_slot();
          entries_[slot] = make_entry(std::move(c));
          break;
        }
        case BufferPolicy::deviation_aware:
          entries_.push_back(make_entry(std::move(c)));
          break;
      }
    }
    if (policy_ == BufferPolicy::deviation_aware) evict_lowest_loss();
  }

  /// EMA refresh of stored statistics: s <- eta * s + (1 - eta) * s_new.
  void update_stats(std::span<const std::size_t> sample_ids, std::span<const float> losses,
                    std::span<const std::vector<float>> mean_features, std::span<const float> mean_angles,
                    double eta) {
    if (sample_ids.size() != losses.size() || sample_ids.size() != mean_features.size() ||
        sample_ids.size() != mean_angles.size()) {
      throw std::invalid_argument("update_stats: argument lengths differ");
    }
    if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("update_stats: eta must be in [0,1]");
    const auto keep = static_cast<float>(eta);
    const auto take = static_cast<float>(1.0 - eta);
    for (std::size_t k = 0; k < sample_ids.size(); ++k) {
      const auto slot = find(sample_ids[k]);
      if (!slot) throw std::out_of_range("update_stats: sample " + std::to_string(sample_ids[k]) + " not in buffer");
      auto& e = entries_[*slot];
      e.loss = keep * e.loss + take * losses[k];
      if (e.mean_feature.size() != mean_features[k].size()) {
        throw std::invalid_argument("update_stats: feature width mismatch");
      }
      for (std::size_t i = 0; i < e.mean_feature.size(); ++i)
        e.mean_feature[i] = keep * e.mean_feature[i] + take * mean_features[k][i];
      e.mean_angle = keep * e.mean_angle + take * mean_angles[k];
    }
  }

  /// Current per-slot probability of being the next single draw.
  std::vector<double> extraction_probabilities() const {
    std::vector<double> key(entries_.size());
    switch (policy_) {
      case BufferPolicy::deviation_aware: {
        for (std::size_t i = 0; i < key.size(); ++i) key[i] = static_cast<double>(entries_[i].extraction_count);
        auto norm = min_max_normalize(key);
        for (auto& v : norm) v = -v;
        return softmax(norm);
      }
      case BufferPolicy::per: {
        for (std::size_t i = 0; i < key.size(); ++i) key[i] = entries_[i].loss;
        return softmax(min_max_normalize(key));
      }
      default:
        return std::vector<double>(entries_.size(), entries_.empty() ? 0.0 : 1.0 / static_cast<double>(entries_.size()));
    }
  }

  /// Draws `count` distinct entries and increments their extraction counts.
  ExtractResult extract(std::size_t count) {
    ExtractResult out;
    if (count > entries_.size()) {
      out.short_extraction = true;
      count = entries_.size();
    }
    std::vector<double> weights = extraction_probabilities();
    for (std::size_t draw = 0; draw < count; ++draw) {
      double total = 0.0;
      for (double w : weights) total += w;
      const double u = uniform01(rng_) * total;
      double acc = 0.0;
      std::size_t pick = weights.size();
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        acc += weights[i];
        pick = i;
        if (u < acc) break;
      }
      weights[pick] = 0.0;
      out.slots.push_back(pick);
      out.sample_ids.push_back(entries_[pick].sample_id);
    }
    for (auto s : out.slots) ++entries_[s].extraction_count;
    return out;
  }

  /// The K highest-loss entries not in `exclude`, ties broken by slot order.
  std::vector<EntrySummary> topk_by_loss(std::size_t k, std::span<const std::size_t> exclude = {}) const {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (std::find(exclude.begin(), exclude.end(), entries_[i].sample_id) == exclude.end()) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return entries_[a].loss > entries_[b].loss; });
    if (order.size() > k) order.resize(k);
    std::vector<EntrySummary> out;
    out.reserve(order.size());
    for (auto i : order) {
      const auto& e = entries_[i];
      out.push_back({e.sample_id, e.loss, e.mean_feature, e.mean_angle});
    }
    return out;
  }

  /// Replaces the whole state (checkpoint restore).
  void restore(std::vector<BufferEntry> entries, std::uint64_t stream_counter, const std::string& rng_state) {
    if (entries.size() > capacity_) throw std::invalid_argument("restore: more entries than capacity");
    entries_ = std::move(entries);
    seen_ = stream_counter;
    load_rng(rng_, rng_state);
  }

 private:
  static BufferEntry make_entry(Candidate c) {
    return {c.sample_id, std::move(c.x), c.loss, std::move(c.mean_feature), c.mean_angle, 0};
  }

  std::size_t lowest_loss_slot() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries_.size(); ++i)
      if (entries_[i].loss < entries_[best].loss) best = i;
    return best;
  }

  // Removes the ascending-loss prefix of size |M| - capacity, keeping the
  // survivors in their current order.
  void evict_lowest_loss() {
    if (entries_.size() <= capacity_) return;
    const std::size_t excess = entries_.size() - capacity_;
    std::vector<std::size_t> order(entries_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return entries_[a].loss < entries_[b].loss; });
    std::vector<bool> drop(entries_.size(), false);
    for (std::size_t i = 0; i < excess; ++i) drop[order[i]] = true;
    std::vector<BufferEntry> kept;
    kept.reserve(capacity_);
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (!drop[i]) kept.push_back(std::move(entries_[i]));
    entries_ = std::move(kept);
  }

  BufferPolicy policy_;
  std::size_t capacity_;
  std::vector<BufferEntry> entries_;
  std::uint64_t seen_ = 0;
  Rng rng_;
};

}  // namespace solar
