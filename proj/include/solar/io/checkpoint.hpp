#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "solar/numerics/tensor.hpp"
#include "solar/replay.hpp"
#include "solar/trainer.hpp"

namespace solar::io {

inline constexpr char kCheckpointMagic[4] = {'S', 'O', 'L', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct TaskAccuracy {
  std::uint64_t task = 0;
  std::uint64_t step = 0;
  double accuracy = 0.0;

  friend bool operator==(const TaskAccuracy&, const TaskAccuracy&) = default;
};

/// Layout (all integers and floats little-endian):
///   "SOLR" u32 version  u64 step
///   u32 n_tensors { u32 name_len, name, u32 rank, u64 dims[rank], f32 data }
///   u8 policy  u64 capacity  u64 stream_counter  u64 n_entries
///     { u64 sample_id, u32 n, f32 x[n], f32 loss, u32 m, f32 mean[m], f32 angle, u64 extractions }
///   u32 n_rngs { u32 len, name, u32 len, state }
///   u32 n_history { u64 task, u64 step, f64 accuracy }
struct Checkpoint {
  std::uint64_t step = 0;
  std::vector<NamedTensor> tensors;
  BufferPolicy policy = BufferPolicy::fifo;
  std::uint64_t capacity = 0;
  std::uint64_t stream_counter = 0;
  std::vector<BufferEntry> buffer;
  std::vector<std::pair<std::string, std::string>> rng_states;
  std::vector<TaskAccuracy> history;

  const Tensor<float>* tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
  const std::string* rng_state(const std::string& name) const {
    for (const auto& [n, s] : rng_states)
      if (n == name) return &s;
    return nullptr;
  }
};

namespace detail {

class Writer {
 public:
  template <typename U>
  void put(U v) {
    if constexpr (std::is_same_v<U, float>) {
      put(std::bit_cast<std::uint32_t>(v));
    } else if constexpr (std::is_same_v<U, double>) {
      put(std::bit_cast<std::uint64_t>(v));
    } else {
      for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_floats(std::span<const float> v) {
    for (float f : v) put(f);
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& b) : b_(b) {}

  template <typename U>
  U get(const char* what) {
    if constexpr (std::is_same_v<U, float>) {
      return std::bit_cast<float>(get<std::uint32_t>(what));
    } else if constexpr (std::is_same_v<U, double>) {
      return std::bit_cast<double>(get<std::uint64_t>(what));
    } else {
      need(sizeof(U), what);
      U v = 0;
      for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i));
      pos_ += sizeof(U);
      return v;
    }
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::vector<float> get_floats(std::size_t n, const char* what) {
    if (n > remaining() / 4) throw CheckpointError(std::string("truncated checkpoint reading ") + what);
    std::vector<float> v(n);
    for (auto& f : v) f = get<float>(what);
    return v;
  }
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) throw CheckpointError(std::string("truncated checkpoint reading ") + what);
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.raw(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put(c.step);
  w.put(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.put_string(t.name);
    w.put(static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_floats(t.value.data());
  }
  w.put(static_cast<std::uint8_t>(c.policy));
  w.put(c.capacity);
  w.put(c.stream_counter);
  w.put(static_cast<std::uint64_t>(c.buffer.size()));
  for (const auto& e : c.buffer) {
    w.put(static_cast<std::uint64_t>(e.sample_id));
    w.put(static_cast<std::uint32_t>(e.x.size()));
    w.put_floats(e.x);
    w.put(e.loss);
    w.put(static_cast<std::uint32_t>(e.mean_feature.size()));
    w.put_floats(e.mean_feature);
    w.put(e.mean_angle);
    w.put(e.extraction_count);
  }
  w.put(static_cast<std::uint32_t>(c.rng_states.size()));
  for (const auto& [name, state] : c.rng_states) {
    w.put_string(name);
    w.put_string(state);
  }
  w.put(static_cast<std::uint32_t>(c.history.size()));
  for (const auto& h : c.history) {
    w.put(h.task);
    w.put(h.step);
    w.put(h.accuracy);
  }
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  detail::Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("bad checkpoint magic (expected SOLR)");
  (void)r.get<std::uint32_t>("magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " does not match supported version " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.step = r.get<std::uint64_t>("step");
  const auto n_tensors = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    t.name = r.get_string("tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank == 0 || rank > 8) throw CheckpointError("tensor '" + t.name + "': invalid rank " + std::to_string(rank));
    std::vector<std::size_t> dims(rank);
    std::uint64_t count = 1;
    for (auto& d : dims) {
      const auto v = r.get<std::uint64_t>("tensor dims");
      if (v == 0 || v > r.remaining() / 4 || count > r.remaining() / 4 / v)
        throw CheckpointError("tensor '" + t.name + "': invalid dimension " + std::to_string(v));
      d = static_cast<std::size_t>(v);
      count *= v;
    }
    if (count > r.remaining() / 4)
      throw CheckpointError("tensor '" + t.name + "': dimensions exceed the remaining data");
    t.value = Tensor<float>(dims, r.get_floats(count, "tensor data"));
    c.tensors.push_back(std::move(t));
  }
  const auto policy = r.get<std::uint8_t>("buffer policy");
  if (policy > static_cast<std::uint8_t>(BufferPolicy::deviation_aware))
    throw CheckpointError("unknown buffer policy code " + std::to_string(policy));
  c.policy = static_cast<BufferPolicy>(policy);
  c.capacity = r.get<std::uint64_t>("buffer capacity");
  c.stream_counter = r.get<std::uint64_t>("stream counter");
  const auto n_entries = r.get<std::uint64_t>("buffer size");
  if (n_entries > c.capacity) throw CheckpointError("buffer holds more entries than its capacity");
  for (std::uint64_t i = 0; i < n_entries; ++i) {
    BufferEntry e;
    e.sample_id = static_cast<std::size_t>(r.get<std::uint64_t>("entry id"));
    e.x = r.get_floats(r.get<std::uint32_t>("entry width"), "entry input");
    e.loss = r.get<float>("entry loss");
    e.mean_feature = r.get_floats(r.get<std::uint32_t>("entry feature width"), "entry feature");
    e.mean_angle = r.get<float>("entry angle");
    e.extraction_count = r.get<std::uint64_t>("entry extraction count");
    c.buffer.push_back(std::move(e));
  }
  const auto n_rng = r.get<std::uint32_t>("rng count");
  for (std::uint32_t i = 0; i < n_rng; ++i) {
    auto name = r.get_string("rng name");
    auto state = r.get_string("rng state");
    c.rng_states.emplace_back(std::move(name), std::move(state));
  }
  const auto n_hist = r.get<std::uint32_t>("history count");
  for (std::uint32_t i = 0; i < n_hist; ++i) {
    TaskAccuracy h;
    h.task = r.get<std::uint64_t>("history task");
    h.step = r.get<std::uint64_t>("history step");
    h.accuracy = r.get<double>("history accuracy");
    c.history.push_back(h);
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint payload");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline const std::string kVelocityPrefix = "optimizer.velocity.";

/// Model state, optimizer velocity, buffer and rng streams of a trainer.
inline Checkpoint capture(const Trainer& trainer, std::vector<TaskAccuracy> history = {}) {
  Checkpoint c;
  c.step = trainer.steps_done();
  const auto& model = trainer.model();
  for (const auto& [name, t] : model.state()) c.tensors.push_back({name, *t});
  const auto params = model.parameters();
  const auto& vel = trainer.optimizer().velocity;
  for (std::size_t i = 0; i < vel.size(); ++i) c.tensors.push_back({kVelocityPrefix + params[i].first, vel[i]});
  const auto& buf = trainer.buffer();
  c.policy = buf.policy();
  c.capacity = buf.capacity();
  c.stream_counter = buf.stream_counter();
  c.buffer = buf.entries();
  c.rng_states = {{"augment", save_rng(trainer.augment_rng())}, {"buffer", save_rng(buf.rng())}};
  c.history = std::move(history);
  return c;
}

/// Loads a checkpoint into a trainer built from the same configuration.
inline void restore(const Checkpoint& c, Trainer& trainer) {
  auto& model = trainer.model();
  for (auto& [name, t] : model.state()) {
    const auto* src = c.tensor(name);
    if (!src) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (!src->same_shape(*t))
      throw CheckpointError("tensor '" + name + "': shape " + shape_string(src->shape()) + " does not match model shape " +
                            shape_string(t->shape()));
    *t = *src;
  }
  auto& vel = trainer.optimizer().velocity;
  vel.clear();
  const auto params = model.parameters();
  if (c.tensor(kVelocityPrefix + params.front().first)) {
    for (const auto& [name, p] : params) {
      const auto* v = c.tensor(kVelocityPrefix + name);
      if (!v || !v->same_shape(*p)) throw CheckpointError("tensor '" + kVelocityPrefix + name + "' missing or misshaped");
      vel.push_back(*v);
    }
  }
  auto& buf = trainer.buffer();
  if (c.policy != buf.policy() || c.capacity != buf.capacity())
    throw CheckpointError("checkpoint buffer (" + std::string(to_string(c.policy)) + ", capacity " +
                          std::to_string(c.capacity) + ") does not match the configured buffer");
  const auto* buf_rng = c.rng_state("buffer");
  const auto* aug_rng = c.rng_state("augment");
  if (!buf_rng || !aug_rng) throw CheckpointError("checkpoint lacks rng states");
  buf.restore(c.buffer, c.stream_counter, *buf_rng);
  load_rng(trainer.augment_rng(), *aug_rng);
  trainer.set_steps_done(static_cast<std::size_t>(c.step));
}

}  // namespace solar::io
