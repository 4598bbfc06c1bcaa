#pragma once

// Binary checkpoints. Layout, all integers little-endian:
//   "MVCRCKPT"  u32 version  u8 element bytes (4 | 8)  u64 seed
//   u32 len + config text
//   u32 count, then per parameter sorted by name:
//     u32 len + name  u8 group  u32 rank  u64 extents[rank]  values
// Values are stored in the element type of the saved model and can be loaded
// into either float or double.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvcr/config.hpp"
#include "mvcr/encoder.hpp"

namespace mvcr {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'C', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredParam {
  std::string name;
  Group group = Group::backbone;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint8_t element_bytes = 4;
  std::uint64_t seed = 0;
  std::string config_text;
  std::vector<StoredParam> params;  // sorted by name

  const StoredParam* find(const std::string& name) const {
    auto it = std::lower_bound(params.begin(), params.end(), name,
                               [](const StoredParam& p, const std::string& n) { return p.name < n; });
    return it != params.end() && it->name == name ? &*it : nullptr;
  }
};

namespace detail {

template <class V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                            " more)");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const EncoderModel<T>& model, const ExperimentConfig& cfg, std::uint64_t seed) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  struct Entry {
    std::string name;
    const Tensor<T>* t;
    Group g;
  };
  std::vector<Entry> entries;
  model.visit([&](const std::string& name, const Tensor<T>& t, Group g) { entries.push_back({name, &t, g}); });
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.name < b.name; });

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint8_t>(out, sizeof(T));
  detail::put<std::uint64_t>(out, seed);
  // The echo carries the model's own MVCR settings, so plugged-out models rebuild without pools.
  ExperimentConfig echo = cfg;
  echo.mvcr = model.mvcr;
  echo.reference_hidden = 0;
  detail::put_string(out, to_text(echo));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_string(out, e.name);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.g));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.t->shape.size()));
    for (auto d : e.t->shape) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(e.t->data.data()), e.t->data.size() * sizeof(T));
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.raw(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic))
    throw CheckpointError("not a checkpoint: bad magic");
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
  c.element_bytes = r.get<std::uint8_t>();
  if (c.element_bytes != 4 && c.element_bytes != 8)
    throw CheckpointError("bad element size " + std::to_string(c.element_bytes));
  c.seed = r.get<std::uint64_t>();
  c.config_text = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredParam p;
    p.name = r.get_string();
    const auto g = r.get<std::uint8_t>();
    if (g > static_cast<std::uint8_t>(Group::hae)) throw CheckpointError("bad group tag for " + p.name);
    p.group = static_cast<Group>(g);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CheckpointError("bad rank " + std::to_string(rank) + " for " + p.name);
    for (std::uint32_t k = 0; k < rank; ++k) p.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const std::size_t n = numel(p.shape);
    p.values.resize(n);
    if (c.element_bytes == 4)
      for (auto& v : p.values) v = r.get<float>();
    else
      for (auto& v : p.values) v = r.get<double>();
    if (!c.params.empty() && !(c.params.back().name < p.name))
      throw CheckpointError("parameters not sorted at " + p.name);
    c.params.push_back(std::move(p));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

template <class T>
void save_checkpoint(const std::string& path, const EncoderModel<T>& model, const ExperimentConfig& cfg,
                     std::uint64_t seed) {
  const auto bytes = serialize_checkpoint(model, cfg, seed);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write to '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

/// Rebuilds the model from the stored config and overwrites every parameter.
/// The stored parameter set must match the rebuilt model exactly.
template <class T>
EncoderModel<T> restore_model(const Checkpoint& c) {
  const ExperimentConfig cfg = parse_config(c.config_text, "<checkpoint config>");
  auto model = EncoderModel<T>::init(cfg.encoder, cfg.resolved_mvcr(), c.seed);
  std::size_t matched = 0;
  model.visit([&](const std::string& name, Tensor<T>& t, Group g) {
    const StoredParam* p = c.find(name);
    if (!p) throw CheckpointError("checkpoint lacks parameter " + name);
    if (p->shape != t.shape)
      throw CheckpointError("shape mismatch for " + name + ": stored " + to_string(p->shape) + ", model " +
                            to_string(t.shape));
    if (p->group != g) throw CheckpointError("group mismatch for " + name);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<T>(p->values[i]);
    ++matched;
  });
  if (matched != c.params.size())
    throw CheckpointError("checkpoint has " + std::to_string(c.params.size() - matched) + " unknown parameters");
  return model;
}

}  // namespace mvcr
