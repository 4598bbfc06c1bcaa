#pragma once

// Flat `key = value` configuration with dotted namespaces. Every key maps to
// one field of ExperimentConfig; unknown keys are errors.

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mvcr/data.hpp"
#include "mvcr/train.hpp"

namespace mvcr {

struct ExperimentConfig {
  std::string name = "mini";
  std::string output_dir = "runs";
  std::string dtype = "f32";
  EncoderConfig encoder;
  MvcrConfig mvcr;
  TrainSchedule train;
  SeqTaskSpec seq_task;
  TokenTaskSpec token_task;
  std::uint64_t data_seed = 0;    // 0: follow train.seed
  std::size_t reference_hidden = 0;  // when set, mvcr.dims are scaled by hidden / reference_hidden

  ExperimentConfig() {
    encoder.embedding_std = 0.02;
    train.lr_task = 1e-3;
    mvcr.layers = {1};
    mvcr.pool_dims = {16, 24, 48};
    seq_task.zipf_exponent = 1.2;
    token_task.zipf_exponent = 1.2;
  }

  std::uint64_t effective_data_seed() const { return data_seed ? data_seed : train.seed; }

  /// Pool dims after reference scaling.
  MvcrConfig resolved_mvcr() const {
    MvcrConfig m = mvcr;
    if (reference_hidden) {
      for (auto& d : m.pool_dims) {
        const std::size_t scaled = d * encoder.hidden / reference_hidden;
        if (scaled == 0 || scaled * reference_hidden != d * encoder.hidden)
          throw std::invalid_argument("config: mvcr dim " + std::to_string(d) + " does not scale exactly from " +
                                      std::to_string(reference_hidden) + " to " + std::to_string(encoder.hidden));
        d = scaled;
      }
    }
    return m;
  }

  /// Task sizes, vocabulary and class count follow the encoder settings.
  Dataset make_dataset() const {
    if (encoder.task == TaskKind::sequence) {
      SeqTaskSpec s = seq_task;
      s.vocab = encoder.vocab;
      s.num_classes = encoder.num_classes;
      return generate_seq_task(s, effective_data_seed());
    }
    TokenTaskSpec s = token_task;
    s.vocab = encoder.vocab;
    if (encoder.num_classes != kNumTags)
      throw std::invalid_argument("config: token task needs model.num_classes = " + std::to_string(kNumTags));
    return generate_token_task(s, effective_data_seed());
  }

  void validate() const {
    encoder.validate();
    resolved_mvcr().validate(encoder.num_layers, encoder.hidden);
    train.validate();
    if (dtype != "f32" && dtype != "f64") throw std::invalid_argument("config: dtype must be f32 or f64");
    if (encoder.task == TaskKind::sequence && seq_task.seq_len > encoder.max_seq_len)
      throw std::invalid_argument("config: data.seq_len exceeds model.max_seq_len");
    if (encoder.task == TaskKind::token && token_task.max_len > encoder.max_seq_len)
      throw std::invalid_argument("config: data.max_len exceeds model.max_seq_len");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    if (!v.empty() && v[0] != '-') out = std::stoull(v, &used, 0);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class Int>
std::string join(const std::vector<Int>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

/// Key table in serialization order.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    auto str = [&](std::string key, std::string C::*m) {
      t.push_back({key, {[m](C& c, const std::string&, const std::string& v) { c.*m = v; },
                         [m](const C& c) { return c.*m; }}});
    };
    auto size = [&](std::string key, auto get_ref) {
      t.push_back({key, {[get_ref](C& c, const std::string& k, const std::string& v) {
                           get_ref(c) = static_cast<std::decay_t<decltype(get_ref(c))>>(parse_uint(k, v));
                         },
                         [get_ref](const C& c) { return std::to_string(get_ref(const_cast<C&>(c))); }}});
    };
    auto real = [&](std::string key, auto get_ref) {
      t.push_back({key, {[get_ref](C& c, const std::string& k, const std::string& v) { get_ref(c) = parse_double(k, v); },
                         [get_ref](const C& c) { return fmt_double(get_ref(const_cast<C&>(c))); }}});
    };
    auto flag = [&](std::string key, auto get_ref) {
      t.push_back({key, {[get_ref](C& c, const std::string& k, const std::string& v) { get_ref(c) = parse_bool(k, v); },
                         [get_ref](const C& c) { return std::string(get_ref(const_cast<C&>(c)) ? "true" : "false"); }}});
    };
    auto custom = [&](std::string key, std::function<void(C&, const std::string&, const std::string&)> set,
                      std::function<std::string(const C&)> get) { t.push_back({key, {std::move(set), std::move(get)}}); };

    str("experiment.name", &C::name);
    str("experiment.output_dir", &C::output_dir);
    str("experiment.dtype", &C::dtype);

    custom("model.task", [](C& c, const std::string&, const std::string& v) { c.encoder.task = parse_task(v); },
           [](const C& c) { return std::string(to_string(c.encoder.task)); });
    size("model.layers", [](C& c) -> auto& { return c.encoder.num_layers; });
    size("model.hidden", [](C& c) -> auto& { return c.encoder.hidden; });
    size("model.heads", [](C& c) -> auto& { return c.encoder.heads; });
    size("model.ffn", [](C& c) -> auto& { return c.encoder.ffn; });
    size("model.vocab", [](C& c) -> auto& { return c.encoder.vocab; });
    size("model.max_seq_len", [](C& c) -> auto& { return c.encoder.max_seq_len; });
    size("model.num_classes", [](C& c) -> auto& { return c.encoder.num_classes; });
    real("model.embedding_std", [](C& c) -> auto& { return c.encoder.embedding_std; });

    flag("mvcr.enabled", [](C& c) -> auto& { return c.mvcr.enabled; });
    custom(
        "mvcr.layers",
        [](C& c, const std::string& k, const std::string& v) {
          c.mvcr.layers.clear();
          if (v.empty() || v == "none") return;
          for (const auto& part : split(v, ',')) c.mvcr.layers.push_back(static_cast<int>(parse_uint(k, part)));
        },
        [](const C& c) { return c.mvcr.layers.empty() ? std::string("none") : join(c.mvcr.layers); });
    custom(
        "mvcr.dims",
        [](C& c, const std::string& k, const std::string& v) {
          c.mvcr.pool_dims.clear();
          for (const auto& part : split(v, ',')) c.mvcr.pool_dims.push_back(parse_uint(k, part));
        },
        [](const C& c) { return join(c.mvcr.pool_dims); });
    size("mvcr.reference_hidden", [](C& c) -> auto& { return c.reference_hidden; });
    real("mvcr.layer_gate_prob", [](C& c) -> auto& { return c.mvcr.layer_gate_prob; });
    real("mvcr.sub_skip_prob", [](C& c) -> auto& { return c.mvcr.sub_skip_prob; });
    custom("mvcr.granularity",
           [](C& c, const std::string&, const std::string& v) { c.mvcr.granularity = parse_granularity(v); },
           [](const C& c) { return std::string(to_string(c.mvcr.granularity)); });
    custom("mvcr.kind", [](C& c, const std::string&, const std::string& v) { c.mvcr.kind = parse_compressor(v); },
           [](const C& c) { return std::string(to_string(c.mvcr.kind)); });
    size("mvcr.subs_per_hae", [](C& c) -> auto& { return c.mvcr.subs_per_hae; });
    real("mvcr.vae_beta", [](C& c) -> auto& { return c.mvcr.vae_beta; });
    flag("mvcr.tanh_code", [](C& c) -> auto& { return c.mvcr.tanh_code; });
    flag("mvcr.recon_to_backbone", [](C& c) -> auto& { return c.mvcr.recon_to_backbone; });

    size("train.epochs", [](C& c) -> auto& { return c.train.total_epochs; });
    size("train.pretrain_epochs", [](C& c) -> auto& { return c.train.pretrain_epochs; });
    size("train.batch_size", [](C& c) -> auto& { return c.train.batch_size; });
    real("train.lr_task", [](C& c) -> auto& { return c.train.lr_task; });
    real("train.lr_mse", [](C& c) -> auto& { return c.train.lr_mse; });
    size("train.seed", [](C& c) -> auto& { return c.train.seed; });
    custom("train.baseline",
           [](C& c, const std::string&, const std::string& v) { c.train.baseline.kind = parse_baseline(v); },
           [](const C& c) { return std::string(to_string(c.train.baseline.kind)); });
    real("train.baseline_strength", [](C& c) -> auto& { return c.train.baseline.strength; });
    size("train.eval_every", [](C& c) -> auto& { return c.train.eval_every; });
    flag("train.alternate_updates", [](C& c) -> auto& { return c.train.alternate_updates; });
    size("train.eval_seed", [](C& c) -> auto& { return c.train.eval_seed; });

    size("data.seed", [](C& c) -> auto& { return c.data_seed; });
    size("data.train_size", [](C& c) -> auto& { return c.seq_task.sizes.train; });
    size("data.dev_size", [](C& c) -> auto& { return c.seq_task.sizes.dev; });
    size("data.test_size", [](C& c) -> auto& { return c.seq_task.sizes.test; });
    size("data.seq_len", [](C& c) -> auto& { return c.seq_task.seq_len; });
    size("data.keywords_per_class", [](C& c) -> auto& { return c.seq_task.keywords_per_class; });
    size("data.planted", [](C& c) -> auto& { return c.seq_task.planted; });
    size("data.distractors", [](C& c) -> auto& { return c.seq_task.distractors; });
    real("data.spurious_rate", [](C& c) -> auto& { return c.seq_task.spurious_rate; });
    real("data.label_noise", [](C& c) -> auto& { return c.seq_task.label_noise; });
    real("data.zipf_exponent", [](C& c) -> auto& { return c.seq_task.zipf_exponent; });
    size("data.min_len", [](C& c) -> auto& { return c.token_task.min_len; });
    size("data.max_len", [](C& c) -> auto& { return c.token_task.max_len; });
    real("data.p_x", [](C& c) -> auto& { return c.token_task.p_x; });
    real("data.p_y", [](C& c) -> auto& { return c.token_task.p_y; });
    real("data.p_continue", [](C& c) -> auto& { return c.token_task.p_continue; });
    return t;
  }();
  return table;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [k, field] : detail::fields())
    if (k == key) {
      field.set(cfg, key, value);
      // Split sizes and the filler exponent are shared by both task generators.
      if (key == "data.train_size") cfg.token_task.sizes.train = cfg.seq_task.sizes.train;
      if (key == "data.dev_size") cfg.token_task.sizes.dev = cfg.seq_task.sizes.dev;
      if (key == "data.test_size") cfg.token_task.sizes.test = cfg.seq_task.sizes.test;
      if (key == "data.zipf_exponent") cfg.token_task.zipf_exponent = cfg.seq_task.zipf_exponent;
      return;
    }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

/// Parses `k=v` (used by --override).
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Reads `key = value` lines; `#` starts a comment. `source` names the input
/// in error messages.
inline void apply_config_text(ExperimentConfig& cfg, std::istream& in, const std::string& source = "<config>") {
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  ExperimentConfig cfg;
  std::istringstream in(text);
  apply_config_text(cfg, in, source);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  ExperimentConfig cfg;
  apply_config_text(cfg, in, path);
  return cfg;
}

/// Every key, one per line, in table order. parse_config(to_text(c)) == c.
inline std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, field] : detail::fields()) out += k + " = " + field.get(cfg) + "\n";
  return out;
}

/// Output root: MVCR_OUTPUT_ROOT when set, else the configured directory.
inline std::string output_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("MVCR_OUTPUT_ROOT"); env && *env) return env;
  return cfg.output_dir;
}

}  // namespace mvcr
