#pragma once

// Multi-view compressed representations: pools of compressors attached
// after selected encoder layers. During training each gated position is
// replaced by the output of a randomly chosen pool member; in evaluation the
// layer output passes through untouched, so the pools can be dropped.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "mvcr/autoencoders.hpp"

namespace mvcr {

/// Probability that a layer output is augmented at all.
inline constexpr double kDefaultLayerGateProb = 0.5;

enum class Granularity { token, layer };
enum class CompressorKind { hae, ae, vae };
enum class Mode { train, eval, eval_with_mvcr };

inline std::string_view to_string(Granularity g) { return g == Granularity::token ? "token" : "layer"; }

inline Granularity parse_granularity(std::string_view s) {
  if (s == "token") return Granularity::token;
  if (s == "layer") return Granularity::layer;
  throw std::invalid_argument("unknown granularity '" + std::string(s) + "'");
}

inline std::string_view to_string(CompressorKind k) {
  switch (k) {
    case CompressorKind::hae: return "hae";
    case CompressorKind::ae: return "ae";
    case CompressorKind::vae: return "vae";
  }
  return "?";
}

inline CompressorKind parse_compressor(std::string_view s) {
  for (auto k : {CompressorKind::hae, CompressorKind::ae, CompressorKind::vae})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown compressor kind '" + std::string(s) + "'");
}

struct MvcrConfig {
  std::vector<int> layers;                // 1-based insertion layers
  std::vector<std::size_t> pool_dims;     // one compressor per entry
  double layer_gate_prob = kDefaultLayerGateProb;
  double sub_skip_prob = kDefaultSubSkipProb;
  Granularity granularity = Granularity::token;
  bool enabled = true;
  CompressorKind kind = CompressorKind::hae;
  std::size_t subs_per_hae = 1;
  double vae_beta = 1e-3;
  bool tanh_code = false;
  bool recon_to_backbone = false;  // let the reconstruction loss reach the backbone

  bool active() const { return enabled && !layers.empty(); }

  void validate(std::size_t num_layers, std::size_t hidden) const {
    if (!enabled || layers.empty()) return;
    if (pool_dims.empty()) throw std::invalid_argument("mvcr: empty compressor pool");
    for (int l : layers)
      if (l < 1 || static_cast<std::size_t>(l) > num_layers)
        throw std::out_of_range("mvcr: insertion layer " + std::to_string(l) + " outside backbone depth " +
                                std::to_string(num_layers));
    std::vector<int> sorted = layers;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("mvcr: duplicate insertion layer");
    for (std::size_t d : pool_dims)
      if (d == 0 || d >= hidden)
        throw std::invalid_argument("mvcr: pool dim " + std::to_string(d) + " must lie in (0, " +
                                    std::to_string(hidden) + ")");
    if (kind == CompressorKind::hae)
      for (std::size_t d : pool_dims)
        if (subs_per_hae > 0 && d / 2 == 0) throw std::invalid_argument("mvcr: pool dim too small for a sub-autoencoder");
    auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!unit(layer_gate_prob)) throw std::invalid_argument("mvcr: layer_gate_prob must lie in [0, 1]");
    if (!unit(sub_skip_prob)) throw std::invalid_argument("mvcr: sub_skip_prob must lie in [0, 1]");
    if (vae_beta < 0.0) throw std::invalid_argument("mvcr: vae_beta must be >= 0");
  }
};

template <class T>
using Compressor = std::variant<Autoencoder<T>, StochasticHae<T>, Vae<T>>;

/// The compressors attached after one layer.
template <class T>
struct MvcrPool {
  int layer = 0;
  std::vector<Compressor<T>> members;

  static MvcrPool init(int layer, std::size_t hidden, const MvcrConfig& cfg, Stream& rng) {
    if (cfg.pool_dims.empty()) throw std::invalid_argument("mvcr: empty compressor pool");
    MvcrPool pool;
    pool.layer = layer;
    for (std::size_t d_hat : cfg.pool_dims) {
      switch (cfg.kind) {
        case CompressorKind::hae:
          pool.members.emplace_back(StochasticHae<T>::init(AutoencoderSpec::hierarchical(hidden, d_hat, cfg.subs_per_hae),
                                                           rng, cfg.sub_skip_prob, cfg.tanh_code));
          break;
        case CompressorKind::ae:
          pool.members.emplace_back(Autoencoder<T>::init(hidden, d_hat, rng, cfg.tanh_code));
          break;
        case CompressorKind::vae:
          pool.members.emplace_back(Vae<T>::init(hidden, d_hat, rng));
          break;
      }
    }
    return pool;
  }

  std::size_t size() const { return members.size(); }

  template <class F>
  void visit(const std::string& p, F&& f) {
    for (std::size_t m = 0; m < members.size(); ++m)
      std::visit([&](auto& c) { c.visit(p + ".m" + std::to_string(m), f); }, members[m]);
  }
  template <class F>
  void visit(const std::string& p, F&& f) const {
    for (std::size_t m = 0; m < members.size(); ++m)
      std::visit([&](const auto& c) { c.visit(p + ".m" + std::to_string(m), f); }, members[m]);
  }
};

/// Decisions taken during one or more augmented forward passes.
struct AugmentationTrace {
  std::vector<GateDraw> gates;      // one per gated position; branch = member or kNoSub
  std::vector<GateDraw> sub_gates;  // one per HAE application; branch = sub-AE or kNoSub
  struct Recon {
    std::uint64_t step;
    int layer;
    std::vector<double> per_member;
  };
  std::vector<Recon> recon;

  void clear() {
    gates.clear();
    sub_gates.clear();
    recon.clear();
  }
};

/// Uniformly picks one network from the pool and applies it.
template <class T>
Var<T> stochastic_select(std::span<const std::function<Var<T>(Var<T>)>> pool, Var<T> x, const CounterRng& rng,
                         const DrawSite& site, std::size_t* chosen = nullptr) {
  if (pool.empty()) throw std::invalid_argument("stochastic_select: empty pool");
  const auto i = static_cast<std::size_t>(rng.choose(pool.size(), Purpose::pool_choice, site));
  if (chosen) *chosen = i;
  return pool[i](x);
}

template <class T>
struct MemberOutput {
  Var<T> output;
  std::optional<Var<T>> kl;
};

/// Applies one compressor to rows x[R, d]. `sub_routes` is only read by HAEs.
template <class T>
MemberOutput<T> compressor_forward(Tape<T>& tape, const Compressor<T>& member, Var<T> x, std::span<const int> sub_routes,
                                   const CounterRng& rng, const DrawSite& site, bool training, std::uint64_t slot) {
  return std::visit(
      [&](const auto& c) -> MemberOutput<T> {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, Autoencoder<T>>) {
          return {ae_forward(tape, c, x), std::nullopt};
        } else if constexpr (std::is_same_v<C, StochasticHae<T>>) {
          return {hae_forward_routed(tape, c, x, sub_routes), std::nullopt};
        } else {
          auto out = vae_forward(tape, c, x, rng, site, training, slot);
          return {out.output, out.kl};
        }
      },
      member);
}

namespace detail {

template <class T>
const StochasticHae<T>* as_hae(const Compressor<T>& c) {
  return std::get_if<StochasticHae<T>>(&c);
}

/// Draws sub-AE routes for `count` rows (per row, or one shared draw).
template <class T>
std::vector<int> draw_routes(const Compressor<T>& member, std::span<const std::size_t> rows, const CounterRng& rng,
                             std::uint64_t step, int layer, bool per_row, std::uint64_t slot, Purpose gate,
                             Purpose choice, std::vector<GateDraw>* trace) {
  std::vector<int> routes(rows.size(), kNoSub);
  const auto* hae = as_hae(member);
  if (!hae) return routes;
  if (per_row) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto d = draw_sub_route(*hae, rng, {step, layer, static_cast<std::int64_t>(rows[i])}, slot, gate, choice);
      routes[i] = d.branch;
      if (trace) trace->push_back(d);
    }
  } else {
    const auto d = draw_sub_route(*hae, rng, {step, layer, DrawSite::layer_level}, slot, gate, choice);
    std::fill(routes.begin(), routes.end(), d.branch);
    if (trace) trace->push_back(d);
  }
  return routes;
}

}  // namespace detail

/// Gated augmentation of one layer output x[B, S, d].
///
/// Train mode (or eval_with_mvcr): every position (token granularity) or the
/// whole layer (layer granularity) draws z; z < layer_gate_prob routes the
/// position through a uniformly chosen pool member, otherwise it passes
/// through. Eval mode, or a disabled config, returns x itself.
template <class T>
Var<T> mvcr_layer_forward(Tape<T>& tape, const MvcrPool<T>& pool, const MvcrConfig& cfg, Var<T> x, const CounterRng& rng,
                          std::uint64_t step, Mode mode, AugmentationTrace* trace = nullptr) {
  if (mode == Mode::eval || !cfg.enabled) return x;
  if (std::find(cfg.layers.begin(), cfg.layers.end(), pool.layer) == cfg.layers.end())
    throw std::out_of_range("mvcr: pool layer " + std::to_string(pool.layer) + " is not an insertion layer");
  if (pool.members.empty()) throw std::invalid_argument("mvcr: empty compressor pool");
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  const std::size_t M = pool.size();
  const bool per_token = cfg.granularity == Granularity::token;
  const bool training = mode == Mode::train;

  std::vector<std::vector<std::size_t>> assigned(M);
  auto gate = [&](std::int64_t token) -> int {
    const DrawSite site{step, pool.layer, token};
    const double z = rng.uniform(Purpose::layer_gate, site);
    int member = kNoSub;
    if (z < cfg.layer_gate_prob) member = static_cast<int>(rng.choose(M, Purpose::pool_choice, site));
    if (trace) trace->gates.push_back({step, pool.layer, token, z, member});
    return member;
  };
  if (per_token) {
    for (std::size_t r = 0; r < rows; ++r) {
      const int m = gate(static_cast<std::int64_t>(r));
      if (m != kNoSub) assigned[static_cast<std::size_t>(m)].push_back(r);
    }
  } else {
    const int m = gate(DrawSite::layer_level);
    if (m != kNoSub) {
      auto& all = assigned[static_cast<std::size_t>(m)];
      all.resize(rows);
      for (std::size_t r = 0; r < rows; ++r) all[r] = r;
    }
  }

  Var<T> flat = reshape(x, {rows, d});
  Var<T> out = flat;
  bool touched = false;
  for (std::size_t m = 0; m < M; ++m) {
    const auto& picked = assigned[m];
    if (picked.empty()) continue;
    touched = true;
    auto routes = detail::draw_routes(pool.members[m], picked, rng, step, pool.layer, per_token, m, Purpose::sub_gate,
                                      Purpose::sub_choice, trace ? &trace->sub_gates : nullptr);
    const DrawSite site{step, pool.layer, DrawSite::layer_level};
    if (picked.size() == rows) {
      out = compressor_forward(tape, pool.members[m], flat, routes, rng, site, training, m).output;
    } else {
      auto part = compressor_forward(tape, pool.members[m], take_rows(flat, picked), routes, rng, site, training, m);
      out = put_rows(out, part.output, picked);
    }
  }
  if (!touched) return x;
  return reshape(out, x.shape());
}

/// (1/M) Σ_m mean((h - r_m)²) for precomputed reconstructions r_m.
template <class T>
Var<T> reconstruction_loss(Var<T> h, std::span<const Var<T>> reconstructions) {
  if (reconstructions.empty()) throw std::invalid_argument("reconstruction_loss: empty pool");
  std::optional<Var<T>> total;
  for (const auto& r : reconstructions) {
    auto term = mse(h, r);
    total = total ? add(*total, term) : term;
  }
  return scale(*total, T{1} / T(reconstructions.size()));
}

template <class T>
struct ReconResult {
  Var<T> loss;
  std::vector<double> per_member;  // squared error per member (without KL)
};

/// Reconstruction loss of every pool member on the layer output h[B, S, d],
/// restricted to valid (non-padding) positions. Each member reconstructs all
/// positions, independent of which members the augmented pass selected.
/// The target is detached unless cfg.recon_to_backbone is set.
template <class T>
ReconResult<T> pool_reconstruction_loss(Tape<T>& tape, const MvcrPool<T>& pool, const MvcrConfig& cfg, Var<T> h,
                                        std::span<const std::uint8_t> valid, const CounterRng& rng, std::uint64_t step,
                                        bool training, AugmentationTrace* trace = nullptr) {
  if (pool.members.empty()) throw std::invalid_argument("reconstruction_loss: empty pool");
  const std::size_t d = h.shape().back(), rows = h.size() / d;
  Var<T> target = cfg.recon_to_backbone ? h : detach(h);
  target = reshape(target, {rows, d});
  std::vector<std::size_t> kept;
  if (!valid.empty()) {
    if (valid.size() != rows) shape_mismatch("reconstruction_loss", h.shape(), Shape{valid.size()});
    for (std::size_t r = 0; r < rows; ++r)
      if (valid[r]) kept.push_back(r);
    if (kept.empty()) throw std::invalid_argument("reconstruction_loss: no valid positions");
    if (kept.size() < rows) target = take_rows(target, kept);
  }
  if (kept.empty() || kept.size() == rows) {
    kept.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) kept[r] = r;
  }

  const bool per_token = cfg.granularity == Granularity::token;
  ReconResult<T> result;
  std::optional<Var<T>> total;
  for (std::size_t m = 0; m < pool.size(); ++m) {
    std::vector<int> routes(kept.size(), kNoSub);
    if (training)
      routes = detail::draw_routes(pool.members[m], kept, rng, step, pool.layer, per_token, m, Purpose::recon_sub_gate,
                                   Purpose::recon_sub_choice, nullptr);
    const DrawSite site{step, pool.layer, DrawSite::layer_level};
    auto out = compressor_forward(tape, pool.members[m], target, routes, rng, site, training, 1000 + m);
    Var<T> term = mse(target, out.output);
    result.per_member.push_back(static_cast<double>(term.item()));
    if (out.kl) term = add(term, scale(*out.kl, T(cfg.vae_beta)));
    total = total ? add(*total, term) : term;
  }
  result.loss = scale(*total, T{1} / T(pool.size()));
  if (trace) trace->recon.push_back({step, pool.layer, result.per_member});
  return result;
}

}  // namespace mvcr
