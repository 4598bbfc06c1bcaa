#pragma once

// Parameterized layers and the baseline regularizers.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mvcr/ops.hpp"
#include "mvcr/rng.hpp"

namespace mvcr {

/// Parameter groups: every trainable tensor belongs to exactly one.
enum class Group { backbone, head, hae };

inline std::string_view to_string(Group g) {
  switch (g) {
    case Group::backbone: return "backbone";
    case Group::head: return "head";
    case Group::hae: return "hae";
  }
  return "?";
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
  Group group;
};

/// Fully connected layer, y = x·Wᵀ + b.
template <class T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  /// Fan-in uniform init for weights, zero bias.
  static Linear init(std::size_t in, std::size_t out, Stream& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {Tensor<T>::uniform({out, in}, -bound, bound, rng), Tensor<T>({out}, T{0}, true)};
  }

  static Linear zeros(std::size_t in, std::size_t out) {
    return {Tensor<T>({out, in}, T{0}, true), Tensor<T>({out}, T{0}, true)};
  }

  std::size_t in_dim() const { return weight.shape[1]; }
  std::size_t out_dim() const { return weight.shape[0]; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <class T>
Var<T> linear_forward(Tape<T>& tape, const Linear<T>& layer, Var<T> x) {
  if (x.shape().back() != layer.in_dim())
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not end in in_dim " +
                     std::to_string(layer.in_dim()));
  return affine(x, tape.param(layer.weight), tape.param(layer.bias));
}

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm init(std::size_t dim) { return {Tensor<T>({dim}, T{1}, true), Tensor<T>({dim}, T{0}, true)}; }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <class T>
Var<T> layernorm_forward(Tape<T>& tape, const LayerNorm<T>& ln, Var<T> x) {
  return layernorm(x, tape.param(ln.gamma), tape.param(ln.beta));
}

/// Pre-norm transformer block: x + Attn(LN(x)), then h + FFN(LN(h)).
template <class T>
struct AttentionBlock {
  std::size_t heads = 1;
  LayerNorm<T> ln_attn, ln_ffn;
  Linear<T> query, key, value, output;
  Linear<T> ffn_in, ffn_out;

  static AttentionBlock init(std::size_t dim, std::size_t heads, std::size_t ffn_dim, Stream& rng) {
    if (heads == 0 || dim % heads != 0)
      throw std::invalid_argument("attention block: hidden dim " + std::to_string(dim) +
                                  " not divisible by head count " + std::to_string(heads));
    AttentionBlock b;
    b.heads = heads;
    b.ln_attn = LayerNorm<T>::init(dim);
    b.ln_ffn = LayerNorm<T>::init(dim);
    b.query = Linear<T>::init(dim, dim, rng);
    b.key = Linear<T>::init(dim, dim, rng);
    b.value = Linear<T>::init(dim, dim, rng);
    b.output = Linear<T>::init(dim, dim, rng);
    b.ffn_in = Linear<T>::init(dim, ffn_dim, rng);
    b.ffn_out = Linear<T>::init(ffn_dim, dim, rng);
    return b;
  }

  template <class F>
  void visit(const std::string& p, F&& f) {
    visit_impl(*this, p, f);
  }
  template <class F>
  void visit(const std::string& p, F&& f) const {
    visit_impl(*this, p, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, const std::string& p, F& f) {
    s.ln_attn.visit(p + ".ln_attn", f);
    s.query.visit(p + ".query", f);
    s.key.visit(p + ".key", f);
    s.value.visit(p + ".value", f);
    s.output.visit(p + ".output", f);
    s.ln_ffn.visit(p + ".ln_ffn", f);
    s.ffn_in.visit(p + ".ffn_in", f);
    s.ffn_out.visit(p + ".ffn_out", f);
  }
};

/// x[B, S, d] -> [B, S, d]. key_valid[B*S] masks padded keys (empty: none).
/// When `weights_out` is given it receives the attention probabilities [B, H, S, S].
template <class T>
Var<T> attention_block(Tape<T>& tape, const AttentionBlock<T>& blk, Var<T> x, std::span<const std::uint8_t> key_valid,
                       Var<T>* weights_out = nullptr) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("attention_block: expected [batch, seq, dim], got " + to_string(s));
  const std::size_t B = s[0], S = s[1], d = s[2], H = blk.heads, dh = d / H;
  auto split = [&](Var<T> v) { return permute_0213(reshape(v, {B, S, H, dh})); };

  auto normed = layernorm_forward(tape, blk.ln_attn, x);
  auto q = split(linear_forward(tape, blk.query, normed));
  auto k = split(linear_forward(tape, blk.key, normed));
  auto v = split(linear_forward(tape, blk.value, normed));
  auto scores = scale(matmul(q, transpose(k)), T{1} / std::sqrt(T(dh)));
  auto probs = key_valid.empty() ? softmax(scores) : masked_softmax(scores, key_valid);
  if (weights_out) *weights_out = probs;
  auto mixed = reshape(permute_0213(matmul(probs, v)), {B, S, d});
  auto h = add(x, linear_forward(tape, blk.output, mixed));

  auto ff = linear_forward(tape, blk.ffn_out, gelu(linear_forward(tape, blk.ffn_in, layernorm_forward(tape, blk.ln_ffn, h))));
  return add(h, ff);
}

// ---------------------------------------------------------------------------
// Baseline regularizers

enum class BaselineKind { none, dropout, gaussian_noise, weight_decay_to_init, mixout };

inline std::string_view to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::none: return "none";
    case BaselineKind::dropout: return "dropout";
    case BaselineKind::gaussian_noise: return "gaussian_noise";
    case BaselineKind::weight_decay_to_init: return "weight_decay_to_init";
    case BaselineKind::mixout: return "mixout";
  }
  return "?";
}

inline BaselineKind parse_baseline(std::string_view s) {
  for (auto k : {BaselineKind::none, BaselineKind::dropout, BaselineKind::gaussian_noise,
                 BaselineKind::weight_decay_to_init, BaselineKind::mixout})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown baseline kind '" + std::string(s) + "'");
}

/// Probabilities must lie in [0, 1]; scales and penalty weights must be >= 0.
inline void validate_regularizer(BaselineKind kind, double strength) {
  const bool probabilistic = kind == BaselineKind::dropout || kind == BaselineKind::mixout;
  if (!std::isfinite(strength) || strength < 0.0 || (probabilistic && strength > 1.0))
    throw std::invalid_argument(std::string(to_string(kind)) + ": strength " + std::to_string(strength) +
                                " out of range");
}

/// GN scale used by the Gaussian-noise baseline.
inline constexpr double kGaussianNoiseScale = 0.002;

/// Inverted dropout: zero with probability p, rescale survivors by 1/(1-p).
template <class T>
Var<T> dropout(Var<T> x, double p, Stream& rng, bool training) {
  validate_regularizer(BaselineKind::dropout, p);
  if (!training || p == 0.0) return x;
  const T keep_scale = p < 1.0 ? T(1.0 / (1.0 - p)) : T{0};
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? T{0} : keep_scale;
  return multiply(x, x.tape().constant(x.shape(), std::move(mask)));
}

/// x + scale·N(0, I).
template <class T>
Var<T> gaussian_noise(Var<T> x, double scale_, Stream& rng, bool training) {
  validate_regularizer(BaselineKind::gaussian_noise, scale_);
  if (!training || scale_ == 0.0) return x;
  std::vector<T> noise(x.size());
  for (auto& n : noise) n = static_cast<T>(scale_ * rng.normal());
  return add(x, x.tape().constant(x.shape(), std::move(noise)));
}

/// lambda/2 · Σ ||w - w0||² over the given parameters.
template <class T>
Var<T> weight_decay_to_init(Tape<T>& tape, std::span<const Tensor<T>* const> params, std::span<const Tensor<T>> init,
                            double lambda) {
  validate_regularizer(BaselineKind::weight_decay_to_init, lambda);
  if (params.size() != init.size()) throw std::invalid_argument("weight_decay_to_init: parameter/init count mismatch");
  std::optional<Var<T>> total;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto diff = sub(tape.param(*params[i]), tape.constant(init[i]));
    auto term = sum(multiply(diff, diff));
    total = total ? add(*total, term) : term;
  }
  if (!total) return tape.constant({1}, {T{0}});
  return scale(*total, T(lambda / 2.0));
}

/// Each parameter element reverts to its initial value with probability p.
template <class T>
void mixout(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> init, double p, Stream& rng) {
  validate_regularizer(BaselineKind::mixout, p);
  if (params.size() != init.size()) throw std::invalid_argument("mixout: parameter/init count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->data;
    const auto& w0 = init[i].data;
    if (w.size() != w0.size()) shape_mismatch("mixout", params[i]->shape, init[i].shape);
    for (std::size_t j = 0; j < w.size(); ++j)
      if (rng.bernoulli(p)) w[j] = w0[j];
  }
}

}  // namespace mvcr
