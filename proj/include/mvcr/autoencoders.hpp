#pragma once

// Autoencoders used as augmentation modules: the plain AE U(D(x)), the
// hierarchical AE U(U'(D'(D(x)))), its stochastic variant that skips the
// sub-AE with a fixed probability, and a diagonal-Gaussian VAE.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvcr/nn.hpp"
#include "mvcr/rng.hpp"

namespace mvcr {

/// Probability that a stochastic HAE bypasses its sub-autoencoders.
inline constexpr double kDefaultSubSkipProb = 0.3;

/// Route index meaning "no sub-autoencoder".
inline constexpr int kNoSub = -1;

struct AutoencoderSpec {
  std::size_t input_dim = 0;
  std::size_t compression_dim = 0;
  std::vector<std::size_t> sub_dims;

  /// HAE layout with `count` sub-AEs of width compression_dim / 2.
  static AutoencoderSpec hierarchical(std::size_t d, std::size_t d_hat, std::size_t count = 1) {
    return {d, d_hat, std::vector<std::size_t>(count, d_hat / 2)};
  }

  void validate() const {
    if (compression_dim == 0 || compression_dim >= input_dim)
      throw std::invalid_argument("autoencoder: compression dim " + std::to_string(compression_dim) +
                                  " must lie in (0, " + std::to_string(input_dim) + ")");
    for (std::size_t s : sub_dims)
      if (s == 0 || s >= compression_dim)
        throw std::invalid_argument("autoencoder: sub dim " + std::to_string(s) + " must lie in (0, " +
                                    std::to_string(compression_dim) + ")");
  }
};

template <class T>
struct Autoencoder {
  Linear<T> down;  // d -> d_hat
  Linear<T> up;    // d_hat -> d
  bool tanh_code = false;

  static Autoencoder init(std::size_t d, std::size_t d_hat, Stream& rng, bool tanh_code = false) {
    AutoencoderSpec{d, d_hat, {}}.validate();
    Autoencoder ae;
    ae.down = Linear<T>::init(d, d_hat, rng);
    ae.up = Linear<T>::init(d_hat, d, rng);
    ae.tanh_code = tanh_code;
    return ae;
  }

  std::size_t input_dim() const { return down.in_dim(); }
  std::size_t compression_dim() const { return down.out_dim(); }

  template <class F>
  void visit(const std::string& p, F&& f) {
    down.visit(p + ".down", f);
    up.visit(p + ".up", f);
  }
  template <class F>
  void visit(const std::string& p, F&& f) const {
    down.visit(p + ".down", f);
    up.visit(p + ".up", f);
  }
};

namespace detail {

template <class T>
Var<T> encode_code(Tape<T>& tape, const Linear<T>& down, Var<T> x, bool tanh_code) {
  auto code = linear_forward(tape, down, x);
  return tanh_code ? mvcr::tanh(code) : code;
}

}  // namespace detail

/// U(D(x)).
template <class T>
Var<T> ae_forward(Tape<T>& tape, const Autoencoder<T>& ae, Var<T> x) {
  if (x.shape().back() != ae.input_dim())
    throw ShapeError("ae_forward: input " + to_string(x.shape()) + " does not end in " + std::to_string(ae.input_dim()));
  return linear_forward(tape, ae.up, detail::encode_code(tape, ae.down, x, ae.tanh_code));
}

template <class T>
struct StochasticHae {
  Linear<T> down;  // D: d -> d_hat
  Linear<T> up;    // U: d_hat -> d
  std::vector<Autoencoder<T>> subs;  // pool of AE_{d_hat, d_i}
  double sub_skip_prob = kDefaultSubSkipProb;
  bool tanh_code = false;

  static StochasticHae init(const AutoencoderSpec& spec, Stream& rng, double sub_skip_prob = kDefaultSubSkipProb,
                            bool tanh_code = false) {
    spec.validate();
    if (!(sub_skip_prob >= 0.0 && sub_skip_prob <= 1.0))
      throw std::invalid_argument("stochastic HAE: sub_skip_prob must lie in [0, 1]");
    StochasticHae h;
    h.down = Linear<T>::init(spec.input_dim, spec.compression_dim, rng);
    h.up = Linear<T>::init(spec.compression_dim, spec.input_dim, rng);
    for (std::size_t s : spec.sub_dims) h.subs.push_back(Autoencoder<T>::init(spec.compression_dim, s, rng, tanh_code));
    h.sub_skip_prob = sub_skip_prob;
    h.tanh_code = tanh_code;
    return h;
  }

  std::size_t input_dim() const { return down.in_dim(); }
  std::size_t compression_dim() const { return down.out_dim(); }

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
    s.down.visit(p + ".down", f);
    s.up.visit(p + ".up", f);
    for (std::size_t i = 0; i < s.subs.size(); ++i) s.subs[i].visit(p + ".sub" + std::to_string(i), f);
  }
};

/// One recorded random decision.
struct GateDraw {
  std::uint64_t step = 0;
  std::int64_t layer = 0;
  std::int64_t token = DrawSite::layer_level;
  double z = 0.0;
  int branch = kNoSub;  // kNoSub: skipped/passed through; otherwise the chosen index
};

template <class T>
void check_route(const StochasticHae<T>& hae, int sub_index) {
  if (sub_index != kNoSub && (sub_index < 0 || static_cast<std::size_t>(sub_index) >= hae.subs.size()))
    throw std::out_of_range("hae: sub-autoencoder index " + std::to_string(sub_index) + " out of range (pool of " +
                            std::to_string(hae.subs.size()) + ")");
}

/// Fixed-route HAE: U(D(x)) for kNoSub, else U(U'(D'(D(x)))) through subs[sub_index].
template <class T>
Var<T> hae_forward(Tape<T>& tape, const StochasticHae<T>& hae, Var<T> x, int sub_index) {
  check_route(hae, sub_index);
  if (x.shape().back() != hae.input_dim())
    throw ShapeError("hae_forward: input " + to_string(x.shape()) + " does not end in " + std::to_string(hae.input_dim()));
  auto code = detail::encode_code(tape, hae.down, x, hae.tanh_code);
  if (sub_index != kNoSub) code = ae_forward(tape, hae.subs[static_cast<std::size_t>(sub_index)], code);
  return linear_forward(tape, hae.up, code);
}

/// Per-row routing over x viewed as [rows, d]; routes[r] is kNoSub or a sub index.
/// The output keeps x's shape.
template <class T>
Var<T> hae_forward_routed(Tape<T>& tape, const StochasticHae<T>& hae, Var<T> x, std::span<const int> routes) {
  const std::size_t rows = x.size() / x.shape().back();
  if (routes.size() != rows) shape_mismatch("hae_forward_routed", x.shape(), Shape{routes.size()});
  for (int r : routes) check_route(hae, r);
  if (x.shape().back() != hae.input_dim())
    throw ShapeError("hae_forward_routed: input " + to_string(x.shape()) + " does not end in " +
                     std::to_string(hae.input_dim()));
  auto code = detail::encode_code(tape, hae.down, reshape(x, {rows, hae.input_dim()}), hae.tanh_code);
  for (std::size_t s = 0; s < hae.subs.size(); ++s) {
    std::vector<std::size_t> picked;
    for (std::size_t r = 0; r < rows; ++r)
      if (routes[r] == static_cast<int>(s)) picked.push_back(r);
    if (picked.empty()) continue;
    if (picked.size() == rows) {
      code = ae_forward(tape, hae.subs[s], code);
      break;
    }
    code = put_rows(code, ae_forward(tape, hae.subs[s], take_rows(code, picked)), picked);
  }
  return reshape(linear_forward(tape, hae.up, code), x.shape());
}

/// Sub-AE gate: z uniform in [0, 1); z < sub_skip_prob bypasses the pool,
/// otherwise one sub-AE is chosen uniformly. The strict comparison makes the
/// limits exact: probability 1 always skips, 0 never does.
template <class T>
GateDraw draw_sub_route(const StochasticHae<T>& hae, const CounterRng& rng, const DrawSite& site,
                        std::uint64_t slot = 0, Purpose gate = Purpose::sub_gate, Purpose choice = Purpose::sub_choice) {
  GateDraw d{site.step, site.layer, site.token, rng.uniform(gate, site, slot), kNoSub};
  if (d.z >= hae.sub_skip_prob && !hae.subs.empty())
    d.branch = static_cast<int>(rng.choose(hae.subs.size(), choice, site, slot));
  return d;
}

/// One draw for the whole input.
template <class T>
std::pair<Var<T>, GateDraw> stochastic_hae_forward(Tape<T>& tape, const StochasticHae<T>& hae, Var<T> x,
                                                   const CounterRng& rng, const DrawSite& site, std::uint64_t slot = 0) {
  const GateDraw draw = draw_sub_route(hae, rng, site, slot);
  return {hae_forward(tape, hae, x, draw.branch), draw};
}

// ---------------------------------------------------------------------------
// VAE

template <class T>
struct Vae {
  Linear<T> encoder;  // d -> 2·d_hat, (mu, log σ²)
  Linear<T> decoder;  // d_hat -> d

  static Vae init(std::size_t d, std::size_t d_hat, Stream& rng) {
    AutoencoderSpec{d, d_hat, {}}.validate();
    return {Linear<T>::init(d, 2 * d_hat, rng), Linear<T>::init(d_hat, d, rng)};
  }

  std::size_t input_dim() const { return encoder.in_dim(); }
  std::size_t compression_dim() const { return decoder.in_dim(); }

  template <class F>
  void visit(const std::string& p, F&& f) {
    encoder.visit(p + ".encoder", f);
    decoder.visit(p + ".decoder", f);
  }
  template <class F>
  void visit(const std::string& p, F&& f) const {
    encoder.visit(p + ".encoder", f);
    decoder.visit(p + ".decoder", f);
  }
};

template <class T>
struct VaeOutput {
  Var<T> output;
  Var<T> kl;  // scalar
};

/// Training: decode(mu + exp(logvar/2)·eps). Eval: decode(mu).
template <class T>
VaeOutput<T> vae_forward(Tape<T>& tape, const Vae<T>& vae, Var<T> x, const CounterRng& rng, const DrawSite& site,
                         bool training, std::uint64_t slot = 0) {
  if (x.shape().back() != vae.input_dim())
    throw ShapeError("vae_forward: input " + to_string(x.shape()) + " does not end in " + std::to_string(vae.input_dim()));
  const std::size_t k = vae.compression_dim();
  auto stats = linear_forward(tape, vae.encoder, x);
  auto mu = slice(stats, 0, k);
  auto logvar = slice(stats, k, 2 * k);
  for (T v : logvar.value())
    if (!std::isfinite(v)) throw std::domain_error("vae_forward: non-finite log-variance");
  auto kl = gaussian_kl(mu, logvar);
  Var<T> z = mu;
  if (training) {
    Stream noise(rng.bits(Purpose::vae_noise, site, slot), {});
    std::vector<T> eps(mu.size());
    for (auto& e : eps) e = static_cast<T>(noise.normal());
    z = add(mu, multiply(mvcr::exp(scale(logvar, T(0.5))), tape.constant(mu.shape(), std::move(eps))));
  }
  return {linear_forward(tape, vae.decoder, z), kl};
}

}  // namespace mvcr
