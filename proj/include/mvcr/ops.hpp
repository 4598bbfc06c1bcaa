#pragma once

// Differentiable operations over tape variables.
//
// Broadcasting is limited to one rule: `add` accepts a right operand whose
// shape equals the trailing axes of the left operand (bias addition).
// Every other op requires exactly conforming shapes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvcr/blas.hpp"
#include "mvcr/tape.hpp"

namespace mvcr {

namespace detail {

template <class T>
std::size_t last_dim(const Var<T>& x) {
  return x.shape().back();
}

template <class T>
std::size_t rows_of(const Var<T>& x) {
  return x.size() / x.shape().back();
}

inline void require_rank(std::string_view op, const Shape& s, std::size_t min_rank) {
  if (s.size() < min_rank)
    throw ShapeError(std::string(op) + ": expected rank >= " + std::to_string(min_rank) + ", got " + to_string(s));
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Elementwise unary op; `derivative(x, y)` gives dy/dx.
template <class T, class F, class D>
Var<T> unary(std::string_view kind, Var<T> x, F f, D derivative) {
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const auto xi = x.id();
  return x.tape().record(kind, x.shape(), std::move(out), {x}, [xi, derivative](Tape<T>& t, std::uint32_t self) {
    if (!t.requires_grad(xi)) return;
    auto g = t.grad_buffer(self);
    auto xv = t.value(xi);
    auto yv = t.value(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., m, k] · b[k, n] -> [..., m, n]; or batched a[B..., m, k] · b[B..., k, n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require_rank("matmul", as, 2);
  detail::require_rank("matmul", bs, 2);
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t n = bs.back();
  if (bs[bs.size() - 2] != k) shape_mismatch("matmul", as, bs);
  const bool shared_rhs = bs.size() == 2;
  if (!shared_rhs && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())))
    shape_mismatch("matmul", as, bs);

  Shape out_shape = as;
  out_shape.back() = n;
  std::vector<T> out(numel(out_shape));
  const auto av = a.value();
  const auto bv = b.value();
  const std::size_t batches = shared_rhs ? 1 : a.size() / (m * k);
  const std::size_t rows = shared_rhs ? a.size() / k : m;
  for (std::size_t p = 0; p < batches; ++p)
    blas::gemm<T>(false, false, rows, n, k, av.data() + p * rows * k, bv.data() + p * k * n, out.data() + p * rows * n);

  const auto ai = a.id(), bi = b.id();
  return a.tape().record("matmul", std::move(out_shape), std::move(out), {a, b},
                         [ai, bi, batches, rows, n, k](Tape<T>& t, std::uint32_t self) {
                           auto g = t.grad_buffer(self);
                           auto av = t.value(ai);
                           auto bv = t.value(bi);
                           for (std::size_t p = 0; p < batches; ++p) {
                             const T* gp = g.data() + p * rows * n;
                             if (t.requires_grad(ai))
                               blas::gemm<T>(false, true, rows, k, n, gp, bv.data() + p * k * n,
                                             t.grad_buffer(ai).data() + p * rows * k, T{1});
                             if (t.requires_grad(bi))
                               blas::gemm<T>(true, false, k, n, rows, av.data() + p * rows * k, gp,
                                             t.grad_buffer(bi).data() + p * k * n, T{1});
                           }
                         });
}

/// Swaps the last two axes.
template <class T>
Var<T> transpose(Var<T> x) {
  const Shape& s = x.shape();
  detail::require_rank("transpose", s, 2);
  const std::size_t r = s[s.size() - 2], c = s.back(), batches = x.size() / (r * c);
  Shape os = s;
  std::swap(os[os.size() - 2], os.back());
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t p = 0; p < batches; ++p)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[p * r * c + j * r + i] = xv[p * r * c + i * c + j];
  const auto xi = x.id();
  return x.tape().record("transpose", std::move(os), std::move(out), {x},
                         [xi, r, c, batches](Tape<T>& t, std::uint32_t self) {
                           auto g = t.grad_buffer(self);
                           auto gx = t.grad_buffer(xi);
                           for (std::size_t p = 0; p < batches; ++p)
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 gx[p * r * c + i * c + j] += g[p * r * c + j * r + i];
                         });
}

/// x[..., in] · weightᵀ + bias, with weight [out, in] and bias [out].
template <class T>
Var<T> affine(Var<T> x, Var<T> weight, Var<T> bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || xs.back() != ws[1]) shape_mismatch("affine", xs, ws);
  if (bias.shape() != Shape{ws[0]}) shape_mismatch("affine", ws, bias.shape());
  const std::size_t in = ws[1], out_dim = ws[0], rows = x.size() / in;
  Shape os = xs;
  os.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  auto bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  blas::gemm<T>(false, true, rows, out_dim, in, x.value().data(), weight.value().data(), out.data(), T{1});
  const auto xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.tape().record("affine", std::move(os), std::move(out), {x, weight, bias},
                         [xi, wi, bi, rows, in, out_dim](Tape<T>& t, std::uint32_t self) {
                           auto g = t.grad_buffer(self);
                           if (t.requires_grad(xi))
                             blas::gemm<T>(false, false, rows, in, out_dim, g.data(), t.value(wi).data(),
                                           t.grad_buffer(xi).data(), T{1});
                           if (t.requires_grad(wi))
                             blas::gemm<T>(true, false, out_dim, in, rows, g.data(), t.value(xi).data(),
                                           t.grad_buffer(wi).data(), T{1});
                           if (t.requires_grad(bi)) {
                             auto gb = t.grad_buffer(bi);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[r * out_dim + o];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

/// a + b, where b has a's shape or a trailing suffix of it.
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) shape_mismatch("add", as, bs);
  const std::size_t period = b.size();
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % period];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("add", as, std::move(out), {a, b}, [ai, bi, period](Tape<T>& t, std::uint32_t self) {
    auto g = t.grad_buffer(self);
    if (t.requires_grad(ai)) detail::accumulate<T>(t.grad_buffer(ai), g);
    if (t.requires_grad(bi)) {
      auto gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % period] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("sub", a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::uint32_t self) {
    auto g = t.grad_buffer(self);
    if (t.requires_grad(ai)) detail::accumulate<T>(t.grad_buffer(ai), g);
    if (t.requires_grad(bi)) {
      auto gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product of equally shaped operands.
template <class T>
Var<T> multiply(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) shape_mismatch("multiply", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("multiply", a.shape(), std::move(out), {a, b}, [ai, bi](Tape<T>& t, std::uint32_t self) {
    auto g = t.grad_buffer(self);
    if (t.requires_grad(ai)) {
      auto ga = t.grad_buffer(ai);
      auto bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      auto gb = t.grad_buffer(bi);
      auto av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
  return detail::unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T{1} + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T{1} + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> exp(Var<T> x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

template <class T>
Var<T> softmax_impl(std::string_view kind, Var<T> x, std::span<const std::uint8_t> key_valid, std::size_t batch) {
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  const std::size_t rows_per_batch = batch ? rows / batch : rows;
  auto xv = x.value();
  std::vector<T> out(xv.size(), T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* mask = key_valid.empty() ? nullptr : key_valid.data() + (r / rows_per_batch) * n;
    const T* in = xv.data() + r * n;
    T* o = out.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || mask[j]) mx = std::max(mx, in[j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;  // every key masked
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = (!mask || mask[j]) ? std::exp(in[j] - mx) : T{0};
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  const auto xi = x.id();
  return x.tape().record(kind, x.shape(), std::move(out), {x}, [xi, n, rows](Tape<T>& t, std::uint32_t self) {
    auto g = t.grad_buffer(self);
    auto y = t.value(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

}  // namespace detail

/// Softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> x) {
  return detail::softmax_impl<T>("softmax", x, {}, 0);
}

/// Softmax over the last axis of x[B, ..., K], with key_valid[B*K] marking
/// the keys each batch entry may attend to. Masked keys get probability 0.
template <class T>
Var<T> masked_softmax(Var<T> x, std::span<const std::uint8_t> key_valid) {
  const Shape& s = x.shape();
  detail::require_rank("masked_softmax", s, 2);
  const std::size_t batch = s.front();
  if (key_valid.size() != batch * s.back())
    shape_mismatch("masked_softmax", s, Shape{key_valid.size()});
  return detail::softmax_impl<T>("masked_softmax", x, key_valid, batch);
}

/// Row-wise layer normalization over the last axis followed by gamma/beta.
template <class T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  if (gamma.shape() != Shape{n}) shape_mismatch("layernorm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{n}) shape_mismatch("layernorm", x.shape(), beta.shape());
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(n);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::uint32_t self) {
        auto g = t.grad_buffer(self);
        auto gv = t.value(gi);
        if (t.requires_grad(gi)) {
          auto gg = t.grad_buffer(gi);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
        }
        if (t.requires_grad(bi)) {
          auto gb = t.grad_buffer(bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        }
        if (!t.requires_grad(xi)) return;
        auto gx = t.grad_buffer(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[r * n + j] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[r * n + j];
          }
          mean_d /= T(n);
          mean_dx /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[r * n + j] * gv[j];
            gx[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses (all return shape [1])

template <class T>
Var<T> sum(Var<T> x) {
  T s = 0;
  for (T v : x.value()) s += v;
  const auto xi = x.id();
  return x.tape().record("sum", Shape{1}, {s}, {x}, [xi](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buffer(self)[0];
    for (T& v : t.grad_buffer(xi)) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / T(x.size()));
}

/// Mean squared error over all elements.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) shape_mismatch("mse", a.shape(), b.shape());
  auto av = a.value();
  auto bv = b.value();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T inv_n = T{1} / T(av.size());
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("mse", Shape{1}, {s * inv_n}, {a, b}, [ai, bi, inv_n](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buffer(self)[0] * T{2} * inv_n;
    auto av = t.value(ai);
    auto bv = t.value(bi);
    if (t.requires_grad(ai)) {
      auto ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (t.requires_grad(bi)) {
      auto gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  });
}

/// Mean softmax cross-entropy of logits[R, C] against labels[R]; a negative
/// label marks an ignored row. Returns 0 when every row is ignored.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const std::size_t c = logits.shape().back(), rows = logits.size() / c;
  if (labels.size() != rows) shape_mismatch("cross_entropy", logits.shape(), Shape{labels.size()});
  auto lv = logits.value();
  std::vector<T> probs(lv.size());
  T total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = lv.data() + r * c;
    T mx = *std::max_element(in, in + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(in[j] - mx) / z;
    if (labels[r] < 0) continue;
    if (static_cast<std::size_t>(labels[r]) >= c)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " >= num_classes " +
                              std::to_string(c));
    total += std::log(z) + mx - in[labels[r]];
    ++count;
  }
  const T inv = count ? T{1} / T(count) : T{0};
  const auto li = logits.id();
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record(
      "cross_entropy", Shape{1}, {total * inv}, {logits},
      [li, c, rows, inv, probs = std::move(probs), lab = std::move(lab)](Tape<T>& t, std::uint32_t self) {
        const T g = t.grad_buffer(self)[0] * inv;
        auto gl = t.grad_buffer(li);
        for (std::size_t r = 0; r < rows; ++r) {
          if (lab[r] < 0) continue;
          for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * probs[r * c + j];
          gl[r * c + static_cast<std::size_t>(lab[r])] -= g;
        }
      });
}

/// Mean over rows of KL(N(mu, exp(logvar)) || N(0, I)), summed over the last axis.
template <class T>
Var<T> gaussian_kl(Var<T> mu, Var<T> logvar) {
  if (mu.shape() != logvar.shape()) shape_mismatch("gaussian_kl", mu.shape(), logvar.shape());
  auto mv = mu.value();
  auto lv = logvar.value();
  for (T v : lv)
    if (!std::isfinite(v)) throw std::domain_error("gaussian_kl: non-finite log-variance");
  const std::size_t rows = mu.size() / mu.shape().back();
  T s = 0;
  for (std::size_t i = 0; i < mv.size(); ++i) s += T(0.5) * (mv[i] * mv[i] + std::exp(lv[i]) - T{1} - lv[i]);
  const T inv = T{1} / T(rows);
  const auto mi = mu.id(), vi = logvar.id();
  return mu.tape().record("gaussian_kl", Shape{1}, {s * inv}, {mu, logvar}, [mi, vi, inv](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buffer(self)[0] * inv;
    if (t.requires_grad(mi)) {
      auto gm = t.grad_buffer(mi);
      auto mv = t.value(mi);
      for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g * mv[i];
    }
    if (t.requires_grad(vi)) {
      auto gv = t.grad_buffer(vi);
      auto lv = t.value(vi);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g * T(0.5) * (std::exp(lv[i]) - T{1});
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

/// Concatenates along the last axis; leading axes must match.
template <class T>
Var<T> concat(Var<T> a, Var<T> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 1, bs.begin())) shape_mismatch("concat", as, bs);
  const std::size_t na = as.back(), nb = bs.back(), rows = a.size() / na, n = na + nb;
  Shape os = as;
  os.back() = n;
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * na, na, out.data() + r * n);
    std::copy_n(bv.data() + r * nb, nb, out.data() + r * n + na);
  }
  const auto ai = a.id(), bi = b.id();
  return a.tape().record("concat", std::move(os), std::move(out), {a, b},
                         [ai, bi, na, nb, rows, n](Tape<T>& t, std::uint32_t self) {
                           auto g = t.grad_buffer(self);
                           if (t.requires_grad(ai)) {
                             auto ga = t.grad_buffer(ai);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[r * n + j];
                           }
                           if (t.requires_grad(bi)) {
                             auto gb = t.grad_buffer(bi);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] += g[r * n + na + j];
                           }
                         });
}

/// Columns [begin, end) of the last axis.
template <class T>
Var<T> slice(Var<T> x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.shape().back();
  if (begin >= end || end > n)
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for shape " +
                     to_string(x.shape()));
  const std::size_t rows = x.size() / n, w = end - begin;
  Shape os = x.shape();
  os.back() = w;
  auto xv = x.value();
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * n + begin, w, out.data() + r * w);
  const auto xi = x.id();
  return x.tape().record("slice", std::move(os), std::move(out), {x}, [xi, rows, n, w, begin](Tape<T>& t, std::uint32_t self) {
    auto g = t.grad_buffer(self);
    auto gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * n + begin + j] += g[r * w + j];
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  if (numel(shape) != x.size()) shape_mismatch("reshape", x.shape(), shape);
  const auto xi = x.id();
  return x.tape().record("reshape", std::move(shape), x.to_vector(), {x}, [xi](Tape<T>& t, std::uint32_t self) {
    detail::accumulate<T>(t.grad_buffer(xi), t.grad_buffer(self));
  });
}

/// [A, B, C, D] -> [A, C, B, D]; splits or merges attention heads.
template <class T>
Var<T> permute_0213(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("permute_0213: expected rank 4, got " + to_string(s));
  const std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(xv.data() + ((a * B + b) * C + c) * D, D, out.data() + ((a * C + c) * B + b) * D);
  const auto xi = x.id();
  return x.tape().record("permute_0213", Shape{A, C, B, D}, std::move(out), {x},
                         [xi, A, B, C, D](Tape<T>& t, std::uint32_t self) {
                           auto g = t.grad_buffer(self);
                           auto gx = t.grad_buffer(xi);
                           for (std::size_t a = 0; a < A; ++a)
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t c = 0; c < C; ++c)
                                 for (std::size_t d = 0; d < D; ++d)
                                   gx[((a * B + b) * C + c) * D + d] += g[((a * C + c) * B + b) * D + d];
                         });
}

/// Rows of x (viewed as [R, last_dim]) selected by index -> [k, last_dim].
template <class T>
Var<T> take_rows(Var<T> x, std::span<const std::size_t> rows) {
  const std::size_t n = x.shape().back(), total = x.size() / n;
  if (rows.empty()) throw ShapeError("take_rows: empty row selection");
  auto xv = x.value();
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) throw std::out_of_range("take_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(xv.data() + rows[i] * n, n, out.data() + i * n);
  }
  const auto xi = x.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.tape().record("take_rows", Shape{rows.size(), n}, std::move(out), {x},
                         [xi, n, idx = std::move(idx)](Tape<T>& t, std::uint32_t self) {
                           auto g = t.grad_buffer(self);
                           auto gx = t.grad_buffer(xi);
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += g[i * n + j];
                         });
}

/// Copy of base with the listed rows replaced by the rows of part[k, last_dim].
template <class T>
Var<T> put_rows(Var<T> base, Var<T> part, std::span<const std::size_t> rows) {
  const std::size_t n = base.shape().back(), total = base.size() / n;
  if (part.shape() != Shape{rows.size(), n}) shape_mismatch("put_rows", base.shape(), part.shape());
  std::vector<T> out = base.to_vector();
  auto pv = part.value();
  std::vector<std::uint8_t> replaced(total, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) throw std::out_of_range("put_rows: row " + std::to_string(rows[i]) + " out of range");
    if (replaced[rows[i]]) throw std::invalid_argument("put_rows: duplicate row " + std::to_string(rows[i]));
    replaced[rows[i]] = 1;
    std::copy_n(pv.data() + i * n, n, out.data() + rows[i] * n);
  }
  const auto bi = base.id(), pi = part.id();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return base.tape().record(
      "put_rows", base.shape(), std::move(out), {base, part},
      [bi, pi, n, idx = std::move(idx), replaced = std::move(replaced)](Tape<T>& t, std::uint32_t self) {
        auto g = t.grad_buffer(self);
        if (t.requires_grad(bi)) {
          auto gb = t.grad_buffer(bi);
          for (std::size_t r = 0; r < replaced.size(); ++r)
            if (!replaced[r])
              for (std::size_t j = 0; j < n; ++j) gb[r * n + j] += g[r * n + j];
        }
        if (t.requires_grad(pi)) {
          auto gp = t.grad_buffer(pi);
          for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) gp[i * n + j] += g[idx[i] * n + j];
        }
      });
}

/// Rows of table[V, d] gathered by id; output shape is `prefix` + [d].
template <class T>
Var<T> embedding(Var<T> table, std::span<const int> ids, Shape prefix) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(ts));
  if (numel(prefix) != ids.size()) shape_mismatch("embedding", prefix, Shape{ids.size()});
  const std::size_t vocab = ts[0], d = ts[1];
  auto tv = table.value();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  prefix.push_back(d);
  const auto ti = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape().record("embedding", std::move(prefix), std::move(out), {table},
                             [ti, d, idv = std::move(idv)](Tape<T>& t, std::uint32_t self) {
                               auto g = t.grad_buffer(self);
                               auto gt = t.grad_buffer(ti);
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   gt[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
                             });
}

/// Value copy with no path back to x.
template <class T>
Var<T> detach(Var<T> x) {
  return x.tape().constant(x.shape(), x.to_vector());
}

}  // namespace mvcr
