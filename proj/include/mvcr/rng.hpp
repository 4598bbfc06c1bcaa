#pragma once

// Counter-based random numbers. Every draw is a pure function of a key
// (seed plus a handful of integer coordinates), so any draw can be
// recomputed in isolation and in any order.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace mvcr {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_words(std::uint64_t seed, std::initializer_list<std::uint64_t> words) noexcept {
  std::uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ULL);
  for (std::uint64_t w : words) h = splitmix64(h ^ splitmix64(w + 0x3c6ef372fe94f82bULL));
  return h;
}

/// Maps 64 random bits to a double in [0, 1) using the top 53 bits.
constexpr double unit_interval(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Unbiased-enough integer in [0, n) via the multiply-shift reduction.
inline std::uint64_t below(std::uint64_t bits, std::uint64_t n) noexcept {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(bits) * n) >> 64);
}

/// Tags that separate independent random streams drawn at the same site.
enum class Purpose : std::uint64_t {
  layer_gate = 1,
  pool_choice = 2,
  sub_gate = 3,
  sub_choice = 4,
  recon_sub_gate = 5,
  recon_sub_choice = 6,
  vae_noise = 7,
  dropout = 8,
  gaussian_noise = 9,
  mixout = 10,
  init = 11,
  shuffle = 12,
  data = 13,
};

/// Where a draw happens: training step, layer index and token (row) index.
/// `token == layer_level` marks a draw shared by every token of the layer.
struct DrawSite {
  static constexpr std::int64_t layer_level = -1;
  std::uint64_t step = 0;
  std::int64_t layer = 0;
  std::int64_t token = layer_level;
};

class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }

  constexpr std::uint64_t bits(Purpose purpose, const DrawSite& site, std::uint64_t slot = 0) const noexcept {
    return hash_words(seed_, {static_cast<std::uint64_t>(purpose), site.step,
                              static_cast<std::uint64_t>(site.layer), static_cast<std::uint64_t>(site.token), slot});
  }

  double uniform(Purpose purpose, const DrawSite& site, std::uint64_t slot = 0) const noexcept {
    return unit_interval(bits(purpose, site, slot));
  }

  std::uint64_t choose(std::uint64_t n, Purpose purpose, const DrawSite& site, std::uint64_t slot = 0) const noexcept {
    return below(bits(purpose, site, slot), n);
  }

 private:
  std::uint64_t seed_;
};

/// Sequential view over a counter-based generator: (key, counter) -> bits.
class Stream {
 public:
  Stream() = default;
  Stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept : key_(hash_words(seed, tags)) {}

  std::uint64_t next() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

  double uniform() noexcept { return unit_interval(next()); }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) noexcept { return mvcr::below(next(), n); }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Stream fork(std::uint64_t tag) const noexcept {
    Stream s;
    s.key_ = hash_words(key_, {tag});
    return s;
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mvcr
