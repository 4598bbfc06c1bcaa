#pragma once

// Seeded synthetic data: procedural digit images and two token-sequence
// tasks. Each split draws from its own substream, so splits never share
// random state.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "mvcr/encoder.hpp"
#include "mvcr/rng.hpp"

namespace mvcr {

inline constexpr int kClsId = 0;
inline constexpr int kPadId = 1;

/// Low-resource training sizes.
inline constexpr std::array<std::size_t, 4> kLowResourceSizes{100, 200, 500, 1000};

struct Example {
  std::vector<int> ids;
  std::vector<int> labels;  // one label for sequence tasks, one per token for token tasks
};

struct Dataset {
  TaskKind task = TaskKind::sequence;
  std::size_t num_classes = 2;
  std::vector<Example> train, dev, test;
};

enum class Split : std::uint64_t { train = 1, dev = 2, test = 3 };

struct SplitSizes {
  std::size_t train = 100;
  std::size_t dev = 200;
  std::size_t test = 1000;
};

/// Pads the selected examples to the longest one.
inline Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> picked, TaskKind task) {
  if (picked.empty()) throw std::invalid_argument("make_batch: no examples selected");
  Batch b;
  b.batch = picked.size();
  for (auto i : picked) b.seq = std::max(b.seq, examples[i].ids.size());
  b.ids.assign(b.batch * b.seq, kPadId);
  b.valid.assign(b.batch * b.seq, 0);
  if (task == TaskKind::token) b.labels.assign(b.batch * b.seq, -1);
  for (std::size_t r = 0; r < picked.size(); ++r) {
    const Example& e = examples[picked[r]];
    std::copy(e.ids.begin(), e.ids.end(), b.ids.begin() + r * b.seq);
    std::fill_n(b.valid.begin() + r * b.seq, e.ids.size(), std::uint8_t{1});
    if (task == TaskKind::sequence)
      b.labels.push_back(e.labels.at(0));
    else
      std::copy(e.labels.begin(), e.labels.end(), b.labels.begin() + r * b.seq);
  }
  return b;
}

namespace detail {

/// Cumulative Zipf weights over n ranks.
inline std::vector<double> zipf_cdf(std::size_t n, double exponent) {
  std::vector<double> cdf(n);
  double total = 0;
  for (std::size_t k = 0; k < n; ++k) cdf[k] = total += 1.0 / std::pow(double(k + 1), exponent);
  for (auto& c : cdf) c /= total;
  return cdf;
}

inline std::size_t sample_cdf(const std::vector<double>& cdf, Stream& rng) {
  const double u = rng.uniform();
  return std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), cdf.size() - 1);
}

inline void check_sizes(const SplitSizes& s) {
  if (s.train == 0 || s.dev == 0 || s.test == 0) throw std::invalid_argument("dataset: empty split");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Sequence classification

/// Each class owns a set of keywords; a sequence plants `planted` keywords of
/// its class and `distractors` keywords of other classes among Zipf-distributed
/// filler. A class-specific spurious token appears at `spurious_rate` in
/// train/dev sequences; in test it is attached to a random class instead.
struct SeqTaskSpec {
  std::size_t vocab = 256;
  std::size_t seq_len = 16;  // including the leading CLS token
  std::size_t num_classes = 2;
  std::size_t keywords_per_class = 4;
  std::size_t planted = 3;
  std::size_t distractors = 1;
  double spurious_rate = 0.0;
  double label_noise = 0.0;  // train split only
  double zipf_exponent = 1.1;
  SplitSizes sizes;

  std::size_t keyword_id(std::size_t cls, std::size_t k) const { return 2 + cls * keywords_per_class + k; }
  std::size_t spurious_id(std::size_t cls) const { return 2 + num_classes * keywords_per_class + cls; }
  std::size_t first_filler() const { return 2 + num_classes * (keywords_per_class + 1); }

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("seq task: need at least two classes");
    if (keywords_per_class == 0) throw std::invalid_argument("seq task: need keywords");
    if (planted == 0 || distractors >= planted)
      throw std::invalid_argument("seq task: distractors must be fewer than planted keywords");
    if (planted + distractors + 1 >= seq_len) throw std::invalid_argument("seq task: sequence too short");
    if (first_filler() + 1 >= vocab) throw std::invalid_argument("seq task: vocabulary too small");
    if (spurious_rate < 0.0 || spurious_rate > 1.0) throw std::invalid_argument("seq task: spurious_rate out of [0,1]");
    if (label_noise < 0.0 || label_noise > 1.0) throw std::invalid_argument("seq task: label_noise out of [0,1]");
    detail::check_sizes(sizes);
  }
};

inline Example generate_seq_example(const SeqTaskSpec& spec, Split split, std::uint64_t seed, std::size_t index,
                                    const std::vector<double>& filler_cdf) {
  Stream rng(seed, {static_cast<std::uint64_t>(Purpose::data), 1, static_cast<std::uint64_t>(split), index});
  const std::size_t label = rng.below(spec.num_classes);
  const std::size_t body = spec.seq_len - 1;
  std::vector<int> tokens(body);
  for (auto& t : tokens) t = static_cast<int>(spec.first_filler() + detail::sample_cdf(filler_cdf, rng));

  // Distinct body positions for planted, distractor and spurious tokens.
  std::vector<std::size_t> slots(body);
  for (std::size_t i = 0; i < body; ++i) slots[i] = i;
  for (std::size_t i = 0; i + 1 < body; ++i) std::swap(slots[i], slots[i + rng.below(body - i)]);
  std::size_t next = 0;
  for (std::size_t k = 0; k < spec.planted; ++k)
    tokens[slots[next++]] = static_cast<int>(spec.keyword_id(label, rng.below(spec.keywords_per_class)));
  for (std::size_t k = 0; k < spec.distractors; ++k) {
    std::size_t other = rng.below(spec.num_classes - 1);
    if (other >= label) ++other;
    tokens[slots[next++]] = static_cast<int>(spec.keyword_id(other, rng.below(spec.keywords_per_class)));
  }
  if (rng.bernoulli(spec.spurious_rate)) {
    const std::size_t cls = split == Split::test ? rng.below(spec.num_classes) : label;
    tokens[slots[next++]] = static_cast<int>(spec.spurious_id(cls));
  }
  Example e;
  e.ids.reserve(spec.seq_len);
  e.ids.push_back(kClsId);
  e.ids.insert(e.ids.end(), tokens.begin(), tokens.end());
  std::size_t observed = label;
  if (split == Split::train && spec.label_noise > 0.0) {
    Stream flip(seed, {static_cast<std::uint64_t>(Purpose::data), 4, index});
    if (flip.bernoulli(spec.label_noise)) {
      observed = flip.below(spec.num_classes - 1);
      if (observed >= label) ++observed;
    }
  }
  e.labels = {static_cast<int>(observed)};
  return e;
}

inline Dataset generate_seq_task(const SeqTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto cdf = detail::zipf_cdf(spec.vocab - spec.first_filler(), spec.zipf_exponent);
  Dataset d;
  d.task = TaskKind::sequence;
  d.num_classes = spec.num_classes;
  auto fill = [&](std::vector<Example>& out, std::size_t n, Split s) {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_seq_example(spec, s, seed, i, cdf));
  };
  fill(d.train, spec.sizes.train, Split::train);
  fill(d.dev, spec.sizes.dev, Split::dev);
  fill(d.test, spec.sizes.test, Split::test);
  return d;
}

/// Majority vote over keyword hits; ties go to the lower class id.
inline int keyword_majority(const SeqTaskSpec& spec, std::span<const int> ids) {
  std::vector<std::size_t> hits(spec.num_classes, 0);
  for (int id : ids) {
    const auto u = static_cast<std::size_t>(id);
    if (u >= spec.keyword_id(0, 0) && u < spec.keyword_id(spec.num_classes, 0))
      ++hits[(u - spec.keyword_id(0, 0)) / spec.keywords_per_class];
  }
  return static_cast<int>(std::max_element(hits.begin(), hits.end()) - hits.begin());
}

// ---------------------------------------------------------------------------
// Token tagging

enum Tag : int { tag_o = 0, tag_b_x = 1, tag_i_x = 2, tag_b_y = 3, tag_i_y = 4 };
inline constexpr std::size_t kNumTags = 5;

/// Tags follow a two-state process: outside a span, a position starts an X
/// span with p_x, a Y span with p_y, and is O otherwise; inside a span it
/// continues with p_continue and otherwise draws fresh. Span starts use the
/// type's start lexicon, continuations a lexicon shared by both types, so the
/// type of a continuation is only recoverable from context.
struct TokenTaskSpec {
  std::size_t vocab = 256;
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  double p_x = 0.12;
  double p_y = 0.12;
  double p_continue = 0.5;
  std::size_t start_lexicon = 8;
  std::size_t continue_lexicon = 8;
  double zipf_exponent = 1.1;
  SplitSizes sizes;

  std::size_t x_start(std::size_t k) const { return 2 + k; }
  std::size_t y_start(std::size_t k) const { return 2 + start_lexicon + k; }
  std::size_t continuation(std::size_t k) const { return 2 + 2 * start_lexicon + k; }
  std::size_t first_filler() const { return 2 + 2 * start_lexicon + continue_lexicon; }

  void validate() const {
    if (min_len == 0 || min_len > max_len) throw std::invalid_argument("token task: bad length range");
    if (p_x < 0 || p_y < 0 || p_x + p_y > 1.0) throw std::invalid_argument("token task: span priors out of range");
    if (p_continue < 0 || p_continue > 1.0) throw std::invalid_argument("token task: p_continue out of range");
    if (start_lexicon == 0 || continue_lexicon == 0) throw std::invalid_argument("token task: empty lexicon");
    if (first_filler() + 1 >= vocab) throw std::invalid_argument("token task: vocabulary too small");
    detail::check_sizes(sizes);
  }
};

inline Example generate_token_example(const TokenTaskSpec& spec, Split split, std::uint64_t seed, std::size_t index,
                                      const std::vector<double>& filler_cdf) {
  Stream rng(seed, {static_cast<std::uint64_t>(Purpose::data), 2, static_cast<std::uint64_t>(split), index});
  const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
  Example e;
  int open = tag_o;  // tag family of the current span, tag_o when outside
  for (std::size_t i = 0; i < len; ++i) {
    int tag;
    if (open != tag_o && rng.bernoulli(spec.p_continue)) {
      tag = open + 1;
    } else {
      const double u = rng.uniform();
      tag = u < spec.p_x ? tag_b_x : u < spec.p_x + spec.p_y ? tag_b_y : tag_o;
    }
    std::size_t id;
    switch (tag) {
      case tag_b_x: id = spec.x_start(rng.below(spec.start_lexicon)); break;
      case tag_b_y: id = spec.y_start(rng.below(spec.start_lexicon)); break;
      case tag_i_x:
      case tag_i_y: id = spec.continuation(rng.below(spec.continue_lexicon)); break;
      default: id = spec.first_filler() + detail::sample_cdf(filler_cdf, rng);
    }
    open = tag == tag_o ? tag_o : (tag == tag_b_x || tag == tag_i_x) ? tag_b_x : tag_b_y;
    e.ids.push_back(static_cast<int>(id));
    e.labels.push_back(tag);
  }
  return e;
}

inline Dataset generate_token_task(const TokenTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto cdf = detail::zipf_cdf(spec.vocab - spec.first_filler(), spec.zipf_exponent);
  Dataset d;
  d.task = TaskKind::token;
  d.num_classes = kNumTags;
  auto fill = [&](std::vector<Example>& out, std::size_t n, Split s) {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_token_example(spec, s, seed, i, cdf));
  };
  fill(d.train, spec.sizes.train, Split::train);
  fill(d.dev, spec.sizes.dev, Split::dev);
  fill(d.test, spec.sizes.test, Split::test);
  return d;
}

/// Deterministic tagger that inverts the generator.
inline std::vector<int> rule_tagger(const TokenTaskSpec& spec, std::span<const int> ids) {
  std::vector<int> tags;
  int open = tag_o;
  for (int raw : ids) {
    const auto id = static_cast<std::size_t>(raw);
    int tag = tag_o;
    if (id >= spec.x_start(0) && id < spec.y_start(0))
      tag = tag_b_x;
    else if (id >= spec.y_start(0) && id < spec.continuation(0))
      tag = tag_b_y;
    else if (id >= spec.continuation(0) && id < spec.first_filler())
      tag = open == tag_o ? tag_o : open + 1;
    open = tag == tag_o ? tag_o : (tag == tag_b_x || tag == tag_i_x) ? tag_b_x : tag_b_y;
    tags.push_back(tag);
  }
  return tags;
}

// ---------------------------------------------------------------------------
// Span F1

struct Span {
  std::size_t begin, end;  // [begin, end)
  int type;                // tag_b_x or tag_b_y
  auto operator<=>(const Span&) const = default;
};

/// BIO spans; an I- tag that does not continue a span of its type opens one.
inline std::vector<Span> extract_spans(std::span<const int> tags) {
  std::vector<Span> spans;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const int t = tags[i];
    if (t == tag_o || t < 0) continue;
    const int type = (t == tag_b_x || t == tag_i_x) ? tag_b_x : tag_b_y;
    const bool inside = t == tag_i_x || t == tag_i_y;
    if (inside && !spans.empty() && spans.back().end == i && spans.back().type == type)
      spans.back().end = i + 1;
    else
      spans.push_back({i, i + 1, type});
  }
  return spans;
}

struct SpanCounts {
  std::size_t predicted = 0, gold = 0, correct = 0;

  void add(std::span<const int> gold_tags, std::span<const int> predicted_tags) {
    auto g = extract_spans(gold_tags);
    auto p = extract_spans(predicted_tags);
    gold += g.size();
    predicted += p.size();
    std::sort(g.begin(), g.end());
    for (const auto& s : p) correct += std::binary_search(g.begin(), g.end(), s) ? 1 : 0;
  }

  /// F1 in [0, 1]; 1 when there are neither gold nor predicted spans.
  double f1() const {
    if (gold == 0 && predicted == 0) return 1.0;
    if (correct == 0) return 0.0;
    const double p = double(correct) / double(predicted), r = double(correct) / double(gold);
    return 2 * p * r / (p + r);
  }
};

// ---------------------------------------------------------------------------
// Procedural digits

inline constexpr std::size_t kDigitSide = 28;
inline constexpr std::size_t kDigitPixels = kDigitSide * kDigitSide;

struct DigitImage {
  int label = 0;
  std::vector<float> clean;  // 784 values in [0, 1]
  std::vector<float> noisy;
};

namespace detail {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

/// Arc in glyph coordinates (y grows downward), angles in degrees.
inline Stroke arc(double cx, double cy, double rx, double ry, double from, double to, int steps = 16) {
  Stroke s;
  for (int i = 0; i <= steps; ++i) {
    const double a = (from + (to - from) * i / steps) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

inline std::vector<Stroke> glyph(int digit) {
  switch (digit) {
    case 0: return {arc(0.5, 0.5, 0.27, 0.4, 0, 360, 24)};
    case 1: return {{{0.36, 0.24}, {0.52, 0.1}, {0.52, 0.9}}};
    case 2: {
      Stroke s = arc(0.5, 0.32, 0.21, 0.2, 200, 400);
      s.push_back({0.24, 0.88});
      s.push_back({0.78, 0.88});
      return {s};
    }
    case 3: return {arc(0.48, 0.3, 0.2, 0.19, 210, 450), arc(0.48, 0.68, 0.23, 0.21, 270, 515)};
    case 4: return {{{0.62, 0.1}, {0.2, 0.64}, {0.82, 0.64}}, {{0.62, 0.32}, {0.62, 0.9}}};
    case 5: {
      Stroke s{{0.74, 0.11}, {0.33, 0.11}, {0.3, 0.46}};
      Stroke bowl = arc(0.5, 0.65, 0.24, 0.23, 215, 500);
      s.insert(s.end(), bowl.begin(), bowl.end());
      return {s};
    }
    case 6: return {{{0.7, 0.1}, {0.47, 0.24}, {0.32, 0.46}, {0.29, 0.66}}, arc(0.5, 0.67, 0.21, 0.21, 0, 360, 20)};
    case 7: return {{{0.22, 0.12}, {0.78, 0.12}, {0.42, 0.9}}};
    case 8: return {arc(0.5, 0.3, 0.18, 0.18, 0, 360, 20), arc(0.5, 0.69, 0.22, 0.2, 0, 360, 20)};
    default: return {arc(0.5, 0.33, 0.2, 0.2, 0, 360, 20), {{0.7, 0.36}, {0.62, 0.9}}};
  }
}

inline double segment_distance(Pt p, Pt a, Pt b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

/// Rasterizes one digit with random affine distortion, control-point jitter
/// and stroke width. Pixel values lie in [0, 1].
inline std::vector<float> render_digit(int digit, Stream& rng) {
  auto strokes = detail::glyph(digit);
  const double rot = std::clamp(rng.normal() * 0.14, -0.3, 0.3);
  const double sx = rng.uniform(0.8, 1.05), sy = sx * rng.uniform(0.9, 1.1);
  const double shear = rng.uniform(-0.18, 0.18);
  const double tx = rng.uniform(-0.07, 0.07), ty = rng.uniform(-0.06, 0.06);
  const double width = rng.uniform(0.05, 0.095);
  const double c = std::cos(rot), s = std::sin(rot);
  for (auto& stroke : strokes)
    for (auto& p : stroke) {
      const double x = p.x - 0.5 + 0.02 * rng.normal(), y = p.y - 0.5 + 0.02 * rng.normal();
      const double xs = sx * (x + shear * y), ys = sy * y;
      p = {0.5 + c * xs - s * ys + tx, 0.5 + s * xs + c * ys + ty};
    }
  // Glyph box [0,1]² maps onto the central 20×20 pixels.
  std::vector<float> img(kDigitPixels);
  const double soft = 0.6 / 20.0;
  for (std::size_t py = 0; py < kDigitSide; ++py)
    for (std::size_t px = 0; px < kDigitSide; ++px) {
      const detail::Pt p{(double(px) + 0.5 - 4.0) / 20.0, (double(py) + 0.5 - 4.0) / 20.0};
      double dist = 1e9;
      for (const auto& stroke : strokes)
        for (std::size_t i = 0; i + 1 < stroke.size(); ++i)
          dist = std::min(dist, detail::segment_distance(p, stroke[i], stroke[i + 1]));
      img[py * kDigitSide + px] = static_cast<float>(std::clamp(1.0 - (dist - width / 2) / soft, 0.0, 1.0));
    }
  return img;
}

/// noisy = clamp(clean + N(0, sigma²), 0, 1).
inline std::vector<DigitImage> generate_digits(std::size_t n, double noise_sigma, std::uint64_t seed,
                                               Split split = Split::train) {
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("generate_digits: noise_sigma must be >= 0");
  std::vector<DigitImage> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Stream shape(seed, {static_cast<std::uint64_t>(Purpose::data), 3, static_cast<std::uint64_t>(split), i});
    Stream noise = shape.fork(0x6e6f697365);
    auto& d = out[i];
    d.label = static_cast<int>(shape.below(10));
    d.clean = render_digit(d.label, shape);
    d.noisy = d.clean;
    if (noise_sigma > 0.0)
      for (auto& v : d.noisy) v = static_cast<float>(std::clamp(double(v) + noise_sigma * noise.normal(), 0.0, 1.0));
  }
  return out;
}

}  // namespace mvcr
