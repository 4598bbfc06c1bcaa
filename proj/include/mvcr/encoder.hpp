#pragma once

// Small pre-norm transformer encoder with sequence- and token-level heads
// and MVCR pools after any subset of its layers.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mvcr/mvcr.hpp"
#include "mvcr/nn.hpp"

namespace mvcr {

enum class TaskKind { sequence, token };

inline std::string_view to_string(TaskKind k) { return k == TaskKind::sequence ? "sequence" : "token"; }

inline TaskKind parse_task(std::string_view s) {
  if (s == "sequence" || s == "seq") return TaskKind::sequence;
  if (s == "token") return TaskKind::token;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t vocab = 256;
  std::size_t max_seq_len = 32;
  TaskKind task = TaskKind::sequence;
  std::size_t num_classes = 2;
  double embedding_std = 1.0;

  void validate() const {
    if (num_layers < 1) throw std::invalid_argument("encoder: need at least one layer");
    if (heads == 0 || hidden % heads != 0)
      throw std::invalid_argument("encoder: hidden dim " + std::to_string(hidden) + " not divisible by " +
                                  std::to_string(heads) + " heads");
    if (ffn == 0 || vocab == 0 || max_seq_len == 0) throw std::invalid_argument("encoder: zero-sized dimension");
    if (num_classes < 2) throw std::invalid_argument("encoder: need at least two classes");
    if (!(embedding_std > 0.0)) throw std::invalid_argument("encoder: embedding_std must be positive");
  }
};

/// Baseline regularizer attached to a run (none for MVCR and vanilla runs).
struct Regularizer {
  BaselineKind kind = BaselineKind::none;
  double strength = 0.0;
};

/// Padded batch. `valid` marks real tokens; labels are per example for
/// sequence tasks and per position (-1 on padding) for token tasks.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> valid;
  std::vector<int> labels;
};

/// Per-forward randomness and switches.
struct ForwardContext {
  Mode mode = Mode::eval;
  CounterRng rng{0};
  std::uint64_t step = 0;
  Regularizer regularizer;
  AugmentationTrace* trace = nullptr;
};

template <class T>
struct EncoderModel {
  EncoderConfig cfg;
  MvcrConfig mvcr;
  Tensor<T> token_embedding;     // [vocab, d]
  Tensor<T> position_embedding;  // [max_seq_len, d]
  std::vector<AttentionBlock<T>> blocks;
  LayerNorm<T> final_norm;
  Linear<T> head;
  std::vector<MvcrPool<T>> pools;  // one per entry of mvcr.layers, same order

  /// Every component draws from its own stream, so adding pools leaves the
  /// backbone and head initialization untouched.
  static EncoderModel init(const EncoderConfig& cfg, const MvcrConfig& mvcr, std::uint64_t seed) {
    cfg.validate();
    mvcr.validate(cfg.num_layers, cfg.hidden);
    EncoderModel m;
    m.cfg = cfg;
    m.mvcr = mvcr;
    const auto init_tag = static_cast<std::uint64_t>(Purpose::init);
    Stream emb(seed, {init_tag, 0});
    m.token_embedding = Tensor<T>::normal({cfg.vocab, cfg.hidden}, cfg.embedding_std, emb);
    m.position_embedding = Tensor<T>::normal({cfg.max_seq_len, cfg.hidden}, cfg.embedding_std, emb);
    for (std::size_t n = 0; n < cfg.num_layers; ++n) {
      Stream s(seed, {init_tag, 1, n});
      m.blocks.push_back(AttentionBlock<T>::init(cfg.hidden, cfg.heads, cfg.ffn, s));
    }
    m.final_norm = LayerNorm<T>::init(cfg.hidden);
    Stream h(seed, {init_tag, 2});
    m.head = Linear<T>::init(cfg.hidden, cfg.num_classes, h);
    if (mvcr.active())
      for (int layer : mvcr.layers) {
        Stream s(seed, {init_tag, 3, static_cast<std::uint64_t>(layer)});
        m.pools.push_back(MvcrPool<T>::init(layer, cfg.hidden, mvcr, s));
      }
    return m;
  }

  const MvcrPool<T>* pool_for(int layer) const {
    for (const auto& p : pools)
      if (p.layer == layer) return &p;
    return nullptr;
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::vector<NamedParam<T>> parameters() {
    std::vector<NamedParam<T>> out;
    visit([&](const std::string& name, Tensor<T>& t, Group g) { out.push_back({name, &t, g}); });
    return out;
  }

  std::map<Group, std::size_t> parameter_counts() const {
    std::map<Group, std::size_t> counts{{Group::backbone, 0}, {Group::head, 0}, {Group::hae, 0}};
    visit([&](const std::string&, const Tensor<T>& t, Group g) { counts[g] += t.size(); });
    return counts;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& s, F& f) {
    auto in = [&](Group g) { return [&f, g](const std::string& name, auto& t) { f(name, t, g); }; };
    auto backbone = in(Group::backbone);
    backbone("embed.token", s.token_embedding);
    backbone("embed.position", s.position_embedding);
    for (std::size_t n = 0; n < s.blocks.size(); ++n) s.blocks[n].visit("layer" + std::to_string(n + 1), backbone);
    s.final_norm.visit("final_norm", backbone);
    s.head.visit("head", in(Group::head));
    for (auto& p : s.pools) p.visit("mvcr.layer" + std::to_string(p.layer), in(Group::hae));
  }
};

/// Copy without MVCR pools: the same backbone and head, no augmentation path.
template <class T>
EncoderModel<T> plug_out(const EncoderModel<T>& model) {
  EncoderModel<T> out = model;
  out.pools.clear();
  out.mvcr.layers.clear();
  out.mvcr.enabled = false;
  return out;
}

template <class T>
struct EncodeResult {
  Var<T> output;                 // after the final layer norm, [B, S, d]
  std::vector<Var<T>> layers;    // h_1..h_N as produced by each block (before augmentation)
};

namespace detail {

inline void check_batch(const EncoderConfig& cfg, const Batch& b) {
  if (b.batch == 0 || b.seq == 0) throw std::invalid_argument("encode: empty batch");
  if (b.seq > cfg.max_seq_len)
    throw std::invalid_argument("encode: sequence length " + std::to_string(b.seq) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  if (b.ids.size() != b.batch * b.seq) shape_mismatch("encode", Shape{b.batch, b.seq}, Shape{b.ids.size()});
  if (!b.valid.empty() && b.valid.size() != b.ids.size())
    shape_mismatch("encode", Shape{b.batch, b.seq}, Shape{b.valid.size()});
}

inline Stream regularizer_stream(const ForwardContext& ctx, Purpose purpose, std::uint64_t layer) {
  return Stream(ctx.rng.bits(purpose, {ctx.step, static_cast<std::int64_t>(layer)}), {});
}

}  // namespace detail

/// h_0 = token + position embeddings; h_n = f_n(h_{n-1}), passed through the
/// layer's MVCR pool when n is an insertion layer.
template <class T>
EncodeResult<T> encode(Tape<T>& tape, const EncoderModel<T>& model, const Batch& batch, const ForwardContext& ctx) {
  detail::check_batch(model.cfg, batch);
  const std::size_t B = batch.batch, S = batch.seq;
  const bool training = ctx.mode == Mode::train;
  const auto& reg = ctx.regularizer;

  std::vector<std::size_t> positions(S);
  for (std::size_t i = 0; i < S; ++i) positions[i] = i;
  Var<T> x = embedding(tape.param(model.token_embedding), batch.ids, {B, S});
  x = add(x, take_rows(tape.param(model.position_embedding), positions));
  if (reg.kind == BaselineKind::dropout) {
    auto s = detail::regularizer_stream(ctx, Purpose::dropout, 0);
    x = dropout(x, reg.strength, s, training);
  }

  EncodeResult<T> result;
  for (std::size_t n = 0; n < model.blocks.size(); ++n) {
    const int layer = static_cast<int>(n + 1);
    x = attention_block(tape, model.blocks[n], x, batch.valid);
    if (reg.kind == BaselineKind::dropout) {
      auto s = detail::regularizer_stream(ctx, Purpose::dropout, n + 1);
      x = dropout(x, reg.strength, s, training);
    } else if (reg.kind == BaselineKind::gaussian_noise) {
      auto s = detail::regularizer_stream(ctx, Purpose::gaussian_noise, n + 1);
      x = gaussian_noise(x, reg.strength, s, training);
    }
    result.layers.push_back(x);
    if (const auto* pool = model.pool_for(layer); pool && ctx.mode != Mode::eval)
      x = mvcr_layer_forward(tape, *pool, model.mvcr, x, ctx.rng, ctx.step, ctx.mode, ctx.trace);
  }
  result.output = layernorm_forward(tape, model.final_norm, x);
  return result;
}

template <class T>
struct TaskOutput {
  Var<T> loss;
  Var<T> logits;             // [B, C] or [B*S, C]
  std::vector<int> predictions;
  EncodeResult<T> encoded;
};

/// Sequence tasks classify the first position; token tasks tag every
/// position, with padding labelled -1 and ignored by the loss.
template <class T>
TaskOutput<T> task_forward(Tape<T>& tape, const EncoderModel<T>& model, const Batch& batch, const ForwardContext& ctx) {
  TaskOutput<T> out;
  out.encoded = encode(tape, model, batch, ctx);
  const std::size_t B = batch.batch, S = batch.seq, d = model.cfg.hidden, C = model.cfg.num_classes;
  Var<T> features = reshape(out.encoded.output, {B * S, d});
  std::vector<int> labels = batch.labels;
  if (model.cfg.task == TaskKind::sequence) {
    std::vector<std::size_t> first(B);
    for (std::size_t b = 0; b < B; ++b) first[b] = b * S;
    features = take_rows(features, first);
    if (!labels.empty() && labels.size() != B) shape_mismatch("task_forward", Shape{B}, Shape{labels.size()});
  } else {
    if (!labels.empty() && labels.size() != B * S) shape_mismatch("task_forward", Shape{B, S}, Shape{labels.size()});
    if (!labels.empty() && !batch.valid.empty())
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (!batch.valid[i]) labels[i] = -1;
  }
  out.logits = linear_forward(tape, model.head, features);
  auto lv = out.logits.value();
  const std::size_t rows = lv.size() / C;
  out.predictions.resize(rows);
  for (std::size_t r = 0; r < rows; ++r)
    out.predictions[r] = static_cast<int>(std::max_element(lv.begin() + r * C, lv.begin() + (r + 1) * C) - (lv.begin() + r * C));
  if (!labels.empty()) out.loss = cross_entropy(out.logits, labels);
  return out;
}

/// Reconstruction loss summed over insertion layers, on the pre-augmentation
/// block outputs of an encode pass.
template <class T>
std::optional<ReconResult<T>> mvcr_reconstruction(Tape<T>& tape, const EncoderModel<T>& model,
                                                  const EncodeResult<T>& encoded, const Batch& batch,
                                                  const ForwardContext& ctx) {
  if (model.pools.empty()) return std::nullopt;
  std::optional<ReconResult<T>> total;
  for (const auto& pool : model.pools) {
    const auto& h = encoded.layers.at(static_cast<std::size_t>(pool.layer - 1));
    auto r = pool_reconstruction_loss(tape, pool, model.mvcr, h, batch.valid, ctx.rng, ctx.step,
                                      ctx.mode == Mode::train, ctx.trace);
    if (!total) {
      total = std::move(r);
    } else {
      total->loss = add(total->loss, r.loss);
      total->per_member.insert(total->per_member.end(), r.per_member.begin(), r.per_member.end());
    }
  }
  return total;
}

}  // namespace mvcr
