#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "mvcr/encoder.hpp"
#include "support.hpp"

using namespace mvcr;
using testing_support::binomial_p_value;
using testing_support::chi_square_p_value;
using testing_support::expect_gradients;
using testing_support::independence_p_value;
using testing_support::random_tensor;

namespace {

using D = double;

MvcrConfig small_cfg(std::vector<std::size_t> dims = {4, 4, 4}, int layer = 1) {
  MvcrConfig c;
  c.layers = {layer};
  c.pool_dims = std::move(dims);
  return c;
}

MvcrPool<D> make_pool(const MvcrConfig& cfg, std::size_t d, std::uint64_t seed) {
  Stream rng(seed, {3});
  return MvcrPool<D>::init(cfg.layers.front(), d, cfg, rng);
}

std::vector<D> values(Var<D> v) { return v.to_vector(); }

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.num_layers = 3;
  e.hidden = 8;
  e.heads = 2;
  e.ffn = 16;
  e.vocab = 20;
  e.max_seq_len = 6;
  e.num_classes = 3;
  e.embedding_std = 0.5;
  return e;
}

Batch tiny_batch() {
  Batch b;
  b.batch = 2;
  b.seq = 5;
  b.ids = {1, 4, 7, 2, 9, 3, 3, 11, 0, 0};
  b.valid = {1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  b.labels = {0, 2};
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// stochastic_select

TEST(StochasticSelect, SingleMemberAlwaysChosen) {
  std::vector<std::function<Var<D>(Var<D>)>> pool{[](Var<D> x) { return scale(x, 2.0); }};
  Tape<D> tape;
  auto x = tape.constant({3}, {1, 2, 3});
  CounterRng rng(1);
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::size_t chosen = 99;
    auto y = stochastic_select<D>(pool, x, rng, {s, 1, 0}, &chosen);
    EXPECT_EQ(chosen, 0u);
    EXPECT_EQ(values(y), (std::vector<D>{2, 4, 6}));
  }
}

TEST(StochasticSelect, RejectsEmptyPool) {
  std::vector<std::function<Var<D>(Var<D>)>> pool;
  Tape<D> tape;
  EXPECT_THROW(stochastic_select<D>(pool, tape.constant({1}, {0}), CounterRng(1), {0, 1, 0}), std::invalid_argument);
}

TEST(StochasticSelect, ThreeMembersAreUniform) {
  std::vector<std::function<Var<D>(Var<D>)>> pool(3, [](Var<D> x) { return x; });
  Tape<D> tape;
  auto x = tape.constant({1}, {0});
  CounterRng rng(2);
  const std::size_t n = 100000;
  std::array<std::size_t, 3> counts{};
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t chosen = 0;
    stochastic_select<D>(pool, x, rng, {i, 1, static_cast<std::int64_t>(i % 7)}, &chosen);
    ++counts[chosen];
  }
  for (std::size_t m = 0; m < 3; ++m) {
    EXPECT_NEAR(counts[m] / double(n), 1.0 / 3.0, 0.01);
    EXPECT_GT(binomial_p_value(counts[m], n, 1.0 / 3.0), 1e-3);
  }
}

TEST(StochasticSelect, MemberOutputKeepsInputDim) {
  auto cfg = small_cfg({2, 4, 6});
  auto pool = make_pool(cfg, 8, 3);
  Stream rng(3, {1});
  const auto x = random_tensor({5, 8}, rng);
  for (const auto& m : pool.members) {
    Tape<D> tape;
    std::vector<int> routes(5, kNoSub);
    auto out = compressor_forward(tape, m, tape.constant(x), routes, CounterRng(1), {0, 1}, true, 0);
    EXPECT_EQ(out.output.shape(), x.shape);
  }
}

// ---------------------------------------------------------------------------
// mvcr_layer_forward

TEST(LayerForward, EvalModeAndDisabledConfigAreIdentity) {
  auto cfg = small_cfg();
  cfg.layer_gate_prob = 1.0;
  auto pool = make_pool(cfg, 8, 4);
  Stream rng(4, {1});
  const auto x = random_tensor({2, 5, 8}, rng);
  Tape<D> tape;
  auto in = tape.constant(x);
  EXPECT_EQ(values(mvcr_layer_forward(tape, pool, cfg, in, CounterRng(4), 0, Mode::eval)), x.data);
  auto off = cfg;
  off.enabled = false;
  EXPECT_EQ(values(mvcr_layer_forward(tape, pool, off, in, CounterRng(4), 0, Mode::train)), x.data);
}

TEST(LayerForward, ZeroGateProbabilityIsIdentityInTraining) {
  auto cfg = small_cfg();
  cfg.layer_gate_prob = 0.0;
  auto pool = make_pool(cfg, 8, 5);
  Stream rng(5, {1});
  const auto x = random_tensor({3, 4, 8}, rng);
  for (std::uint64_t step = 0; step < 50; ++step) {
    Tape<D> tape;
    AugmentationTrace trace;
    auto y = mvcr_layer_forward(tape, pool, cfg, tape.constant(x), CounterRng(5), step, Mode::train, &trace);
    ASSERT_EQ(values(y), x.data);
    for (const auto& g : trace.gates) EXPECT_EQ(g.branch, kNoSub);
  }
}

TEST(LayerForward, GatedRowsMatchTheirMemberAndOthersPassThrough) {
  auto cfg = small_cfg({2, 4, 6});
  auto pool = make_pool(cfg, 8, 6);
  Stream rng(6, {1});
  const auto x = random_tensor({3, 4, 8}, rng);
  Tape<D> tape;
  AugmentationTrace trace;
  auto y = values(mvcr_layer_forward(tape, pool, cfg, tape.constant(x), CounterRng(6), 11, Mode::train, &trace));
  ASSERT_EQ(trace.gates.size(), 12u);

  std::size_t applied = 0;
  for (std::size_t r = 0; r < 12; ++r) {
    const auto& g = trace.gates[r];
    EXPECT_EQ(g.token, static_cast<std::int64_t>(r));
    std::vector<D> row(x.data.begin() + r * 8, x.data.begin() + (r + 1) * 8);
    std::vector<D> got(y.begin() + r * 8, y.begin() + (r + 1) * 8);
    if (g.branch == kNoSub) {
      EXPECT_EQ(got, row) << "row " << r;
      continue;
    }
    ++applied;
    // The sub-AE draw for this row, recorded under the chosen member's slot.
    const GateDraw* sub = nullptr;
    for (const auto& s : trace.sub_gates)
      if (s.token == g.token) sub = &s;
    ASSERT_NE(sub, nullptr);
    const auto& hae = std::get<StochasticHae<D>>(pool.members[static_cast<std::size_t>(g.branch)]);
    Tape<D> t2;
    auto want = values(hae_forward(t2, hae, t2.constant({1, 8}, row), sub->branch));
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << "row " << r;
  }
  EXPECT_GT(applied, 0u);
  EXPECT_LT(applied, 12u);
  EXPECT_EQ(trace.sub_gates.size(), applied);
}

TEST(LayerForward, TraceLengthEqualsGatedPositions) {
  auto cfg = small_cfg();
  auto pool = make_pool(cfg, 8, 7);
  Stream rng(7, {1});
  const auto x = random_tensor({2, 6, 8}, rng);
  for (auto g : {Granularity::token, Granularity::layer}) {
    cfg.granularity = g;
    for (std::uint64_t step = 0; step < 20; ++step) {
      Tape<D> tape;
      AugmentationTrace trace;
      mvcr_layer_forward(tape, pool, cfg, tape.constant(x), CounterRng(7), step, Mode::train, &trace);
      EXPECT_EQ(trace.gates.size(), g == Granularity::token ? 12u : 1u);
    }
  }
}

TEST(LayerForward, ApplyRateIsOneHalf) {
  auto cfg = small_cfg();
  auto pool = make_pool(cfg, 8, 8);
  Stream rng(8, {1});
  const auto x = random_tensor({4, 50, 8}, rng);
  std::size_t applied = 0, total = 0;
  std::array<std::size_t, 3> members{};
  for (std::uint64_t step = 0; step < 500; ++step) {
    Tape<D> tape;
    AugmentationTrace trace;
    mvcr_layer_forward(tape, pool, cfg, tape.constant(x), CounterRng(8), step, Mode::train, &trace);
    for (const auto& g : trace.gates) {
      ++total;
      if (g.branch != kNoSub) {
        ++applied;
        ++members[static_cast<std::size_t>(g.branch)];
      }
    }
  }
  ASSERT_EQ(total, 100000u);
  EXPECT_NEAR(applied / double(total), 0.5, 0.01);
  EXPECT_GT(binomial_p_value(applied, total, 0.5), 1e-3);
  for (auto c : members) EXPECT_NEAR(c / double(applied), 1.0 / 3.0, 0.01);
  const double e = applied / 3.0;
  EXPECT_GT(chi_square_p_value({double(members[0]), double(members[1]), double(members[2])}, {e, e, e}, 2), 1e-3);
}

TEST(LayerForward, TokenDrawsAreIndependent) {
  auto cfg = small_cfg();
  auto pool = make_pool(cfg, 8, 9);
  CounterRng rng(9);
  // Joint distribution of (member or pass-through) for two tokens of one layer.
  std::vector<std::vector<double>> table(4, std::vector<double>(4, 0.0));
  auto cell = [](int branch) { return static_cast<std::size_t>(branch + 1); };
  const auto x = Tensor<D>({1, 2, 8}, 0.25);
  for (std::uint64_t step = 0; step < 100000; ++step) {
    Tape<D> tape;
    AugmentationTrace trace;
    mvcr_layer_forward(tape, pool, cfg, tape.constant(x), rng, step, Mode::train, &trace);
    table[cell(trace.gates[0].branch)][cell(trace.gates[1].branch)] += 1.0;
  }
  EXPECT_GT(independence_p_value(table), 0.01);
}

TEST(LayerForward, LayerGranularitySharesOneDecision) {
  auto cfg = small_cfg();
  cfg.granularity = Granularity::layer;
  auto pool = make_pool(cfg, 8, 10);
  Stream rng(10, {1});
  const auto x = random_tensor({2, 3, 8}, rng);
  std::size_t applied = 0;
  for (std::uint64_t step = 0; step < 40; ++step) {
    Tape<D> tape;
    AugmentationTrace trace;
    auto y = values(mvcr_layer_forward(tape, pool, cfg, tape.constant(x), CounterRng(10), step, Mode::train, &trace));
    ASSERT_EQ(trace.gates.size(), 1u);
    EXPECT_EQ(trace.gates[0].token, DrawSite::layer_level);
    if (trace.gates[0].branch == kNoSub) {
      EXPECT_EQ(y, x.data);
      continue;
    }
    ++applied;
    ASSERT_EQ(trace.sub_gates.size(), 1u);
    const auto& hae = std::get<StochasticHae<D>>(pool.members[static_cast<std::size_t>(trace.gates[0].branch)]);
    Tape<D> t2;
    auto want = values(hae_forward(t2, hae, t2.constant(x), trace.sub_gates[0].branch));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
  }
  EXPECT_GT(applied, 0u);
}

TEST(LayerForward, DeterministicInSeedAndStep) {
  auto cfg = small_cfg();
  auto pool = make_pool(cfg, 8, 11);
  Stream rng(11, {1});
  const auto x = random_tensor({2, 8, 8}, rng);
  auto run = [&](std::uint64_t seed, std::uint64_t step) {
    Tape<D> tape;
    return values(mvcr_layer_forward(tape, pool, cfg, tape.constant(x), CounterRng(seed), step, Mode::train));
  };
  EXPECT_EQ(run(1, 3), run(1, 3));
  EXPECT_NE(run(1, 3), run(1, 4));
  EXPECT_NE(run(1, 3), run(2, 3));
}

TEST(LayerForward, RejectsPoolOutsideInsertionLayers) {
  auto cfg = small_cfg();
  auto pool = make_pool(cfg, 8, 12);
  pool.layer = 2;
  Tape<D> tape;
  EXPECT_THROW(mvcr_layer_forward(tape, pool, cfg, tape.constant(Tensor<D>({1, 2, 8}, 0.0)), CounterRng(1), 0,
                                  Mode::train),
               std::out_of_range);
}

TEST(MvcrConfigTest, ValidationRejectsBadSettings) {
  auto cfg = small_cfg();
  cfg.layers = {0};
  EXPECT_THROW(cfg.validate(4, 8), std::out_of_range);
  cfg.layers = {5};
  EXPECT_THROW(cfg.validate(4, 8), std::out_of_range);
  cfg.layers = {1, 1};
  EXPECT_THROW(cfg.validate(4, 8), std::invalid_argument);
  cfg.layers = {1};
  cfg.pool_dims = {};
  EXPECT_THROW(cfg.validate(4, 8), std::invalid_argument);
  cfg.pool_dims = {8};
  EXPECT_THROW(cfg.validate(4, 8), std::invalid_argument);
  cfg.pool_dims = {4};
  cfg.layer_gate_prob = 1.5;
  EXPECT_THROW(cfg.validate(4, 8), std::invalid_argument);
  cfg.layer_gate_prob = 0.5;
  EXPECT_NO_THROW(cfg.validate(4, 8));
  cfg.enabled = false;
  cfg.layers = {9};
  EXPECT_NO_THROW(cfg.validate(4, 8));
}

// ---------------------------------------------------------------------------
// Reconstruction loss

TEST(ReconstructionLoss, IdentityPoolGivesZero) {
  Stream rng(13, {1});
  Tape<D> tape;
  auto h = tape.constant(random_tensor({2, 3, 4}, rng));
  std::vector<Var<D>> recon{h, h, h};
  EXPECT_EQ(reconstruction_loss<D>(h, recon).item(), 0.0);
}

TEST(ReconstructionLoss, IdentityAndZeroGiveHalfMeanSquare) {
  Stream rng(14, {1});
  const auto ht = random_tensor({2, 3, 4}, rng);
  Tape<D> tape;
  auto h = tape.constant(ht);
  std::vector<Var<D>> recon{h, tape.constant(Tensor<D>(ht.shape, 0.0))};
  double sq = 0.0;
  for (D v : ht.data) sq += v * v;
  EXPECT_NEAR(reconstruction_loss<D>(h, recon).item(), 0.5 * sq / ht.size(), 1e-15);
  EXPECT_THROW(reconstruction_loss<D>(h, {}), std::invalid_argument);
}

TEST(ReconstructionLoss, InvariantToTokenPermutation) {
  auto cfg = small_cfg({2, 3, 5});
  auto pool = make_pool(cfg, 6, 15);
  Stream rng(15, {1});
  const auto h = random_tensor({1, 7, 6}, rng);
  std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  Tensor<D> hp = h;
  for (std::size_t t = 0; t < 7; ++t)
    std::copy_n(h.data.begin() + perm[t] * 6, 6, hp.data.begin() + t * 6);
  auto loss = [&](const Tensor<D>& x) {
    Tape<D> tape;
    return pool_reconstruction_loss(tape, pool, cfg, tape.constant(x), {}, CounterRng(1), 0, false).loss.item();
  };
  EXPECT_NEAR(loss(h), loss(hp), 1e-14);
}

TEST(ReconstructionLoss, CoversEveryMemberEachStep) {
  auto cfg = small_cfg({2, 3, 5});
  cfg.layer_gate_prob = 0.0;
  auto pool = make_pool(cfg, 6, 16);
  Stream rng(16, {1});
  const auto h = random_tensor({2, 4, 6}, rng);
  Tape<D> tape;
  AugmentationTrace trace;
  auto x = tape.constant(h);
  mvcr_layer_forward(tape, pool, cfg, x, CounterRng(1), 0, Mode::train, &trace);
  auto r = pool_reconstruction_loss(tape, pool, cfg, x, {}, CounterRng(1), 0, false, &trace);
  ASSERT_EQ(r.per_member.size(), 3u);
  ASSERT_EQ(trace.recon.size(), 1u);
  EXPECT_EQ(trace.recon[0].per_member, r.per_member);
  double mean = 0.0;
  for (std::size_t m = 0; m < 3; ++m) {
    const auto& hae = std::get<StochasticHae<D>>(pool.members[m]);
    Tape<D> t2;
    auto in = t2.constant(Tensor<D>({8, 6}, h.data));
    const double want = mse(hae_forward(t2, hae, in, kNoSub), in).item();
    EXPECT_NEAR(r.per_member[m], want, 1e-14);
    mean += want / 3.0;
  }
  EXPECT_NEAR(r.loss.item(), mean, 1e-14);
}

TEST(ReconstructionLoss, PaddingIsExcluded) {
  auto cfg = small_cfg({2, 3});
  auto pool = make_pool(cfg, 6, 17);
  Stream rng(17, {1});
  const auto h = random_tensor({1, 5, 6}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 0};
  Tape<D> tape;
  const double masked = pool_reconstruction_loss(tape, pool, cfg, tape.constant(h), valid, CounterRng(1), 0, false)
                            .loss.item();
  Tensor<D> kept({1, 3, 6}, std::vector<D>(h.data.begin(), h.data.begin() + 18));
  const double direct = pool_reconstruction_loss(tape, pool, cfg, tape.constant(kept), {}, CounterRng(1), 0, false)
                            .loss.item();
  EXPECT_NEAR(masked, direct, 1e-14);
  EXPECT_THROW(pool_reconstruction_loss(tape, pool, cfg, tape.constant(h), std::vector<std::uint8_t>(5, 0),
                                        CounterRng(1), 0, false),
               std::invalid_argument);
}

TEST(ReconstructionLoss, GradientMatchesFiniteDifferences) {
  auto cfg = small_cfg({2, 4});
  cfg.recon_to_backbone = true;
  auto pool = make_pool(cfg, 6, 18);
  expect_gradients(
      [&](Tape<D>& t, Var<D> h) {
        return pool_reconstruction_loss(t, pool, cfg, h, {}, CounterRng(18), 2, true).loss;
      },
      {2, 3, 6}, 18);
}

TEST(ReconstructionLoss, StopsGradientAtTheBackbone) {
  auto cfg = small_cfg({2, 4});
  auto pool = make_pool(cfg, 6, 19);
  Stream rng(19, {1});
  Tensor<D> w = Tensor<D>::uniform({6, 6}, -1, 1, rng, true);
  const auto x = random_tensor({4, 6}, rng);
  auto grad_norm = [&](bool through) {
    auto c = cfg;
    c.recon_to_backbone = through;
    Tape<D> tape;
    auto h = matmul(tape.constant(x), tape.param(w));
    auto loss = pool_reconstruction_loss(tape, pool, c, h, {}, CounterRng(1), 0, true).loss;
    tape.backward(loss);
    double s = 0.0;
    for (D g : tape.grad(w)) s += std::abs(g);
    return s;
  };
  EXPECT_EQ(grad_norm(false), 0.0);
  EXPECT_GT(grad_norm(true), 0.0);
}

// ---------------------------------------------------------------------------
// Encoder integration and plug-out

TEST(Locality, LayersOutsideInsertionSetMatchVanilla) {
  auto enc = tiny_encoder();
  MvcrConfig cfg = small_cfg({4, 6}, 2);
  cfg.layer_gate_prob = 1.0;
  const auto model = EncoderModel<D>::init(enc, cfg, 20);
  const auto vanilla = plug_out(model);
  const auto batch = tiny_batch();
  for (auto mode : {Mode::train, Mode::eval}) {
    ForwardContext ctx;
    ctx.mode = mode;
    ctx.rng = CounterRng(20);
    ctx.step = 3;
    Tape<D> ta, tb;
    auto a = encode(ta, model, batch, ctx);
    auto b = encode(tb, vanilla, batch, ctx);
    // Block outputs up to and including the insertion layer are computed before any augmentation.
    EXPECT_EQ(values(a.layers[0]), values(b.layers[0]));
    EXPECT_EQ(values(a.layers[1]), values(b.layers[1]));
    if (mode == Mode::eval) {
      EXPECT_EQ(values(a.layers[2]), values(b.layers[2]));
      EXPECT_EQ(values(a.output), values(b.output));
    } else {
      EXPECT_NE(values(a.layers[2]), values(b.layers[2]));
    }
  }
}

TEST(PlugOut, ParameterCountEqualsVanilla) {
  auto enc = tiny_encoder();
  const auto model = EncoderModel<D>::init(enc, small_cfg({4, 6}, 2), 21);
  MvcrConfig off = small_cfg({4, 6}, 2);
  off.enabled = false;
  const auto vanilla = EncoderModel<D>::init(enc, off, 21);
  const auto counts = plug_out(model).parameter_counts();
  EXPECT_GT(model.parameter_counts().at(Group::hae), 0u);
  EXPECT_EQ(counts.at(Group::hae), 0u);
  EXPECT_EQ(counts, vanilla.parameter_counts());
  std::size_t hae_named = 0;
  plug_out(model).visit([&](const std::string& name, const Tensor<D>&, Group) {
    if (name.rfind("mvcr.", 0) == 0) ++hae_named;
  });
  EXPECT_EQ(hae_named, 0u);
}

TEST(PlugOut, ForwardEqualsEvalModeBitwise) {
  auto enc = tiny_encoder();
  const auto model = EncoderModel<float>::init(enc, small_cfg({4, 6}, 1), 22);
  const auto plugged = plug_out(model);
  ForwardContext ctx;
  ctx.mode = Mode::eval;
  Tape<float> ta, tb;
  auto a = task_forward(ta, model, tiny_batch(), ctx);
  auto b = task_forward(tb, plugged, tiny_batch(), ctx);
  EXPECT_EQ(a.logits.to_vector(), b.logits.to_vector());
  EXPECT_EQ(a.loss.item(), b.loss.item());
}
