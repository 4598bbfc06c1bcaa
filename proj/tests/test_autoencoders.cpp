#include <gtest/gtest.h>

#include <cmath>

#include "mvcr/autoencoders.hpp"
#include "mvcr/train.hpp"
#include "support.hpp"

using namespace mvcr;
using testing_support::binomial_p_value;
using testing_support::expect_gradients;
using testing_support::naive_linear;
using testing_support::random_tensor;

namespace {

using D = double;

StochasticHae<D> make_hae(std::size_t d, std::size_t d_hat, std::size_t subs, std::uint64_t seed,
                          double skip = kDefaultSubSkipProb) {
  Stream rng(seed, {5});
  return StochasticHae<D>::init(AutoencoderSpec::hierarchical(d, d_hat, subs), rng, skip);
}

std::vector<NamedParam<D>> hae_params(StochasticHae<D>& hae) {
  std::vector<NamedParam<D>> out;
  hae.visit("hae", [&](const std::string& n, Tensor<D>& t) { out.push_back({n, &t, Group::hae}); });
  return out;
}

/// ||AE'(D(x)) - D(x)||² / ||D(x)||² for sub-AE 0, summed over rows.
double sub_path_discrepancy(const StochasticHae<D>& hae, const Tensor<D>& x) {
  Tape<D> tape;
  auto code = linear_forward(tape, hae.down, tape.constant(x));
  auto diff = sub(ae_forward(tape, hae.subs[0], code), code);
  return sum(multiply(diff, diff)).item() / sum(multiply(code, code)).item();
}

}  // namespace

// ---------------------------------------------------------------------------
// Plain AE

TEST(Autoencoder, ZeroWeightsGiveZeroOutput) {
  Autoencoder<D> ae{Linear<D>::zeros(6, 3), Linear<D>::zeros(3, 6)};
  Stream rng(1, {1});
  Tape<D> tape;
  auto y = ae_forward(tape, ae, tape.constant(random_tensor({4, 6}, rng, -5, 5)));
  for (D v : y.value()) EXPECT_EQ(v, 0.0);
}

TEST(Autoencoder, DigitCompressionDimsAccepted) {
  for (std::size_t d_hat : {49u, 98u, 392u}) {
    Stream rng(d_hat, {1});
    auto ae = Autoencoder<float>::init(784, d_hat, rng);
    EXPECT_EQ(ae.input_dim(), 784u);
    EXPECT_EQ(ae.compression_dim(), d_hat);
  }
}

TEST(Autoencoder, MatchesTwoMatmulOracle) {
  Stream rng(2, {1});
  auto ae = Autoencoder<D>::init(7, 3, rng);
  for (auto* b : {&ae.down.bias, &ae.up.bias})
    for (auto& v : b->data) v = rng.uniform(-1, 1);
  auto x = random_tensor({5, 7}, rng);
  Tape<D> tape;
  auto y = ae_forward(tape, ae, tape.constant(x));
  const auto want = naive_linear(naive_linear(x.data, ae.down.weight, ae.down.bias), ae.up.weight, ae.up.bias);
  testing_support::expect_near_all(y.value(), want, 1e-13);
}

TEST(Autoencoder, RejectsBadDims) {
  Stream rng(3, {1});
  EXPECT_THROW(Autoencoder<D>::init(8, 8, rng), std::invalid_argument);
  EXPECT_THROW(Autoencoder<D>::init(8, 0, rng), std::invalid_argument);
  auto ae = Autoencoder<D>::init(8, 4, rng);
  Tape<D> tape;
  EXPECT_THROW(ae_forward(tape, ae, tape.constant(Tensor<D>({2, 7}))), ShapeError);
}

// ---------------------------------------------------------------------------
// Hierarchical AE

TEST(Hae, SubDimsAreHalfTheCompressionDim) {
  const auto spec = AutoencoderSpec::hierarchical(768, 256, 3);
  ASSERT_EQ(spec.sub_dims.size(), 3u);
  for (auto s : spec.sub_dims) EXPECT_EQ(s, 128u);
  auto hae = make_hae(64, 16, 2, 1);
  for (const auto& sub : hae.subs) {
    EXPECT_EQ(sub.input_dim(), 16u);
    EXPECT_EQ(sub.compression_dim(), 8u);
  }
}

TEST(Hae, SpecRejectsNonShrinkingDims) {
  EXPECT_THROW((AutoencoderSpec{8, 8, {}}.validate()), std::invalid_argument);
  EXPECT_THROW((AutoencoderSpec{8, 4, {4}}.validate()), std::invalid_argument);
  EXPECT_THROW((AutoencoderSpec{8, 4, {0}}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((AutoencoderSpec{8, 4, {2, 3}}.validate()));
}

TEST(Hae, SkipBranchEqualsPlainAeBitwise) {
  auto hae = make_hae(12, 6, 2, 2);
  Autoencoder<D> ae{hae.down, hae.up};
  Stream rng(2, {2});
  auto x = random_tensor({3, 4, 12}, rng);
  Tape<D> tape;
  auto a = hae_forward(tape, hae, tape.constant(x), kNoSub).to_vector();
  auto b = ae_forward(tape, ae, tape.constant(x)).to_vector();
  EXPECT_EQ(a, b);
}

TEST(Hae, SubBranchMatchesFourMatmulOracle) {
  auto hae = make_hae(10, 6, 2, 3);
  Stream rng(3, {2});
  auto x = random_tensor({4, 10}, rng);
  Tape<D> tape;
  auto y = hae_forward(tape, hae, tape.constant(x), 1);
  const auto& s = hae.subs[1];
  const auto code = naive_linear(x.data, hae.down.weight, hae.down.bias);
  const auto inner = naive_linear(naive_linear(code, s.down.weight, s.down.bias), s.up.weight, s.up.bias);
  testing_support::expect_near_all(y.value(), naive_linear(inner, hae.up.weight, hae.up.bias), 1e-13);
}

TEST(Hae, RejectsBadSubIndex) {
  auto hae = make_hae(8, 4, 2, 4);
  Tape<D> tape;
  auto x = tape.constant(Tensor<D>({1, 8}));
  EXPECT_THROW(hae_forward(tape, hae, x, 2), std::out_of_range);
  EXPECT_THROW(hae_forward(tape, hae, x, -2), std::out_of_range);
  EXPECT_THROW(hae_forward(tape, hae, tape.constant(Tensor<D>({1, 9})), kNoSub), ShapeError);
}

TEST(Hae, EveryBranchPreservesShape) {
  auto hae = make_hae(8, 4, 3, 5);
  Stream rng(5, {2});
  auto x = random_tensor({2, 3, 8}, rng);
  for (int branch : {kNoSub, 0, 1, 2}) {
    Tape<D> tape;
    EXPECT_EQ(hae_forward(tape, hae, tape.constant(x), branch).shape(), x.shape) << "branch " << branch;
  }
}

TEST(Hae, RoutedForwardMatchesPerRowRoutes) {
  auto hae = make_hae(8, 4, 2, 6);
  Stream rng(6, {2});
  auto x = random_tensor({2, 3, 8}, rng);
  const std::vector<int> routes{kNoSub, 0, 1, 1, kNoSub, 0};
  Tape<D> tape;
  const auto y = hae_forward_routed(tape, hae, tape.constant(x), routes).to_vector();
  for (std::size_t r = 0; r < routes.size(); ++r) {
    Tensor<D> row({1, 8}, std::vector<D>(x.data.begin() + r * 8, x.data.begin() + (r + 1) * 8));
    Tape<D> t2;
    const auto want = hae_forward(t2, hae, t2.constant(row), routes[r]).to_vector();
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y[r * 8 + j], want[j], 1e-14) << "row " << r;
  }
}

TEST(Hae, ReconstructionLossGradientsMatchFiniteDifferences) {
  auto hae = make_hae(6, 4, 1, 7);
  for (int branch : {kNoSub, 0})
    expect_gradients([&](Tape<D>& t, Var<D> x) { return mse(hae_forward(t, hae, x, branch), x); }, {3, 6}, 7 + branch);
}

TEST(Hae, ParameterGradientMatchesFiniteDifferences) {
  auto hae = make_hae(6, 4, 1, 8);
  Stream rng(8, {2});
  const auto x = random_tensor({3, 6}, rng);
  // Gradient with respect to the sub-AE's down weight, through the full route.
  const Tensor<D> w0 = hae.subs[0].down.weight;
  expect_gradients(
      [&](Tape<D>& t, Var<D> w) {
        auto in = t.constant(x);
        auto code = linear_forward(t, hae.down, in);
        auto inner = linear_forward(t, hae.subs[0].up, affine(code, w, t.param(hae.subs[0].down.bias)));
        return mse(linear_forward(t, hae.up, inner), in);
      },
      w0.shape, 8, 5);
}

// ---------------------------------------------------------------------------
// Stochastic gate

TEST(StochasticHae, FullSkipProbabilityAlwaysTakesPlainPath) {
  auto hae = make_hae(8, 4, 2, 9, 1.0);
  CounterRng rng(9);
  for (std::int64_t t = 0; t < 2000; ++t) EXPECT_EQ(draw_sub_route(hae, rng, {1, 1, t}).branch, kNoSub);
}

TEST(StochasticHae, SkipRateMatchesDefault) {
  auto hae = make_hae(8, 4, 2, 10);
  CounterRng rng(10);
  const std::size_t n = 100000;
  std::size_t skipped = 0;
  for (std::size_t t = 0; t < n; ++t) skipped += draw_sub_route(hae, rng, {t / 100, 1, std::int64_t(t % 100)}).branch == kNoSub;
  const double rate = double(skipped) / n;
  RecordProperty("skip_rate", std::to_string(rate));
  EXPECT_NEAR(rate, 0.30, 0.01);
  EXPECT_GT(binomial_p_value(skipped, n, 0.3), 1e-3);
}

TEST(StochasticHae, SubChoiceIsUniform) {
  auto hae = make_hae(8, 4, 2, 11, 0.0);
  CounterRng rng(11);
  const std::size_t n = 100000;
  std::size_t first = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto d = draw_sub_route(hae, rng, {t, 2, 0});
    ASSERT_NE(d.branch, kNoSub);
    first += d.branch == 0;
  }
  EXPECT_NEAR(double(first) / n, 0.5, 0.02);
  EXPECT_GT(binomial_p_value(first, n, 0.5), 1e-3);
}

TEST(StochasticHae, DrawIsAPureFunctionOfSite) {
  auto hae = make_hae(8, 4, 3, 12);
  const DrawSite site{17, 2, 5};
  const auto a = draw_sub_route(hae, CounterRng(12), site);
  const auto b = draw_sub_route(hae, CounterRng(12), site);
  EXPECT_EQ(a.z, b.z);
  EXPECT_EQ(a.branch, b.branch);
  EXPECT_EQ(a.step, 17u);
  EXPECT_EQ(a.layer, 2);
  EXPECT_EQ(a.token, 5);
  EXPECT_NE(a.z, draw_sub_route(hae, CounterRng(12), {17, 2, 6}).z);
  EXPECT_NE(a.z, draw_sub_route(hae, CounterRng(13), site).z);
}

TEST(StochasticHae, ForwardFollowsRecordedBranch) {
  auto hae = make_hae(8, 4, 2, 13);
  Stream rng(13, {2});
  auto x = random_tensor({2, 8}, rng);
  for (std::uint64_t step = 0; step < 20; ++step) {
    Tape<D> tape;
    auto [y, draw] = stochastic_hae_forward(tape, hae, tape.constant(x), CounterRng(13), {step, 1, 0});
    Tape<D> t2;
    EXPECT_EQ(y.to_vector(), hae_forward(t2, hae, t2.constant(x), draw.branch).to_vector());
    EXPECT_EQ(draw.branch == kNoSub, draw.z < hae.sub_skip_prob);
  }
}

/// Training only on ||x - HAE(x)|| with random routes pulls the sub path
/// AE'(D(x)) toward D(x) without an explicit term for it. In code space the
/// relative gap falls and then levels off (U can ignore some code directions);
/// seen through U it vanishes.
TEST(StochasticHae, ImplicitlyReconstructsInnerCode) {
  const std::size_t d = 16, n = 64;
  auto hae = make_hae(d, 8, 1, 14);
  // Rank-3 inputs, so a 4-dim sub code can represent them exactly.
  Stream rng(14, {2});
  auto basis = random_tensor({3, d}, rng);
  Tensor<D> x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const D c[3] = {rng.normal(), rng.normal(), rng.normal()};
    for (std::size_t j = 0; j < d; ++j)
      x.data[i * d + j] = c[0] * basis.data[j] + c[1] * basis.data[d + j] + c[2] * basis.data[2 * d + j];
  }
  auto params = hae_params(hae);
  Adam<D> adam(1e-3);
  CounterRng gates(14);
  std::vector<double> discrepancy{sub_path_discrepancy(hae, x)};
  for (std::uint64_t step = 0; step < 6000; ++step) {
    Tape<D> tape;
    auto in = tape.constant(x);
    auto [out, draw] = stochastic_hae_forward(tape, hae, in, gates, {step, 1, DrawSite::layer_level});
    auto l = mse(out, in);
    tape.backward(l);
    std::vector<std::vector<D>> grads;
    for (auto& p : params) {
      auto g = tape.grad(*p.tensor);
      if (g.empty())
        grads.emplace_back(p.tensor->size(), 0.0);
      else
        grads.emplace_back(g.begin(), g.end());
    }
    adam.step(params, grads);
    if ((step + 1) % 600 == 0) discrepancy.push_back(sub_path_discrepancy(hae, x));
  }
  Tape<D> tape;
  auto in = tape.constant(x);
  const double loss = std::max(mse(hae_forward(tape, hae, in, kNoSub), in).item(), mse(hae_forward(tape, hae, in, 0), in).item());
  auto code = linear_forward(tape, hae.down, in);
  const double visible =
      mse(linear_forward(tape, hae.up, ae_forward(tape, hae.subs[0], code)), linear_forward(tape, hae.up, code)).item();

  std::string trace;
  for (double v : discrepancy) trace += std::to_string(v) + " ";
  RecordProperty("relative_discrepancy_trace", trace);
  RecordProperty("visible_discrepancy", std::to_string(visible));
  RecordProperty("final_recon_loss", std::to_string(loss));
  EXPECT_LT(loss, 1e-3);
  for (std::size_t i = 1; i < discrepancy.size(); ++i)
    EXPECT_LE(discrepancy[i], discrepancy[i - 1] * 1.10) << "checkpoint " << i << ": " << trace;
  EXPECT_LT(discrepancy.back(), 0.5 * discrepancy.front()) << trace;
  EXPECT_LT(visible, 1e-3);
}

// ---------------------------------------------------------------------------
// VAE

TEST(Vae, KlIsZeroForStandardNormal) {
  Tape<D> tape;
  auto zero = tape.constant(Tensor<D>({3, 4}));
  EXPECT_EQ(gaussian_kl(zero, zero).item(), 0.0);
}

TEST(Vae, KlMatchesClosedForm) {
  Tape<D> tape;
  EXPECT_NEAR(gaussian_kl(tape.constant({1, 1}, {1.0}), tape.constant({1, 1}, {0.0})).item(), 0.5, 1e-15);
  // 1/2 (mu^2 + s^2 - 1 - ln s^2) with mu = -0.5, ln s^2 = 0.7.
  const double want = 0.5 * (0.25 + std::exp(0.7) - 1 - 0.7);
  EXPECT_NEAR(gaussian_kl(tape.constant({1, 1}, {-0.5}), tape.constant({1, 1}, {0.7})).item(), want, 1e-15);
}

TEST(Vae, EvalModeDecodesTheMean) {
  Stream rng(15, {3});
  auto vae = Vae<D>::init(8, 3, rng);
  auto x = random_tensor({4, 8}, rng);
  Tape<D> tape;
  auto a = vae_forward(tape, vae, tape.constant(x), CounterRng(1), {0, 1, 0}, false).output.to_vector();
  auto b = vae_forward(tape, vae, tape.constant(x), CounterRng(2), {5, 1, 0}, false).output.to_vector();
  EXPECT_EQ(a, b);
  const auto stats = naive_linear(x.data, vae.encoder.weight, vae.encoder.bias);
  std::vector<D> mu;
  for (std::size_t r = 0; r < 4; ++r) mu.insert(mu.end(), stats.begin() + r * 6, stats.begin() + r * 6 + 3);
  testing_support::expect_near_all(std::span<const D>(a), naive_linear(mu, vae.decoder.weight, vae.decoder.bias), 1e-13);
}

TEST(Vae, TrainingSamplesDependOnSite) {
  Stream rng(16, {3});
  auto vae = Vae<D>::init(8, 3, rng);
  auto x = random_tensor({2, 8}, rng);
  Tape<D> tape;
  auto a = vae_forward(tape, vae, tape.constant(x), CounterRng(1), {0, 1, 0}, true).output.to_vector();
  auto b = vae_forward(tape, vae, tape.constant(x), CounterRng(1), {0, 1, 0}, true).output.to_vector();
  auto c = vae_forward(tape, vae, tape.constant(x), CounterRng(1), {1, 1, 0}, true).output.to_vector();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Vae, RejectsNonFiniteLogVariance) {
  Stream rng(17, {3});
  auto vae = Vae<D>::init(4, 2, rng);
  vae.encoder.bias.data[3] = std::numeric_limits<D>::infinity();
  Tape<D> tape;
  EXPECT_THROW(vae_forward(tape, vae, tape.constant(Tensor<D>({1, 4})), CounterRng(1), {}, true), std::domain_error);
}

TEST(Vae, GradientsWithFrozenNoiseMatchFiniteDifferences) {
  Stream rng(18, {3});
  auto vae = Vae<D>::init(5, 2, rng);
  expect_gradients(
      [&](Tape<D>& t, Var<D> x) {
        auto out = vae_forward(t, vae, x, CounterRng(18), {3, 1, 0}, true);
        return add(mse(out.output, x), scale(out.kl, 0.1));
      },
      {3, 5}, 18);
}
