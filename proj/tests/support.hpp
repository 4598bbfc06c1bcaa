#pragma once

#include <gtest/gtest.h>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <vector>

#include "mvcr/gradcheck.hpp"
#include "mvcr/rng.hpp"
#include "mvcr/tensor.hpp"

namespace testing_support {

using mvcr::Shape;
using mvcr::Stream;
using mvcr::Tensor;

template <class T = double>
Tensor<T> random_tensor(Shape s, Stream& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<T>::uniform(std::move(s), lo, hi, rng, false);
}

/// Plain triple loop, C[m,n] = A[m,k]·B[k,n].
template <class T>
std::vector<T> naive_matmul(const std::vector<T>& a, const std::vector<T>& b, std::size_t m, std::size_t k,
                            std::size_t n) {
  std::vector<T> c(m * n, T{0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

/// y = x·Wᵀ + b row by row.
template <class T>
std::vector<T> naive_linear(const std::vector<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t out = w.shape[0], in = w.shape[1], rows = x.size() / in;
  std::vector<T> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      T s = b.data[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w.data[o * in + i];
      y[r * out + o] = s;
    }
  return y;
}

template <class T>
void expect_near_all(std::span<const T> got, const std::vector<T>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

/// Runs check_gradients at `points` random points and fails on the worst one.
inline void expect_gradients(const mvcr::ScalarFn<double>& fn, const Shape& shape, std::uint64_t seed, int points = 20,
                             double tol = 1e-5, double lo = -1.0, double hi = 1.0) {
  Stream rng(seed, {0x67726164});
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    auto point = random_tensor(shape, rng, lo, hi);
    auto report = mvcr::check_gradients<double>(fn, point, 1e-5);
    ASSERT_TRUE(report.finite) << report.message;
    worst = std::max(worst, report.max_rel_error);
    ASSERT_LT(report.max_rel_error, tol) << "point " << p << " index " << report.worst_index << " analytic "
                                         << report.analytic_at_worst << " numeric " << report.numeric_at_worst;
  }
  ::testing::Test::RecordProperty("worst_rel_error", std::to_string(worst));
}

/// Two-sided exact binomial p-value for k successes in n trials.
inline double binomial_p_value(std::size_t k, std::size_t n, double p) {
  boost::math::binomial_distribution<> d(static_cast<double>(n), p);
  const double lower = boost::math::cdf(d, static_cast<double>(k));
  const double upper = k == 0 ? 1.0 : boost::math::cdf(boost::math::complement(d, static_cast<double>(k - 1)));
  return std::min(1.0, 2.0 * std::min(lower, upper));
}

/// Pearson chi-square goodness-of-fit p-value.
inline double chi_square_p_value(const std::vector<double>& observed, const std::vector<double>& expected,
                                 std::size_t dof) {
  double stat = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i)
    stat += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(dof)), stat));
}

/// Chi-square test of independence on an r x c contingency table.
inline double independence_p_value(const std::vector<std::vector<double>>& table) {
  const std::size_t r = table.size(), c = table[0].size();
  std::vector<double> rows(r, 0.0), cols(c, 0.0), obs, exp;
  double n = 0.0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      rows[i] += table[i][j];
      cols[j] += table[i][j];
      n += table[i][j];
    }
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      obs.push_back(table[i][j]);
      exp.push_back(rows[i] * cols[j] / n);
    }
  return chi_square_p_value(obs, exp, (r - 1) * (c - 1));
}

}  // namespace testing_support
