#include <gtest/gtest.h>

#include <cmath>

#include "kanmix/kan_linear.hpp"
#include "kanmix/rng.hpp"
#include "oracles.hpp"

namespace kanmix {
namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

TEST(Silu, BasicValues) {
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_NEAR(silu(100.0), 100.0, 1e-9);
  EXPECT_NEAR(silu(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(Silu, OverflowSafe) {
  for (double x : {-1000.0, -710.0, 710.0, 1000.0}) {
    EXPECT_TRUE(std::isfinite(silu(x)));
    EXPECT_TRUE(std::isfinite(silu_derivative(x)));
  }
  EXPECT_DOUBLE_EQ(silu(1000.0), 1000.0);
  EXPECT_NEAR(silu(-1000.0), 0.0, 1e-300);
  EXPECT_TRUE(std::isfinite(silu(-200.0f)));
}

TEST(Silu, DerivativeMatchesFiniteDifferences) {
  Rng rng(1);
  for (int s = 0; s < 100; ++s) {
    const double x = rng.uniform(-5.0, 5.0);
    const double fd = oracle::central_difference([](double u) { return oracle::silu(u); }, x, 1e-5);
    EXPECT_NEAR(silu_derivative(x), fd, 1e-7) << "x=" << x;
  }
}

TEST(KanInit, DeterministicForSeed) {
  const auto a = KanLinear<double>::init(5, 3, SplineGrid<double>(), 42);
  const auto b = KanLinear<double>::init(5, 3, SplineGrid<double>(), 42);
  const auto c = KanLinear<double>::init(5, 3, SplineGrid<double>(), 43);
  EXPECT_EQ(a.weight(), b.weight());
  EXPECT_EQ(a.coeffs(), b.coeffs());
  EXPECT_NE(a.weight(), c.weight());
}

TEST(KanInit, WeightBound) {
  const auto layer = KanLinear<double>::init(4, 64, SplineGrid<double>(), 7);
  for (double w : layer.weight().data()) EXPECT_LE(std::abs(w), 0.5);
}

TEST(KanInit, CoefficientSpread) {
  // 4 inputs * 3125 outputs * 8 bases = 100000 draws.
  const auto layer = KanLinear<double>::init(4, 3125, SplineGrid<double>(), 9);
  const auto c = layer.coeffs().data();
  ASSERT_EQ(c.size(), 100000u);
  double mean = 0, sq = 0;
  for (double v : c) mean += v;
  mean /= static_cast<double>(c.size());
  for (double v : c) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(c.size()));
  EXPECT_NEAR(sd, 0.05, 0.05 * 0.05);
}

TEST(KanInit, RejectsZeroDims) {
  EXPECT_THROW(KanLinear<double>::init(0, 3, SplineGrid<double>(), 1), InvalidDim);
  EXPECT_THROW(KanLinear<double>::init(3, 0, SplineGrid<double>(), 1), InvalidDim);
}

TEST(KanForward, ZeroSplineUnitWeightSumsSilu) {
  KanLinear<double> layer(3, 2, SplineGrid<double>());
  for (auto& w : layer.weight().data()) w = 1.0;
  const Tensor<double> x(Shape{1, 3}, {0.3, -0.7, 1.5});
  const auto y = layer.forward(x);
  const double expected = oracle::silu(0.3) + oracle::silu(-0.7) + oracle::silu(1.5);
  EXPECT_NEAR(y[0], expected, 1e-15);
  EXPECT_NEAR(y[1], expected, 1e-15);
}

TEST(KanForward, ZeroInputZeroSplineGivesZero) {
  auto layer = KanLinear<double>::init(4, 3, SplineGrid<double>(), 2);
  for (auto& c : layer.coeffs().data()) c = 0.0;
  const auto y = layer.forward(Tensor<double>(Shape{2, 4}, 0.0));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(KanForward, MatchesTripleLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto layer_seed = static_cast<std::uint64_t>(100 + trial);
    auto layer = KanLinear<double>::init(3, 2, make_grid<double>(2, 3, -1.0, 1.0), layer_seed);
    for (auto& c : layer.coeffs().data()) c = rng.uniform(-1.0, 1.0);
    const auto x = random_tensor({1, 3}, rng, -1.3, 1.3);
    const auto y = layer.forward(x);
    const auto ref = oracle::kan_layer(layer.weight().storage(), layer.coeffs().storage(), 3, 2, 2,
                                       3, -1.0, 1.0, x.storage());
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(y[j], ref[j], 1e-12);
  }
}

TEST(KanForward, RejectsWrongWidth) {
  KanLinear<double> layer(3, 2, SplineGrid<double>());
  EXPECT_THROW(layer.forward(Tensor<double>(Shape{2, 4})), ShapeMismatch);
}

TEST(KanForward, LinearInWeightAtZeroSpline) {
  Rng rng(4);
  auto layer = KanLinear<double>::init(5, 4, SplineGrid<double>(), 5);
  for (auto& c : layer.coeffs().data()) c = 0.0;
  const auto x = random_tensor({3, 5}, rng);
  const auto y1 = layer.forward(x);
  const double alpha = 2.75;
  for (auto& w : layer.weight().data()) w *= alpha;
  const auto y2 = layer.forward(x);
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y2[i], alpha * y1[i], 1e-12);
}

TEST(KanForward, BatchRowsAreIndependent) {
  Rng rng(6);
  auto layer = KanLinear<double>::init(19, 7, SplineGrid<double>(), 6);
  const auto x = random_tensor({5, 19}, rng, -2.0, 2.0);
  const auto stacked = layer.forward(x);
  for (std::size_t r = 0; r < 5; ++r) {
    Tensor<double> row(Shape{1, 19});
    for (std::size_t i = 0; i < 19; ++i) row[i] = x[r * 19 + i];
    const auto y = layer.forward(row);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(y[j], stacked[r * 7 + j]);
  }
}

TEST(KanBackward, RequiresForward) {
  KanLinear<double> layer(3, 2, SplineGrid<double>());
  EXPECT_THROW(layer.backward(Tensor<double>(Shape{1, 2})), StaleCache);
}

TEST(KanBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(7);
  auto layer = KanLinear<double>::init(3, 2, SplineGrid<double>(), 8);
  layer.forward(random_tensor({4, 3}, rng));
  const auto dx = layer.backward(Tensor<double>(Shape{4, 2}, 0.0));
  for (double v : dx.data()) EXPECT_EQ(v, 0.0);
  for (double v : layer.weight().grad()) EXPECT_EQ(v, 0.0);
  for (double v : layer.coeffs().grad()) EXPECT_EQ(v, 0.0);
}

TEST(KanBackward, AccumulatesAcrossCalls) {
  Rng rng(8);
  auto layer = KanLinear<double>::init(3, 2, SplineGrid<double>(), 9);
  layer.forward(random_tensor({4, 3}, rng));
  const auto dy = random_tensor({4, 2}, rng);
  layer.backward(dy);
  const std::vector<double> w1(layer.weight().grad().begin(), layer.weight().grad().end());
  const std::vector<double> c1(layer.coeffs().grad().begin(), layer.coeffs().grad().end());
  layer.backward(dy);
  for (std::size_t i = 0; i < w1.size(); ++i) EXPECT_EQ(layer.weight().grad()[i], 2 * w1[i]);
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_EQ(layer.coeffs().grad()[i], 2 * c1[i]);
}

// loss = sum(upstream * forward(x)); compares all three gradient groups to
// central differences.
void check_gradients(KanLinear<double>& layer, Tensor<double> x, const Tensor<double>& upstream) {
  auto loss = [&]() {
    const auto y = layer.forward(x);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += upstream[i] * y[i];
    return s;
  };
  layer.zero_grad();
  layer.forward(x);
  const auto dx = layer.backward(upstream);
  const std::vector<double> wg(layer.weight().grad().begin(), layer.weight().grad().end());
  const std::vector<double> cg(layer.coeffs().grad().begin(), layer.coeffs().grad().end());
  auto fd = [&](double& slot) {
    const double orig = slot;
    const double g = oracle::central_difference(
        [&](double v) {
          slot = v;
          return loss();
        },
        orig, 1e-4);
    slot = orig;
    return g;
  };
  for (std::size_t i = 0; i < wg.size(); ++i)
    EXPECT_LT(oracle::rel_error(wg[i], fd(layer.weight()[i]), 1e-6), 1e-3) << "w" << i;
  for (std::size_t i = 0; i < cg.size(); ++i)
    EXPECT_LT(oracle::rel_error(cg[i], fd(layer.coeffs()[i]), 1e-6), 1e-3) << "c" << i;
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_LT(oracle::rel_error(dx[i], fd(x[i]), 1e-6), 1e-3) << "x" << i;
}

TEST(KanBackward, MatchesFiniteDifferencesDefaultGrid) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto layer = KanLinear<double>::init(3, 2, SplineGrid<double>(), 20 + trial);
    for (auto& c : layer.coeffs().data()) c = rng.uniform(-1.0, 1.0);
    check_gradients(layer, random_tensor({4, 3}, rng, -1.5, 1.5), random_tensor({4, 2}, rng));
  }
}

TEST(KanBackward, MatchesFiniteDifferencesDegenerateGrid) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto layer = KanLinear<double>::init(3, 2, make_grid<double>(1, 1, -1.0, 1.0), 30 + trial);
    for (auto& c : layer.coeffs().data()) c = rng.uniform(-1.0, 1.0);
    check_gradients(layer, random_tensor({4, 3}, rng, -0.99, 0.99), random_tensor({4, 2}, rng));
  }
}

TEST(KanForward, FloatAgreesWithDouble) {
  Rng rng(12);
  auto d = KanLinear<double>::init(6, 4, SplineGrid<double>(), 3);
  auto f = KanLinear<float>::init(6, 4, SplineGrid<float>(), 3);
  const auto x = random_tensor({2, 6}, rng);
  Tensor<float> xf(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) xf[i] = static_cast<float>(x[i]);
  const auto yd = d.forward(x);
  const auto yf = f.forward(xf);
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-5);
}

}  // namespace
}  // namespace kanmix
