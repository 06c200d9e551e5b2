#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "dimgrow/shufflegate.hpp"
#include "test_support.hpp"

using namespace dimgrow;
using dimgrow::testing::random_tensor;
using dimgrow::testing::random_vector;

namespace {

GateBank bank_with(std::vector<double> theta, double temperature = 5.0) {
  GateBank b;
  b.temperature = temperature;
  Tensor2 t(1, theta.size());
  t.values = std::move(theta);
  b.theta.emplace_back(std::move(t));
  return b;
}

int perm_code(const std::vector<std::size_t>& p) { return static_cast<int>(p[0] * 9 + p[1] * 3 + p[2]); }

}  // namespace

TEST(Shuffle, PreservesEveryColumnMultiset) {
  Rng data = Rng::stream(1, "test"), rng = Rng::stream(1, "shuffle");
  for (int it = 0; it < 1000; ++it) {
    const std::size_t rows = 1 + data.below(12), cols = 1 + data.below(5);
    Tensor2 s = random_tensor(rows, cols, data);
    // repeated values exercise ties in the multiset comparison
    if (rows > 2) s(1, 0) = s(0, 0);
    const Tensor2 out = shuffle_columns(s, rng);
    for (std::size_t c = 0; c < cols; ++c) {
      std::vector<double> a, b;
      for (std::size_t r = 0; r < rows; ++r) {
        a.push_back(s(r, c));
        b.push_back(out(r, c));
      }
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      ASSERT_EQ(a, b);
    }
  }
}

TEST(Shuffle, SingleRowIsIdentity) {
  Rng rng = Rng::stream(2, "shuffle");
  Tensor2 s(1, 4);
  s.values = {1, 2, 3, 4};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(shuffle_columns(s, rng).values, s.values);
}

TEST(Shuffle, ThreeRowPermutationsAreUniform) {
  Rng rng = Rng::stream(3, "shuffle");
  std::map<int, int> counts;
  const int draws = 6000;
  for (int i = 0; i < draws; ++i) counts[perm_code(draw_column_permutations(3, 1, rng)[0])] += 1;
  ASSERT_EQ(counts.size(), 6u);
  for (const auto& [code, n] : counts) EXPECT_NEAR(static_cast<double>(n) / draws, 1.0 / 6.0, 0.02) << code;
}

TEST(Shuffle, ColumnsArePermutedIndependently) {
  Rng rng = Rng::stream(4, "shuffle");
  std::map<std::pair<int, int>, int> counts;
  const int draws = 36000;
  for (int i = 0; i < draws; ++i) {
    const auto p = draw_column_permutations(3, 2, rng);
    counts[{perm_code(p[0]), perm_code(p[1])}] += 1;
  }
  ASSERT_EQ(counts.size(), 36u);
  double chi2 = 0.0;
  const double expected = draws / 36.0;
  for (const auto& [k, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
  // 35 degrees of freedom; 0.999 quantile is about 66.6
  EXPECT_LT(chi2, 66.6);
}

TEST(Gates, ValuesFollowTemperedSigmoid) {
  const GateBank b = bank_with({0.0, 0.2, 50.0, -50.0});
  const auto g = gate_values(b, 0);
  EXPECT_EQ(g[0], 0.5);
  EXPECT_NEAR(g[1], 0.7310585786300049, 1e-15);
  EXPECT_NEAR(g[2], 1.0, 1e-15);
  EXPECT_NEAR(g[3], 0.0, 1e-15);
  double prev = 0.0;
  for (double th = -2.0; th <= 2.0; th += 0.25) {
    const double v = gate_values(bank_with({th}), 0)[0];
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Gates, GateNodeRejectsTooManyDims) {
  GateBank b = bank_with({0.0, 0.0});
  Graph g;
  EXPECT_THROW(gate_node(g, b, 0, 3), ConfigError);
}

TEST(Gates, SaturatedOpenGateReturnsOriginal) {
  GateBank b = bank_with({500.0, 500.0});
  Rng data = Rng::stream(5, "test"), rng = Rng::stream(5, "shuffle");
  Tensor2 e = random_tensor(6, 2, data);
  Graph g;
  EXPECT_EQ(g.value(apply_gate(g, g.constant(e), b, 0, rng)).values, e.values);
}

TEST(Gates, ConstantColumnIsUnchangedAtHalfGate) {
  GateBank b = bank_with({0.0});
  Rng rng = Rng::stream(6, "shuffle");
  Tensor2 e(5, 1, 2.5);
  Graph g;
  EXPECT_EQ(g.value(apply_gate(g, g.constant(e), b, 0, rng)).values, e.values);
}

TEST(Gates, ClosedGateSendsExactlyZeroGradientToEmbeddings) {
  GateBank b = bank_with({-500.0, -500.0, -500.0});
  Rng data = Rng::stream(7, "test"), rng = Rng::stream(7, "shuffle");
  Tensor2 e = random_tensor(8, 3, data);
  Graph g;
  Var out = apply_gate(g, g.param(e), b, 0, rng);
  g.backward(g.weighted_sum(out, random_vector(24, data)));
  for (double v : e.grad) EXPECT_EQ(v, 0.0);
}

TEST(Gates, ThetaGradientMatchesClosedForm) {
  Rng data = Rng::stream(8, "test");
  for (int it = 0; it < 20; ++it) {
    const std::size_t rows = 2 + data.below(7), d = 1 + data.below(4);
    GateBank b = bank_with(random_vector(d, data));
    Tensor2 e = random_tensor(rows, d, data);
    const auto w = random_vector(rows * d, data);
    Rng rng = Rng::stream(static_cast<std::uint64_t>(it), "shuffle");
    Rng replay = rng;
    b.theta[0].w.zero_grad();
    Graph g;
    Var out = apply_gate(g, g.param(e), b, 0, rng);
    g.backward(g.weighted_sum(out, w));

    const auto perm = draw_column_permutations(rows, d, replay);
    for (std::size_t k = 0; k < d; ++k) {
      const double th = b.theta[0].w.values[k];
      const double s = 1.0 / (1.0 + std::exp(-b.temperature * th));
      double expect = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        expect += w[r * d + k] * (e(r, k) - e(perm[k][r], k)) * s * (1.0 - s) * b.temperature;
      EXPECT_NEAR(b.theta[0].w.grad[k], expect, 1e-10);
    }
  }
}

TEST(Gates, EmbeddingGradientIsGateTimesUpstream) {
  GateBank b = bank_with({0.1, -0.3});
  Rng data = Rng::stream(9, "test"), rng = Rng::stream(9, "shuffle");
  Tensor2 e = random_tensor(5, 2, data);
  const auto w = random_vector(10, data);
  Graph g;
  g.backward(g.weighted_sum(apply_gate(g, g.param(e), b, 0, rng), w));
  const auto gv = gate_values(b, 0);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t k = 0; k < 2; ++k) EXPECT_DOUBLE_EQ(e.g(r, k), gv[k] * w[r * 2 + k]);
}

TEST(Gates, ExpectationModeUsesColumnMean) {
  GateBank b = bank_with({0.0});
  Rng rng = Rng::stream(10, "shuffle");
  Tensor2 e(4, 1);
  e.values = {1, 2, 3, 6};
  Graph g;
  const auto& out = g.value(apply_gate(g, g.constant(e), b, 0, rng, ShuffleMode::Expectation));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_DOUBLE_EQ(out.values[r], 0.5 * e.values[r] + 0.5 * 3.0);
}

TEST(Regularizer, ZeroAlphaGivesZeroTermAndGradient) {
  GateBank b = bank_with({0.3, -0.1});
  std::vector<std::size_t> used{2};
  Graph g;
  Var r = gate_regularizer(g, b, used, 0.0, true);
  EXPECT_EQ(g.value(r).values[0], 0.0);
  g.backward(r);
  for (double v : b.theta[0].w.grad) EXPECT_EQ(v, 0.0);
  Graph g2;
  EXPECT_THROW(gate_regularizer(g2, b, used, -1.0, true), ConfigError);
}

TEST(Regularizer, DecayedWeightsOneOverKPlusOne) {
  // theta chosen so that the gates are exactly 0.6 and 0.3
  const double t0 = std::log(0.6 / 0.4) / 5.0, t1 = std::log(0.3 / 0.7) / 5.0;
  GateBank b = bank_with({t0, t1});
  std::vector<std::size_t> used{2};
  EXPECT_NEAR(gate_regularizer_value(b, used, 1.0, true), 0.6 / 2 + 0.3 / 3, 1e-12);
  EXPECT_NEAR(gate_regularizer_value(b, used, 0.01, true), 0.004, 1e-14);
  Graph g;
  EXPECT_NEAR(g.value(gate_regularizer(g, b, used, 1.0, true)).values[0], 0.4, 1e-12);
}

TEST(Regularizer, PlainVersusDecayedOnHalfGate) {
  GateBank b = bank_with({0.0});
  std::vector<std::size_t> used{1};
  EXPECT_DOUBLE_EQ(gate_regularizer_value(b, used, 1.0, false), 0.5);
  EXPECT_DOUBLE_EQ(gate_regularizer_value(b, used, 1.0, true), 0.25);
}

TEST(Regularizer, OnlyUsedDimsContribute) {
  GateBank b = bank_with({0.0, 0.0, 0.0});
  std::vector<std::size_t> used{1};
  EXPECT_DOUBLE_EQ(gate_regularizer_value(b, used, 1.0, false), 0.5);
  Graph g;
  g.backward(gate_regularizer(g, b, used, 1.0, false));
  EXPECT_NE(b.theta[0].w.grad[0], 0.0);
  EXPECT_EQ(b.theta[0].w.grad[1], 0.0);
  EXPECT_EQ(b.theta[0].w.grad[2], 0.0);
}

TEST(Regularizer, GradientMatchesFiniteDifferences) {
  Rng data = Rng::stream(11, "test");
  for (int it = 0; it < 20; ++it) {
    GateBank b = bank_with(random_vector(1 + data.below(5), data));
    std::vector<std::size_t> used{1 + data.below(b.theta[0].cols())};
    const bool decayed = it % 2 == 0;
    auto build = [&](Graph& g) { return gate_regularizer(g, b, used, 0.37, decayed); };
    EXPECT_LT(dimgrow::testing::fd_max_rel_error(build, {&b.theta[0].w}), 1e-4);
  }
}
