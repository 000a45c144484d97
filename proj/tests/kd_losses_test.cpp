#include <gtest/gtest.h>

#include "liftkd/kd_losses.hpp"
#include "test_support.hpp"

namespace liftkd {
namespace {

using testing::central_difference;
using testing::random_tensor;
using testing::relative_error;

TEST(OutKdTest, Values) {
  Rng rng(1);
  const Tensor s = random_tensor(rng, {4, 4});
  EXPECT_EQ(outkd_loss(s, s), 0.0);
  EXPECT_DOUBLE_EQ(outkd_loss(s + 1.0, s), 1.0);
  const Tensor t = random_tensor(rng, {4, 4});
  EXPECT_LT(relative_error(outkd_loss(t, s), testing::mse_loop(t.values(), s.values())), 1e-12);
  EXPECT_THROW(outkd_loss(t, Tensor({16})), ShapeError);
}

TEST(OutKdTest, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  const Tensor t = random_tensor(rng, {64});
  const Tensor s = random_tensor(rng, {64});
  const auto fd = central_difference(
      [&](std::span<const double> x) { return testing::mse_loop(t.values(), x); }, s.data());
  EXPECT_LT(relative_error(outkd_gradient(t, s).values(), fd), 1e-5);
}

TEST(FeatKdTest, IdentityAndZeroRegressor) {
  Rng rng(3);
  const Tensor f = random_tensor(rng, {5, 3});
  EXPECT_EQ(featkd_loss(f, f, LinearMap::identity(3)), 0.0);

  const Tensor f_s = random_tensor(rng, {5, 2});
  const Tensor f_t = random_tensor(rng, {5, 3});
  double mean_sq = 0.0;
  for (double v : f_t.values()) mean_sq += v * v;
  mean_sq /= static_cast<double>(f_t.size());
  EXPECT_DOUBLE_EQ(featkd_loss(f_t, f_s, LinearMap(2, 3)), mean_sq);
  EXPECT_THROW(featkd_loss(f_t, f_s, LinearMap(3, 3)), ShapeError);
  EXPECT_THROW(featkd_loss(f_t, f_s, LinearMap(2, 4)), ShapeError);
}

TEST(FeatKdTest, MatchesMatrixOracle) {
  Rng rng(4);
  const LinearMap r(4, 6, rng);
  const Tensor f_s = random_tensor(rng, {7, 4});
  const Tensor f_t = random_tensor(rng, {7, 6});
  double acc = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t o = 0; o < 6; ++o) {
      double y = r.bias(o);
      for (std::size_t k = 0; k < 4; ++k) y += r.weight(o, k) * f_s[i * 4 + k];
      acc += (f_t[i * 6 + o] - y) * (f_t[i * 6 + o] - y);
    }
  }
  EXPECT_LT(relative_error(featkd_loss(f_t, f_s, r), acc / 42.0), 1e-12);
}

TEST(FeatKdTest, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  const LinearMap r(3, 5, rng);
  const Tensor f_s = random_tensor(rng, {6, 3});
  const Tensor f_t = random_tensor(rng, {6, 5});
  const FeatKdGradients g = featkd_gradient(f_t, f_s, r);

  const auto fd_s = central_difference(
      [&](std::span<const double> x) {
        return featkd_loss(f_t, Tensor(f_s.shape(), {x.begin(), x.end()}), r);
      },
      f_s.data());
  EXPECT_LT(relative_error(g.d_student_features.values(), fd_s), 1e-5);

  const auto fd_r = central_difference(
      [&](std::span<const double> p) {
        LinearMap m = r;
        std::copy(p.begin(), p.end(), m.parameters().begin());
        return featkd_loss(f_t, f_s, m);
      },
      {r.parameters().begin(), r.parameters().end()});
  EXPECT_LT(relative_error(g.d_regressor, fd_r), 1e-5);
}

TEST(CoarseLossTest, Formula) {
  EXPECT_EQ(coarse_loss({0.0, 1.0}), 0.0);
  EXPECT_DOUBLE_EQ(coarse_loss({0.5, 1.5}), 1.0);
  EXPECT_DOUBLE_EQ(coarse_loss({0.5, 1.5}, true), 0.5);
  EXPECT_DOUBLE_EQ(coarse_loss({-2.0, 0.0}), 3.0);
}

TEST(FineLossTest, ReductionsAndDominance) {
  Rng rng(6);
  const Tensor s = random_tensor(rng, {64});
  const Tensor t_affine = 2.0 * s + 3.0;
  EXPECT_NEAR(fine_loss(t_affine, s, ols_fit(t_affine, s)), 0.0, 1e-24);

  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_tensor(rng, {32});
    const Tensor b = random_tensor(rng, {32});
    EXPECT_EQ(fine_loss(a, b, {0.0, 1.0}), outkd_loss(a, b));
    EXPECT_LE(fine_loss(a, b, ols_fit(a, b)), outkd_loss(a, b));
  }
}

TEST(FineLossTest, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  const Tensor t = random_tensor(rng, {64});
  const Tensor s = random_tensor(rng, {64});
  const RegressionCoeffs c{0.3, -1.7};
  const auto fd = central_difference(
      [&](std::span<const double> x) { return testing::residual_mse(t.values(), x, {0.3, -1.7}); },
      s.data());
  EXPECT_LT(relative_error(fine_gradient(t, s, c).values(), fd), 1e-5);
}

TEST(WeightTest, Adaptive) {
  EXPECT_EQ(adaptive_weight(0.0), 1.0);
  EXPECT_EQ(adaptive_weight(2.5), 0.0);
  EXPECT_EQ(adaptive_weight(1.0), 0.0);
  EXPECT_EQ(adaptive_weight(0.3), 0.7);
  EXPECT_THROW(adaptive_weight(-0.1), std::invalid_argument);
}

TEST(WeightTest, IterationSchedules) {
  const auto lin = WeightScheduler::linear(100);
  const auto cos = WeightScheduler::cosine(100);
  EXPECT_EQ(scheduled_weight(lin, 0, 5.0), 0.0);
  EXPECT_EQ(scheduled_weight(lin, 100, 5.0), 1.0);
  EXPECT_EQ(scheduled_weight(lin, 25, 5.0), 0.25);
  EXPECT_EQ(scheduled_weight(cos, 0, 5.0), 0.0);
  EXPECT_EQ(scheduled_weight(cos, 100, 5.0), 1.0);
  EXPECT_EQ(scheduled_weight(cos, 50, 5.0), 0.5);
  EXPECT_THROW(scheduled_weight(lin, 101, 0.0), std::out_of_range);
  EXPECT_THROW(scheduled_weight(cos, -1, 0.0), std::out_of_range);
  EXPECT_EQ(scheduled_weight(WeightScheduler::fixed(1.0), 12345, 9.0), 1.0);
  EXPECT_EQ(scheduled_weight(WeightScheduler::fixed(1.7), 0, 0.0), 1.0);
  EXPECT_EQ(scheduled_weight(WeightScheduler::fixed(-0.5), 0, 0.0), 0.0);
}

TEST(WeightTest, RangeAndMonotonicity) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const long total = 1 + static_cast<long>(rng.uniform_int(0, 999));
    double prev_lin = -1.0, prev_cos = -1.0;
    for (long i = 0; i <= total; i += 1 + total / 37) {
      const double wl = scheduled_weight(WeightScheduler::linear(total), i, 0.0);
      const double wc = scheduled_weight(WeightScheduler::cosine(total), i, 0.0);
      EXPECT_GE(wl, prev_lin);
      EXPECT_GE(wc, prev_cos);
      EXPECT_GE(wl, 0.0);
      EXPECT_LE(wl, 1.0);
      EXPECT_GE(wc, 0.0);
      EXPECT_LE(wc, 1.0);
      prev_lin = wl;
      prev_cos = wc;
    }
    const double w = scheduled_weight(WeightScheduler::adaptive(), 0, rng.uniform(0.0, 5.0));
    EXPECT_GE(w, 0.0);
    EXPECT_LE(w, 1.0);
  }
}

TEST(SchedulerNamesTest, RoundTrip) {
  for (auto k : {WeightScheduler::Kind::Adaptive, WeightScheduler::Kind::Linear,
                 WeightScheduler::Kind::Cosine, WeightScheduler::Kind::Fixed}) {
    EXPECT_EQ(scheduler_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(scheduler_kind_from_string("step"), std::invalid_argument);
}

TEST(LiftLossTest, Examples) {
  Rng rng(9);
  const Tensor s = random_tensor(rng, {64});
  const LiftTerms same = lift_loss(s, s, 1.0);
  EXPECT_NEAR(same.loss, 0.0, 1e-14);
  EXPECT_NEAR(same.coeffs.beta0, 0.0, 1e-14);
  EXPECT_NEAR(same.coeffs.beta1, 1.0, 1e-14);

  const LiftTerms affine = lift_loss(2.0 * s + 3.0, s, 1.0);
  EXPECT_NEAR(affine.loss, 4.0, 1e-12);
  EXPECT_NEAR(affine.fine, 0.0, 1e-24);

  EXPECT_THROW(lift_loss(s, s, 1.5), std::invalid_argument);
  EXPECT_THROW(lift_loss(s, Tensor({64}, 2.0), 1.0), DegenerateVariance);
}

TEST(LiftLossTest, MatchesComposedOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor s = random_tensor(rng, {64}, rng.uniform(0.2, 2.0));
    const Tensor t = random_tensor(rng, {64}, 0.3) + rng.uniform(0.5, 1.5) * s + rng.uniform(-0.5, 0.5);
    const bool relaxed = trial % 2 == 1;
    const testing::Affine c = testing::normal_equation_fit(t.values(), s.values());
    const double coarse = testing::coarse_formula(c, relaxed);
    const double w = 1.0 - std::min(1.0, coarse);
    const double expected = coarse + w * testing::residual_mse(t.values(), s.values(), c);
    const LiftTerms got = lift_terms(t.values(), s.values(), adaptive_weight, {relaxed, CoeffGrad::Stop});
    EXPECT_LT(relative_error(got.loss, expected), 1e-12);
    EXPECT_DOUBLE_EQ(got.w, adaptive_weight(got.coarse));
  }
}

class LiftGradientTest : public ::testing::TestWithParam<std::tuple<CoeffGrad, bool>> {};

TEST_P(LiftGradientTest, MatchesFiniteDifferences) {
  const auto [mode, relaxed] = GetParam();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    const Tensor s = random_tensor(rng, {64});
    const Tensor t = random_tensor(rng, {64}, 0.5) + 0.8 * s + 0.2;
    const double w = rng.uniform(0.1, 1.0);
    Tensor grad;
    lift_loss(t, s, w, {relaxed, mode}, &grad);
    auto f = [&](std::span<const double> x) {
      if (mode == CoeffGrad::Full) {
        return lift_loss(t, Tensor(s.shape(), {x.begin(), x.end()}), w, {relaxed, mode}).loss;
      }
      // Coefficients frozen at the unperturbed fit.
      const RegressionCoeffs c = ols_fit(t, s);
      return coarse_loss(c, relaxed) + w * testing::residual_mse(t.values(), x, {c.beta0, c.beta1});
    };
    EXPECT_LT(relative_error(grad.values(), central_difference(f, s.data())), 1e-5) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, LiftGradientTest,
                         ::testing::Combine(::testing::Values(CoeffGrad::Stop, CoeffGrad::Full),
                                            ::testing::Bool()));

TEST(LiftLossTest, CoarseAboveOneSilencesFineGradient) {
  Rng rng(11);
  const Tensor s = random_tensor(rng, {64});
  const Tensor t = 3.0 * s + 2.0 + random_tensor(rng, {64}, 0.1);
  std::vector<double> grad(64, 0.0);
  const LiftTerms terms = lift_terms(t.values(), s.values(), adaptive_weight, {}, grad);
  EXPECT_GE(terms.coarse, 1.0);
  EXPECT_EQ(terms.w, 0.0);
  for (double g : grad) EXPECT_EQ(g, 0.0);
}

TEST(LiftLossTest, DegenerateFallbackInLiftTerms) {
  const Tensor s({8}, 0.5);
  const Tensor t = Tensor::vector({1, 2, 3, 4, 5, 6, 7, 8});
  const LiftTerms terms = lift_terms(t.values(), s.values(), adaptive_weight, {});
  EXPECT_TRUE(terms.degenerate);
  EXPECT_DOUBLE_EQ(terms.coeffs.beta1, 1.0);
  EXPECT_DOUBLE_EQ(terms.coeffs.beta0, 4.5 - 0.5);
}

}  // namespace
}  // namespace liftkd
