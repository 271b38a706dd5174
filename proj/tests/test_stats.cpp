#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rls/stats.hpp"

using namespace rls::stats;

TEST(Stats, MeanVarianceMedian) {
  std::vector<double> v = {1, 2, 3, 4, 10};
  EXPECT_DOUBLE_EQ(mean(v), 4.0);
  EXPECT_DOUBLE_EQ(variance(v), 12.5);  // sample variance, n-1
  EXPECT_DOUBLE_EQ(median(v), 3.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(Stats, ChiSquaredCdfClosedForm) {
  // dof 2: 1 - exp(-x/2)
  for (double x : {0.1, 1.0, 2.5, 7.0})
    EXPECT_NEAR(chi_squared_cdf(x, 2), 1.0 - std::exp(-x / 2), 1e-12);
  EXPECT_NEAR(chi_squared_cdf(64.0, 64), 0.5, 0.05);
}

TEST(Stats, KolmogorovSurvival) {
  // Q(1.36) ~ 0.049, the textbook 5% critical value.
  EXPECT_NEAR(kolmogorov_survival(1.36), 0.0494, 1e-3);
  EXPECT_NEAR(kolmogorov_survival(0.0), 1.0, 1e-12);
}

TEST(Stats, KsAgainstUniform) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s(2000);
  for (auto& x : s) x = u(rng);
  auto r = ks_test(s, [](double x) { return std::clamp(x, 0.0, 1.0); });
  EXPECT_LT(r.statistic, 0.04);
  EXPECT_GT(r.pvalue, 0.01);
  for (auto& x : s) x = x * x;
  auto bad = ks_test(s, [](double x) { return std::clamp(x, 0.0, 1.0); });
  EXPECT_GT(bad.statistic, 0.2);
  EXPECT_LT(bad.pvalue, 1e-10);
}

TEST(Stats, KsExactSmallCase) {
  // Samples {0.5} against U(0,1): D = 0.5.
  auto r = ks_test({0.5}, [](double x) { return x; });
  EXPECT_DOUBLE_EQ(r.statistic, 0.5);
}

TEST(Stats, CohensD) {
  std::vector<double> a = {1, 2, 3}, b = {4, 5, 6};
  // pooled sd = 1, difference (b - a) = 3
  EXPECT_DOUBLE_EQ(cohens_d(a, b), 3.0);
  EXPECT_DOUBLE_EQ(cohens_d(b, a), -3.0);
}

TEST(Stats, RankSumHandComputed) {
  // a = {1,2,3}, b = {4,5,6}: U_a = 0, mean 4.5, sd sqrt(3*3*7/12) = sqrt(5.25)
  std::vector<double> a = {1, 2, 3}, b = {4, 5, 6};
  auto r = rank_sum_test(a, b);
  EXPECT_DOUBLE_EQ(r.u, 0.0);
  EXPECT_NEAR(std::abs(r.z), 4.5 / std::sqrt(5.25), 1e-9);
  EXPECT_NEAR(r.pvalue, std::erfc(std::abs(r.z) / std::sqrt(2.0)), 1e-12);
}

TEST(Stats, RankSumTiesAndSymmetry) {
  std::vector<double> a = {1, 1, 1, 1}, b = {1, 1, 1, 1};
  auto r = rank_sum_test(a, b);
  EXPECT_NEAR(r.pvalue, 1.0, 1e-12);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x(30), y(40);
    for (auto& v : x) v = n(rng);
    for (auto& v : y) v = n(rng) + 0.5;
    EXPECT_NEAR(rank_sum_test(x, y).pvalue, rank_sum_test(y, x).pvalue, 1e-12);
  }
}
