#pragma once

#include <functional>
#include <span>
#include <vector>

namespace rls::stats {

double mean(std::span<const double> v);
/// Unbiased sample variance.
double variance(std::span<const double> v);
double median(std::vector<double> v);

/// Kolmogorov limiting survival function Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2).
double kolmogorov_survival(double lambda);

struct KsResult {
  double statistic;
  double pvalue;
};
/// One-sample two-sided KS test against a continuous CDF. The p-value uses
/// Stephens' finite-sample correction of the asymptotic distribution.
KsResult ks_test(std::vector<double> samples, const std::function<double(double)>& cdf);

double chi_squared_cdf(double x, int dof);

/// (mean(b) - mean(a)) / pooled standard deviation.
double cohens_d(std::span<const double> a, std::span<const double> b);

struct RankSumResult {
  double u;       // Mann-Whitney U of sample a
  double z;
  double pvalue;  // two-sided, normal approximation with tie correction
};
RankSumResult rank_sum_test(std::span<const double> a, std::span<const double> b);

}  // namespace rls::stats
