#include <gtest/gtest.h>

#include <algorithm>

#include "rls/errors.hpp"
#include "rls/search.hpp"
#include "test_util.hpp"

using namespace rls;
using namespace rls::search;

namespace {

search::RLSConfig fast_config(int iterations = 20) {
  RLSConfig c;
  c.iterations = iterations;
  c.mean_style_samples = 256;
  c.learning_rate = 0.1;
  return c;
}

torch::Tensor random_w_plus(int b, int l, int d, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::randn({b, l, d}, torch::kFloat64);
}

}  // namespace

TEST(PriorCross, ZeroForEqualRowsAndPairSumOtherwise) {
  auto row = torch::randn({1, 1, 8}, torch::kFloat64);
  EXPECT_EQ(prior_cross_batch(row.expand({2, 5, 8}).contiguous()).abs().max().item<double>(), 0.0);
  auto w = random_w_plus(1, 4, 3, 1)[0];
  double oracle = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) oracle -= (w[i] - w[j]).square().sum().item<double>();
  EXPECT_NEAR(prior_cross({w}), oracle, 1e-10);
}

TEST(PriorW, IdenticalRowsEqualRowDensity) {
  auto f = fixtures::perturbed_flow(8, 1);
  auto row = torch::randn({8}, torch::kFloat64);
  gen::ExtendedStyle w{row.unsqueeze(0).expand({5, 8}).contiguous()};
  EXPECT_NEAR(prior_w(w, f), flow_log_density(f, {row}), 1e-10);
}

TEST(DataTerm, ZeroOnExactObservation) {
  auto g = fixtures::tiny_generator();
  auto w = random_w_plus(1, 5, 8, 2);
  torch::NoGradGuard ng;
  auto y = degrade::downscale_tensor(g.synthesize_batch(w.to(torch::kFloat32)), 16);
  EXPECT_LT(data_term_batch(y, w, g, 16).item<double>(), 1e-4);
  EXPECT_THROW(data_term_batch(y, w, g, 8), ShapeError);
}

// Autograd gradient of the full objective vs central differences, in float64.
TEST(Objective, GradientMatchesFiniteDifferences) {
  auto g = fixtures::tiny_generator().clone(torch::kFloat64);
  auto f = fixtures::perturbed_flow(8, 3);
  auto y = to_tensor(fixtures::random_image(4, 4, 3, 5)).unsqueeze(0).to(torch::kFloat64);
  RLSConfig cfg;
  cfg.lambda_w = 0.05;  // large enough that every term contributes
  cfg.lambda_c = 0.01;
  auto total = [&](const torch::Tensor& w) {
    return data_term_batch(y, w, g, 16) - cfg.lambda_w * prior_w_batch(w, f) -
           cfg.lambda_c * prior_cross_batch(w);
  };
  auto w = random_w_plus(1, 5, 8, 4).requires_grad_(true);
  auto grad = torch::autograd::grad({total(w).sum()}, {w})[0];
  const double h = 1e-6;
  auto flat = w.detach().flatten();
  torch::manual_seed(9);
  auto coords = torch::randperm(flat.size(0)).narrow(0, 0, 10);
  for (int k = 0; k < 10; ++k) {
    const auto i = coords[k].item<int64_t>();
    auto p = flat.clone(), m = flat.clone();
    p[i] += h;
    m[i] -= h;
    const double fd = (total(p.view_as(w)).item<double>() - total(m.view_as(w)).item<double>()) / (2 * h);
    const double ad = grad.flatten()[i].item<double>();
    EXPECT_LE(std::abs(fd - ad), 1e-3 * std::max(std::abs(ad), 1e-3)) << "coordinate " << i;
  }
}

TEST(Objective, VariantsSwitchOffTerms) {
  RLSConfig c;
  c.variant = Variant::no_regu;
  EXPECT_EQ(c.effective_lambda_w(), 0.0);
  EXPECT_EQ(c.effective_lambda_c(), 0.0);
  c.variant = Variant::no_pw;
  EXPECT_EQ(c.effective_lambda_w(), 0.0);
  EXPECT_EQ(c.effective_lambda_c(), c.lambda_c);
  c.variant = Variant::no_pcross;
  EXPECT_EQ(c.effective_lambda_w(), c.lambda_w);
  EXPECT_EQ(c.effective_lambda_c(), 0.0);
  c.variant = Variant::full;
  EXPECT_EQ(c.effective_lambda_w(), 5e-5);
  EXPECT_EQ(c.effective_lambda_c(), 0.01);
}

TEST(Objective, TotalCombinesTerms) {
  auto g = fixtures::tiny_generator();
  auto f = fixtures::perturbed_flow(8, 2);
  auto y = fixtures::random_image(4, 4, 3, 1);
  gen::ExtendedStyle w{random_w_plus(1, 5, 8, 3)[0]};
  RLSConfig c;
  auto t = objective(y, w, g, f, degrade::DegradationSpec{}, c);
  EXPECT_NEAR(t.total, t.data_term - 5e-5 * t.p_w - 0.01 * t.p_cross, 1e-9);
  EXPECT_EQ(lr_entries(y), 48);
}

TEST(Config, JsonRoundTripAndStrictKeys) {
  RLSConfig c;
  c.variant = Variant::no_pw;
  c.iterations = 17;
  c.init_jitter = 0.2;
  EXPECT_EQ(config_from_json(to_json(c)), c);
  auto j = to_json(c);
  j["lambda"] = 1.0;
  EXPECT_THROW(config_from_json(j), InvalidParameter);
  EXPECT_THROW(variant_from_string("none"), InvalidParameter);
}

TEST(Config, Validation) {
  RLSConfig c;
  c.iterations = 0;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c = {};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c = {};
  c.lambda_w = -1;
  EXPECT_THROW(c.validate(), InvalidParameter);
}

TEST(Superresolve, BestIterateAndTrajectory) {
  auto g = fixtures::tiny_generator();
  auto f = fixtures::perturbed_flow(8, 2, 0.05);
  auto y = fixtures::random_image(4, 4, 3, 6);
  auto r = superresolve(y, g, f, degrade::DegradationSpec{}, fast_config(25));
  ASSERT_EQ(r.trajectory.size(), 25u);
  double lowest = 1e300;
  for (const auto& t : r.trajectory) lowest = std::min(lowest, t.total);
  EXPECT_DOUBLE_EQ(r.best.total, lowest);
  EXPECT_DOUBLE_EQ(r.trajectory[r.best_iteration].total, lowest);
  EXPECT_LT(r.best.total, r.trajectory.front().total);
  EXPECT_EQ(r.sr_image.height, 64);
  EXPECT_EQ(r.per_row_log_density.size(), 5u);
  // The reported terms belong to the returned w+.
  auto check = objective(y, r.w_plus_hat, g, f, degrade::DegradationSpec{}, fast_config());
  EXPECT_NEAR(check.total, r.best.total, 1e-3 * std::abs(r.best.total));
}

TEST(Superresolve, BatchEqualsIndependentRuns) {
  auto g = fixtures::tiny_generator();
  auto f = fixtures::perturbed_flow(8, 2, 0.05);
  std::vector<Image> ys = {fixtures::random_image(4, 4, 3, 1), fixtures::random_image(4, 4, 3, 2)};
  auto cfg = fast_config(10);
  auto batch = superresolve_batch(ys, g, f, degrade::DegradationSpec{}, cfg);
  for (int i = 0; i < 2; ++i) {
    auto one = superresolve(ys[i], g, f, degrade::DegradationSpec{}, cfg);
    EXPECT_NEAR(one.best.total, batch[i].best.total, 1e-4 * std::abs(one.best.total));
    EXPECT_LT((one.w_plus_hat.rows - batch[i].w_plus_hat.rows).abs().max().item<double>(), 1e-3);
  }
}

TEST(Superresolve, DeterministicPerSeed) {
  auto g = fixtures::tiny_generator();
  auto f = fixtures::perturbed_flow(8, 2, 0.05);
  auto y = fixtures::random_image(4, 4, 3, 3);
  auto cfg = fast_config(5);
  cfg.init_jitter = 0.1;
  cfg.seed = 11;
  auto a = superresolve(y, g, f, degrade::DegradationSpec{}, cfg);
  auto b = superresolve(y, g, f, degrade::DegradationSpec{}, cfg);
  EXPECT_TRUE(torch::equal(a.w_plus_hat.rows, b.w_plus_hat.rows));
  cfg.seed = 12;
  auto c = superresolve(y, g, f, degrade::DegradationSpec{}, cfg);
  EXPECT_FALSE(torch::equal(a.w_plus_hat.rows, c.w_plus_hat.rows));
}

TEST(Superresolve, MeanStyleInitHasEqualRows) {
  auto g = fixtures::tiny_generator();
  auto f = fixtures::perturbed_flow(8, 2, 0.05);
  auto y = fixtures::random_image(4, 4, 3, 3);
  auto r = superresolve(y, g, f, degrade::DegradationSpec{}, fast_config(1));
  EXPECT_EQ(r.trajectory.front().p_cross, 0.0);
}

TEST(Superresolve, RejectsMismatchedInput) {
  auto g = fixtures::tiny_generator();
  auto f = fixtures::perturbed_flow(8, 2);
  auto y = fixtures::random_image(5, 4, 3, 3);
  EXPECT_THROW(superresolve(y, g, f, degrade::DegradationSpec{}, fast_config(1)), ShapeError);
  EXPECT_THROW(superresolve(fixtures::random_image(4, 4, 3, 1), g, fixtures::perturbed_flow(6, 1),
                            degrade::DegradationSpec{}, fast_config(1)),
               ShapeError);
}
