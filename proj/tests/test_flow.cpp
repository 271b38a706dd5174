#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "rls/errors.hpp"
#include "rls/flow.hpp"
#include "test_util.hpp"

using namespace rls;
using namespace rls::flow;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

torch::Tensor randn64(std::vector<int64_t> shape, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::randn(shape, torch::kFloat64);
}

// Dense Jacobian of the forward map at one point by central differences.
torch::Tensor numeric_jacobian(const FlowModel& f, const torch::Tensor& w, double h = 1e-5) {
  const auto d = w.size(0);
  auto j = torch::zeros({d, d}, torch::kFloat64);
  for (int64_t k = 0; k < d; ++k) {
    auto wp = w.clone(), wm = w.clone();
    wp[k] += h;
    wm[k] -= h;
    auto zp = f.forward(wp.unsqueeze(0)).first[0];
    auto zm = f.forward(wm.unsqueeze(0)).first[0];
    j.index_put_({torch::indexing::Slice(), k}, (zp - zm) / (2 * h));
  }
  return j;
}

}  // namespace

TEST(Flow, IdentityAtInitialization) {
  FlowModel f({8, 5, 32, 7});
  auto w = randn64({16, 8}, 1);
  auto [z, logdet] = f.forward(w);
  // Only permutations act: each row keeps its multiset of values.
  EXPECT_TRUE(torch::allclose(std::get<0>(z.sort(1)), std::get<0>(w.sort(1))));
  EXPECT_LT(logdet.abs().max().item<double>(), 1e-12);
}

TEST(Flow, LogDensityAtOriginOfIdentityFlow) {
  FlowModel f({8, 5, 32, 0});
  auto lp = f.log_density(torch::zeros({1, 8}, torch::kFloat64));
  EXPECT_NEAR(lp.item<double>(), -0.5 * 8 * kLog2Pi, 1e-12);
  EXPECT_NEAR(flow_log_density(f, {torch::zeros({8})}), -0.5 * 8 * kLog2Pi, 1e-9);
}

// Property: forward/inverse round trip for random perturbed flows and inputs.
TEST(Flow, RoundTrip) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto f = fixtures::perturbed_flow(12, s);
    f.set_standardization(randn64({12}, s + 50), 0.3 * randn64({12}, s + 60));
    auto w = 2.0 * randn64({32, 12}, s + 100);
    auto [z, ld] = f.forward(w);
    auto [back, ld_inv] = f.inverse(z);
    EXPECT_LT((back - w).abs().max().item<double>(), 1e-4);
    EXPECT_LT((ld + ld_inv).abs().max().item<double>(), 1e-8);
  }
}

TEST(Flow, LogDetMatchesDenseJacobian) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto f = fixtures::perturbed_flow(8, s + 10, 0.5);
    f.set_standardization(0.5 * randn64({8}, s), 0.2 * randn64({8}, s + 1));
    auto w = randn64({8}, s + 20);
    auto jac = numeric_jacobian(f, w);
    const double oracle = std::get<1>(torch::linalg_slogdet(jac)).item<double>();
    const double ld = f.forward(w.unsqueeze(0)).second.item<double>();
    EXPECT_NEAR(ld, oracle, 1e-2);
  }
}

static double grid_mass(const FlowModel& f, double half_width, double h = 0.02) {
  auto axis = torch::arange(-half_width + h / 2, half_width, h, torch::kFloat64);
  auto grid = torch::meshgrid({axis, axis}, "ij");
  auto pts = torch::stack({grid[0].flatten(), grid[1].flatten()}, 1);
  return f.log_density(pts).exp().sum().item<double>() * h * h;
}

TEST(Flow, DensityIntegratesToOneInTwoDimensions) {
  EXPECT_NEAR(grid_mass(fixtures::perturbed_flow(2, 4, 0.1), 6.0), 1.0, 0.02);
  // A rougher flow has heavier tails; a wider window recovers the mass.
  EXPECT_NEAR(grid_mass(fixtures::perturbed_flow(2, 4, 0.2), 12.0), 1.0, 0.02);
}

TEST(Flow, SingleVectorApiAgreesWithBatch) {
  auto f = fixtures::perturbed_flow(6, 2);
  auto w = randn64({6}, 3);
  auto fw = flow_forward(f, {w});
  auto [z, ld] = f.forward(w.unsqueeze(0));
  EXPECT_TRUE(torch::allclose(fw.z, z[0]));
  EXPECT_NEAR(fw.logdet, ld.item<double>(), 1e-12);
  auto back = flow_inverse(f, fw.z);
  EXPECT_LT((back.values.to(torch::kFloat64) - w).abs().max().item<double>(), 1e-4);
}

TEST(Flow, RejectsBadInput) {
  FlowModel f({4, 2, 8, 0});
  EXPECT_THROW(f.forward(torch::zeros({2, 5}, torch::kFloat64)), ShapeError);
  auto w = torch::zeros({1, 4}, torch::kFloat64);
  w[0][1] = std::nan("");
  EXPECT_THROW(f.forward(w), NonFiniteError);
}

TEST(Flow, SaveLoadPreservesOutputs) {
  auto f = fixtures::perturbed_flow(6, 9);
  const auto dir = std::filesystem::temp_directory_path() / "rls_test_flow";
  std::filesystem::remove_all(dir);
  f.save(dir);
  auto g = FlowModel::load(dir);
  EXPECT_EQ(f.digest(), g.digest());
  auto w = randn64({5, 6}, 1);
  EXPECT_TRUE(torch::equal(f.forward(w).first, g.forward(w).first));
  std::filesystem::remove_all(dir);
}

TEST(FlowTraining, StandardNormalReachesAnalyticEntropy) {
  constexpr int d = 8;
  auto x = randn64({12000, d}, 5);
  FlowTrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 2;
  auto f = train_flow(x, {d, 2, 32, 1}, cfg);
  const double expected = -0.5 * d * (1.0 + kLog2Pi);
  const auto& m = f.meta();
  ASSERT_EQ(m.heldout_log_density.size(), 3u);
  EXPECT_NEAR(m.heldout_log_density.back(), expected, 0.05 * d);
  // Held-out and training means agree within 5%.
  EXPECT_LT(std::abs(m.heldout_log_density.back() - m.train_log_density.back()) /
                std::abs(m.train_log_density.back()),
            0.05);
}

TEST(FlowTraining, MonotoneEarlyEpochsAndDeterministicDigest) {
  // A skewed, correlated target so the flow has something to learn.
  auto g = randn64({10000, 4}, 6);
  auto x = torch::stack({g.select(1, 0), g.select(1, 0) + 0.3 * g.select(1, 1),
                         g.select(1, 2).exp(), g.select(1, 3) * 0.1}, 1);
  FlowTrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 4;
  auto a = train_flow(x, {4, 2, 32, 3}, cfg);
  auto b = train_flow(x, {4, 2, 32, 3}, cfg);
  EXPECT_EQ(a.digest(), b.digest());
  const auto& t = a.meta().train_log_density;
  EXPECT_LT(t[0], t[1]);
  EXPECT_LT(t[1], t[2]);
}

TEST(FlowTraining, RequiresEnoughStyles) {
  EXPECT_THROW(train_flow(randn64({500, 4}, 1), {4, 2, 8, 0}, {}), InvalidParameter);
}

TEST(FlowTraining, OutOfDistributionScoresLower) {
  auto g = randn64({11000, 4}, 8);
  auto x = torch::stack({g.select(1, 0), g.select(1, 0) + 0.3 * g.select(1, 1),
                         g.select(1, 2).exp(), g.select(1, 3) * 0.1}, 1);
  FlowTrainConfig cfg;
  cfg.epochs = 2;
  auto f = train_flow(x.narrow(0, 0, 10000), {4, 2, 32, 3}, cfg);
  auto held = x.narrow(0, 10000, 1000);
  torch::manual_seed(3);
  auto lo = std::get<0>(x.min(0)), hi = std::get<0>(x.max(0));
  auto noise = lo + (hi - lo) * torch::rand({1000, 4}, torch::kFloat64);
  EXPECT_GT(f.log_density(held).mean().item<double>(), f.log_density(noise).mean().item<double>());
}

TEST(Pulse, WhiteningIsExact) {
  auto x = randn64({500, 6}, 2).exp() - 1.0;
  auto y = pulse_gaussianize(x);
  EXPECT_LT(y.mean(0).abs().max().item<double>(), 1e-6);
  auto c = y - y.mean(0);
  auto cov = torch::matmul(c.t(), c) / y.size(0);
  auto off = cov - torch::diag(cov.diagonal());
  EXPECT_LT(off.abs().max().item<double>(), 1e-6);
  EXPECT_LT((cov.diagonal() - 1.0).abs().max().item<double>(), 1e-6);
}

TEST(Pulse, RankDeficiency) {
  auto x = randn64({100, 3}, 1);
  auto dup = torch::cat({x, x.select(1, 0).unsqueeze(1)}, 1);
  EXPECT_THROW(pulse_gaussianize(dup), RankDeficiencyError);
  EXPECT_THROW(pulse_gaussianize(randn64({3, 3}, 1)), RankDeficiencyError);
}

TEST(Diagnostics, StandardNormalPassesChiSquared) {
  auto d = diagnose_gaussianization(randn64({5000, 16}, 3));
  EXPECT_EQ(d.target_dof, 16);
  EXPECT_NEAR(d.mean_norm, 16.0, 0.3);
  EXPECT_LT(d.ks_statistic, 0.03);
  auto wide = diagnose_gaussianization(2.0 * randn64({5000, 16}, 3));
  EXPECT_GT(wide.ks_statistic, 0.5);
  EXPECT_THROW(diagnose_gaussianization(randn64({50, 16}, 3)), InvalidParameter);
}

