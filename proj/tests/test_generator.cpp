#include <gtest/gtest.h>

#include "rls/errors.hpp"
#include "rls/generator.hpp"
#include "rls/search.hpp"
#include "test_util.hpp"

using namespace rls;
using namespace rls::gen;

namespace {

GeneratorModel default_generator(std::uint64_t seed = 5) {
  auto g = GeneratorModel(GeneratorArch{}, seed);
  g.freeze();
  return g;
}

// Energy of the 8x8 box-averaged difference image.
double low_pass_energy(const torch::Tensor& a, const torch::Tensor& b) {
  auto diff = (a - b).to(torch::kFloat64);
  auto low = torch::nn::functional::avg_pool2d(
      diff, torch::nn::functional::AvgPool2dFuncOptions(diff.size(-1) / 8));
  return low.square().sum().item<double>();
}

}  // namespace

TEST(Generator, MappingIsDeterministic) {
  auto g = default_generator();
  auto z = g.sample_latents(1, 11)[0];
  auto a = g.map_latent({z}), b = g.map_latent({z});
  EXPECT_TRUE(torch::equal(a.values, b.values));
  auto zero = torch::zeros({g.d()}, z.options());
  EXPECT_TRUE(torch::equal(g.map_latent({zero}).values, g.map_latent({zero}).values));
  EXPECT_TRUE(torch::isfinite(a.values).all().item<bool>());
}

TEST(Generator, MappedStylesAreNonDegenerate) {
  auto g = default_generator();
  torch::NoGradGuard ng;
  auto w = g.map_batch(g.sample_latents(2000, 4));
  auto norms = w.to(torch::kFloat64).square().sum(1);
  EXPECT_TRUE(std::isfinite(norms.mean().item<double>()));
  EXPECT_GT(norms.var().item<double>(), 0.0);
}

TEST(Generator, DimensionMismatchThrows) {
  auto g = default_generator();
  EXPECT_THROW(g.map_latent({torch::zeros({g.d() + 1})}), ShapeError);
  EXPECT_THROW(g.synthesize({torch::zeros({g.num_layers() - 1, g.d()})}), ShapeError);
  EXPECT_THROW(g.synthesize({torch::zeros({g.num_layers(), g.d() + 2})}), ShapeError);
  EXPECT_THROW(g.synthesize_batch(torch::zeros({g.num_layers(), g.d()})), ShapeError);
}

TEST(Generator, BroadcastRepeatsStyleWithZeroCrossPrior) {
  auto g = default_generator();
  auto w = g.map_latent({g.sample_latents(1, 2)[0]});
  auto wp = broadcast(w, g.num_layers());
  ASSERT_EQ(wp.rows.size(0), g.num_layers());
  ASSERT_EQ(wp.rows.size(1), g.d());
  for (int i = 0; i < g.num_layers(); ++i) EXPECT_TRUE(torch::equal(wp.rows[i], w.values));
  EXPECT_EQ(search::prior_cross(wp), 0.0);
}

TEST(Generator, SynthesisIsDeterministicAndBounded) {
  auto g = default_generator();
  auto wp = broadcast(g.map_latent({g.sample_latents(1, 8)[0]}), g.num_layers());
  auto a = g.synthesize(wp), b = g.synthesize(wp);
  EXPECT_EQ(a.height, 64);
  EXPECT_EQ(a.width, 64);
  EXPECT_EQ(a.channels, 3);
  EXPECT_EQ(a.pixels, b.pixels);
  for (float p : a.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
  }
}

TEST(Generator, MeanPixelGradientMatchesCentralDifferences) {
  auto g = default_generator().clone(torch::kFloat64);
  g.freeze();
  torch::manual_seed(21);
  auto w = torch::randn({1, g.num_layers(), g.d()}, torch::kFloat64).requires_grad_(true);
  g.synthesize_batch(w).mean().backward();
  auto grad = w.grad().clone();

  const double h = 1e-3;
  torch::NoGradGuard ng;
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> row(0, g.num_layers() - 1), col(0, g.d() - 1);
  for (int k = 0; k < 10; ++k) {
    const int i = row(rng), j = col(rng);
    auto plus = w.detach().clone(), minus = w.detach().clone();
    plus[0][i][j] += h;
    minus[0][i][j] -= h;
    const double fd = (g.synthesize_batch(plus).mean().item<double>() -
                       g.synthesize_batch(minus).mean().item<double>()) /
                      (2 * h);
    EXPECT_NEAR(grad[0][i][j].item<double>(), fd, 1e-3) << "row " << i << " col " << j;
  }
}

TEST(Generator, FinestRowMovesLowFrequenciesLessThanCoarsest) {
  auto g = default_generator();
  torch::NoGradGuard ng;
  const int n = 20, L = g.num_layers();
  auto w = broadcast_batch(g.map_batch(g.sample_latents(n, 31)), L);
  torch::manual_seed(32);
  auto delta = torch::randn({n, g.d()}, w.options());
  auto base = g.synthesize_batch(w);

  auto coarse = w.clone(), fine = w.clone();
  coarse.select(1, 0).add_(delta);
  fine.select(1, L - 1).add_(delta);
  const double e_coarse = low_pass_energy(g.synthesize_batch(coarse), base);
  const double e_fine = low_pass_energy(g.synthesize_batch(fine), base);
  EXPECT_LT(e_fine, e_coarse);
}

TEST(Generator, MeanStyleMatchesDefinition) {
  auto g = default_generator();
  auto single = g.mean_style(1, 17);
  auto direct = g.map_latent({g.sample_latents(1, 17)[0]});
  EXPECT_TRUE(torch::allclose(single.values, direct.values, 1e-6, 1e-6));
  EXPECT_TRUE(torch::equal(g.mean_style(100, 3).values, g.mean_style(100, 3).values));
  EXPECT_THROW(g.mean_style(0, 1), InvalidParameter);
}

TEST(Generator, MeanStyleConcentrates) {
  auto g = default_generator();
  auto a = g.mean_style(10000, 1).values, b = g.mean_style(10000, 2).values;
  EXPECT_LT((a - b).norm().item<double>(), 0.1 * std::sqrt(g.d()));
}

TEST(Generator, TrainingRejectsSmallDatasets) {
  auto images = torch::rand({100, 3, 64, 64});
  EXPECT_THROW(train_generator(images, GeneratorArch{}, GeneratorTrainConfig{}), InvalidParameter);
}

TEST(Generator, CheckpointRoundTripPreservesDigest) {
  auto g = fixtures::tiny_generator();
  auto dir = std::filesystem::temp_directory_path() / "rls_gen_roundtrip";
  std::filesystem::remove_all(dir);
  g.save(dir);
  auto h = GeneratorModel::load(dir);
  EXPECT_EQ(g.digest(), h.digest());
  auto wp = broadcast(g.map_latent({g.sample_latents(1, 1)[0]}), g.num_layers());
  EXPECT_EQ(g.synthesize(wp).pixels, h.synthesize(wp).pixels);
  std::filesystem::remove_all(dir);
}
