#include <gtest/gtest.h>

#include <cmath>

#include "rls/errors.hpp"
#include "rls/metrics.hpp"
#include "test_util.hpp"

using namespace rls;
using namespace rls::metrics;

TEST(Psnr, ClosedForm) {
  Image a(8, 8, 3, 0.0f), b(8, 8, 3, 0.1f);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);  // MSE 0.01
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_THROW(psnr(a, Image(8, 4, 3)), ShapeError);
}

TEST(MsSsim, IdentityBoundsAndSymmetry) {
  auto a = fixtures::random_image(64, 64, 3, 1);
  auto b = fixtures::random_image(64, 64, 3, 2);
  EXPECT_NEAR(ms_ssim(a, a), 1.0, 1e-9);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-9);
  const double ab = ms_ssim(a, b);
  EXPECT_NEAR(ab, ms_ssim(b, a), 1e-12);
  EXPECT_GE(ab, 0.0);
  EXPECT_LT(ab, 0.5);
}

TEST(MsSsim, MonotoneInNoise) {
  auto a = fixtures::random_image(64, 64, 3, 1);
  auto noise = fixtures::random_image(64, 64, 3, 5);
  double prev = 1.0;
  for (float s : {0.05f, 0.1f, 0.2f, 0.4f}) {
    Image b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b.pixels[i] = a.pixels[i] + s * (noise.pixels[i] - 0.5f);
    const double v = ms_ssim(a, b);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(MsSsim, SizePrecondition) {
  auto a = fixtures::random_image(16, 16, 3, 1);
  EXPECT_THROW(ms_ssim(a, a, 3), ShapeError);  // needs 7 * 2^2 = 28
  EXPECT_NO_THROW(ms_ssim(a, a, 2));
  EXPECT_THROW(ms_ssim(a, a, 0), InvalidParameter);
}

TEST(Frechet, OneDimensionalClosedForm) {
  torch::manual_seed(1);
  auto a = torch::randn({400, 1}, torch::kFloat64);
  a = a - a.mean();
  const double var = a.var().item<double>();
  // N(0, s^2) vs N(0, 4 s^2): (s - 2s)^2 = s^2
  EXPECT_NEAR(frechet_distance(a, 2.0 * a), var, 1e-8);
  EXPECT_NEAR(frechet_distance(a, a + 3.0), 9.0, 1e-8);
}

TEST(Frechet, ShiftInvariantAndZeroOnSelf) {
  torch::manual_seed(2);
  auto a = torch::randn({300, 5}, torch::kFloat64);
  auto c = torch::tensor({1.0, -2.0, 0.5, 0.0, 3.0}, torch::kFloat64);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
  EXPECT_NEAR(frechet_distance(a, a + c), c.square().sum().item<double>(), 1e-6);
}

TEST(Mmd, MatchesDirectSum) {
  torch::manual_seed(3);
  auto x = torch::randn({6, 3}, torch::kFloat64), y = torch::randn({5, 3}, torch::kFloat64) + 1;
  auto k = [](const torch::Tensor& p, const torch::Tensor& q) {
    return std::pow((p * q).sum().item<double>() / 3.0 + 1.0, 3);
  };
  double sxx = 0, syy = 0, sxy = 0;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      if (i != j) sxx += k(x[i], x[j]);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      if (i != j) syy += k(y[i], y[j]);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 5; ++j) sxy += k(x[i], y[j]);
  const double oracle = sxx / 30 + syy / 20 - 2 * sxy / 30;
  EXPECT_NEAR(mmd2_unbiased(x, y), oracle, 1e-9);
}

TEST(Kid, SameDistributionNearZeroAndSeeded) {
  torch::manual_seed(4);
  auto a = torch::randn({200, 8}, torch::kFloat64), b = torch::randn({200, 8}, torch::kFloat64);
  auto k = kernel_inception_distance(a, b, 10, 50, 1);
  EXPECT_EQ(k.subsets.size(), 10u);
  EXPECT_LT(std::abs(k.mean), 4 * k.std_error + 1e-3);
  auto far = kernel_inception_distance(a, b + 2.0, 10, 50, 1);
  EXPECT_GT(far.mean, 10 * std::abs(k.mean));
  EXPECT_EQ(kernel_inception_distance(a, b, 10, 50, 1).mean, k.mean);
  EXPECT_THROW(kernel_inception_distance(a.narrow(0, 0, 20), b, 10, 50, 1), InvalidParameter);
}

TEST(Embedder, PercepZeroOnIdenticalSets) {
  cnn::SmallCnn m(cnn::CnnArch{});
  ToyEmbedder e(m);
  std::vector<Image> imgs = {fixtures::random_image(64, 64, 3, 1), fixtures::random_image(64, 64, 3, 2)};
  EXPECT_NEAR(percep_toy(imgs, imgs, e), 0.0, 1e-9);
  EXPECT_EQ(e.embed(imgs).size(1), 64);
}
