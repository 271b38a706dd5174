#include <gtest/gtest.h>

#include <cmath>

#include "rls/degrade.hpp"
#include "rls/errors.hpp"
#include "test_util.hpp"

using namespace rls;
using namespace rls::degrade;

TEST(CubicKernel, KnownValues) {
  // (a+2)|x|^3 - (a+3)|x|^2 + 1 on [0,1], a|x|^3 - 5a|x|^2 + 8a|x| - 4a on [1,2]
  EXPECT_DOUBLE_EQ(cubic_kernel(0.0), 1.0);
  EXPECT_DOUBLE_EQ(cubic_kernel(1.0), 0.0);
  EXPECT_DOUBLE_EQ(cubic_kernel(2.0), 0.0);
  EXPECT_DOUBLE_EQ(cubic_kernel(0.5), 0.5625);
  EXPECT_DOUBLE_EQ(cubic_kernel(-0.5), 0.5625);
  EXPECT_DOUBLE_EQ(cubic_kernel(1.5), -0.0625);
  EXPECT_DOUBLE_EQ(cubic_kernel(2.5), 0.0);
}

TEST(ReflectIndex, HalfSampleSymmetric) {
  EXPECT_EQ(reflect_index(-1, 4), 0);
  EXPECT_EQ(reflect_index(-2, 4), 1);
  EXPECT_EQ(reflect_index(4, 4), 3);
  EXPECT_EQ(reflect_index(5, 4), 2);
  EXPECT_EQ(reflect_index(8, 4), 0);
  for (int i = -20; i < 20; ++i) {
    const int r = reflect_index(i, 5);
    EXPECT_GE(r, 0);
    EXPECT_LT(r, 5);
  }
}

TEST(BicubicMatrix, RowsSumToOne) {
  for (auto [in, out] : {std::pair{64, 4}, {64, 8}, {8, 64}, {64, 64}, {7, 3}}) {
    auto m = bicubic_matrix(in, out);
    ASSERT_EQ(m.size(0), out);
    ASSERT_EQ(m.size(1), in);
    auto rows = m.sum(1);
    EXPECT_LT((rows - 1.0).abs().max().item<double>(), 1e-12) << in << "->" << out;
  }
}

TEST(BicubicMatrix, IdentityAtSameSize) {
  auto m = bicubic_matrix(16, 16);
  EXPECT_LT((m - torch::eye(16, torch::kFloat64)).abs().max().item<double>(), 1e-12);
}

TEST(Downscale, ConstantImageIsPreserved) {
  Image x(64, 64, 3, 0.37f);
  for (int f : {8, 16}) {
    auto y = downscale_bicubic(x, f);
    EXPECT_EQ(y.height, 64 / f);
    for (float v : y.pixels) EXPECT_NEAR(v, 0.37f, 1e-5);
  }
}

TEST(Downscale, Linearity) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = fixtures::random_image(64, 64, 3, s);
    auto b = fixtures::random_image(64, 64, 3, s + 100);
    const float alpha = 0.3f + 0.1f * s, beta = -1.7f;
    Image mix(64, 64, 3);
    for (std::size_t i = 0; i < mix.size(); ++i) mix.pixels[i] = alpha * a.pixels[i] + beta * b.pixels[i];
    auto da = downscale_bicubic(a, 16), db = downscale_bicubic(b, 16), dm = downscale_bicubic(mix, 16);
    for (std::size_t i = 0; i < dm.size(); ++i)
      EXPECT_NEAR(dm.pixels[i], alpha * da.pixels[i] + beta * db.pixels[i], 1e-5);
  }
}

TEST(Downscale, AdjointIdentity) {
  for (int f : {8, 16}) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto x = fixtures::random_image(64, 64, 3, s);
      auto u = fixtures::random_image(64 / f, 64 / f, 3, s + 7);
      const double lhs = fixtures::dot(downscale_bicubic(x, f), u);
      const double rhs = fixtures::dot(x, downscale_adjoint(u, f, 64, 64));
      EXPECT_NEAR(lhs, rhs, 1e-5 * std::abs(lhs));
    }
  }
}

TEST(Downscale, TensorMatchesImagePath) {
  auto x = fixtures::random_image(64, 64, 3, 11);
  auto y = downscale_bicubic(x, 8);
  auto t = downscale_tensor(to_tensor(x).unsqueeze(0), 8);
  auto ref = to_tensor(y).unsqueeze(0);
  EXPECT_LT((t - ref).abs().max().item<double>(), 1e-5);
}

TEST(Upscale, ConstantRoundTrip) {
  Image y(4, 4, 3, 0.5f);
  auto x = upscale_bicubic(y, 16);
  EXPECT_EQ(x.height, 64);
  for (float v : x.pixels) EXPECT_NEAR(v, 0.5f, 1e-5);
}

TEST(Observe, DeterministicAndClipped) {
  auto x = fixtures::random_image(64, 64, 3, 1);
  DegradationSpec s;
  s.downscale_factor = 8;
  s.extra = {Corruption::gaussian_noise(0.2), Corruption::salt_pepper(0.1)};
  auto a = observe(x, s, 42), b = observe(x, s, 42), c = observe(x, s, 43);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
  for (float v : a.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Observe, CleanSpecEqualsClippedDownscale) {
  auto x = fixtures::random_image(64, 64, 3, 2);
  auto y = observe(x, DegradationSpec{}, 0);
  auto d = downscale_bicubic(x, 16);
  d.clip01();
  EXPECT_EQ(y.pixels, d.pixels);
}

TEST(Corrupt, SaltPepperDensity) {
  Image y(64, 64, 1, 0.5f);
  DegradationSpec s;
  s.extra = {Corruption::salt_pepper(0.1)};
  auto c = corrupt(y, s, 5);
  int flipped = 0;
  for (float v : c.pixels) flipped += (v == 0.0f || v == 1.0f);
  EXPECT_NEAR(flipped / 4096.0, 0.1, 0.03);
}

TEST(GaussianBlur, PreservesConstantsAndMass) {
  Image c(16, 16, 2, 0.25f);
  for (float v : gaussian_blur(c, 1.0).pixels) EXPECT_NEAR(v, 0.25f, 1e-6);
  auto r = fixtures::random_image(16, 16, 1, 9);
  auto b = gaussian_blur(r, 1.5);
  EXPECT_NEAR(b.mean(), r.mean(), 1e-3);
}

TEST(Spec, JsonRoundTripAndStrictness) {
  DegradationSpec s;
  s.downscale_factor = 8;
  s.extra = {Corruption::gaussian_blur(1.0), Corruption::gaussian_noise(0.05)};
  EXPECT_EQ(spec_from_json(to_json(s)), s);
  auto j = to_json(s);
  j["unexpected"] = 1;
  EXPECT_THROW(spec_from_json(j), InvalidParameter);
}

TEST(Spec, RejectsUnsupportedFactors) {
  DegradationSpec s;
  s.downscale_factor = 3;
  EXPECT_THROW(s.validate(64), InvalidParameter);
  s.downscale_factor = 128;
  EXPECT_THROW(s.validate(64), InvalidParameter);
}

TEST(LaplaceLoglik, MatchesL1) {
  std::vector<float> r = {0.5f, -0.25f, 1.0f};
  EXPECT_DOUBLE_EQ(laplace_loglik(r), -1.75);
  EXPECT_DOUBLE_EQ(laplace_loglik(r, 0.5), -3.5);
}
