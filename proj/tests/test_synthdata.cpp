#include <gtest/gtest.h>

#include <map>

#include "rls/errors.hpp"
#include "rls/synthdata.hpp"

using namespace rls;
using namespace rls::synth;

// Property: every sampled parameter set respects its class ranges, for many
// seeds and both assays.
TEST(SampleParams, ClassRangesHold) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (auto assay : {Assay::translocation, Assay::golgi}) {
      for (auto label : {ClassLabel::negative, ClassLabel::positive}) {
        for (const auto& p : sample_params(assay, label, 25, seed)) {
          EXPECT_NO_THROW(validate(p));
          EXPECT_EQ(p.assay, assay);
          EXPECT_EQ(p.class_label, label);
          if (assay == Assay::translocation) {
            EXPECT_EQ(p.spot_count, 0);
            if (label == ClassLabel::negative) {
              EXPECT_GE(p.nuclear_ratio, 0.4);
              EXPECT_LE(p.nuclear_ratio, 0.6);
            } else {
              EXPECT_GE(p.nuclear_ratio, 1.8);
              EXPECT_LE(p.nuclear_ratio, 2.2);
            }
          } else {
            EXPECT_GE(p.nuclear_ratio, 0.4);
            EXPECT_LE(p.nuclear_ratio, 0.6);
            if (label == ClassLabel::negative) {
              EXPECT_GE(p.spot_count, 1);
              EXPECT_LE(p.spot_count, 3);
              EXPECT_GE(p.spot_radius_px, 6.0);
              EXPECT_LE(p.spot_radius_px, 9.0);
            } else {
              EXPECT_GE(p.spot_count, 8);
              EXPECT_LE(p.spot_count, 14);
              EXPECT_GE(p.spot_radius_px, 1.5);
              EXPECT_LE(p.spot_radius_px, 3.0);
            }
          }
        }
      }
    }
  }
}

TEST(Validate, RejectsOutOfRange) {
  PhenotypeParams p;
  p.nuclear_ratio = 1.0;  // between the two translocation ranges
  EXPECT_THROW(validate(p), InvalidParameter);
  p = {};
  p.assay = Assay::golgi;
  p.class_label = ClassLabel::positive;
  p.spot_count = 3;
  p.spot_radius_px = 2.0;
  EXPECT_THROW(validate(p), InvalidParameter);
  p = {};
  p.nucleus_row = 1.0;  // nucleus leaves the canvas
  EXPECT_THROW(validate(p), InvalidParameter);
}

TEST(Render, RangeShapeAndDeterminism) {
  for (const auto& p : sample_params(Assay::golgi, ClassLabel::positive, 5, 3)) {
    auto a = render_phenotype(p), b = render_phenotype(p);
    EXPECT_EQ(a.height, kImageSize);
    EXPECT_EQ(a.channels, kChannels);
    EXPECT_EQ(a.pixels, b.pixels);
    for (float v : a.pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Render, NuclearRatioShowsInCleanImage) {
  // At the nucleus centre the reporter channel is the cytoplasm intensity
  // times the nuclear ratio.
  for (const auto& p : sample_params(Assay::translocation, ClassLabel::positive, 5, 8)) {
    auto img = render_clean(p);
    auto g = render_geometry(p);
    const int r = static_cast<int>(std::lround(p.nucleus_row));
    const int c = static_cast<int>(std::lround(p.nucleus_col));
    EXPECT_NEAR(img.at(r, c, 1), std::min(1.0, g.cytoplasm_intensity * p.nuclear_ratio), 0.03);
  }
}

TEST(SoftDisk, HalfAtRadiusAndEdgeWidth) {
  EXPECT_NEAR(soft_disk(5.0, 5.0), 0.5, 1e-12);
  // 10%-90% width equals kEdgeWidthPx.
  double lo = 0, hi = 0;
  for (double t = 0; t < 10; t += 1e-4) {
    if (soft_disk(t, 5.0) >= 0.9) lo = t;
    if (soft_disk(t, 5.0) >= 0.1) hi = t;
  }
  EXPECT_NEAR(hi - lo, kEdgeWidthPx, 1e-3);
}

TEST(SpotProfile, MonotoneAndHalfNearRadius) {
  double prev = 2.0;
  for (double t = 0; t < 6; t += 0.1) {
    const double v = spot_profile(t, 3.0);
    EXPECT_LE(v, prev + 1e-12);
    prev = v;
  }
  EXPECT_NEAR(spot_profile(3.0, 3.0), 0.5, 0.05);
}

TEST(SamplePooled, BalancedAndReproducible) {
  auto a = sample_pooled(40, 5), b = sample_pooled(40, 5);
  ASSERT_EQ(a.size(), 40u);
  std::map<std::pair<Assay, ClassLabel>, int> counts;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].params, b[i].params);
    ++counts[{a[i].params.assay, a[i].params.class_label}];
  }
  for (const auto& [k, v] : counts) EXPECT_EQ(v, 10);
  EXPECT_EQ(sample_pooled(42, 5).size(), 40u);
}

TEST(Params, JsonRoundTrip) {
  for (const auto& p : sample_params(Assay::golgi, ClassLabel::negative, 10, 2))
    EXPECT_EQ(params_from_json(to_json(p)), p);
  EXPECT_THROW(assay_from_string("mitosis"), InvalidParameter);
}
