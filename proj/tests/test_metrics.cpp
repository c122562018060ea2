#include <gtest/gtest.h>

#include <cmath>

#include "osar/metrics.hpp"
#include "osar/rng.hpp"

using namespace osar;

namespace {

/// Region of `n` pixels with exactly the given population mean and std:
/// half at mean - std, half at mean + std.
Image two_level(double mean, double std, std::size_t n = 64) {
  Image img(n, 1);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = i % 2 ? mean + std : mean - std;
  return img;
}

Region whole(const Image& img) { return {0, 0, img.width, img.height}; }

}  // namespace

TEST(RegionSnr, ReferenceMeanAndStdGiveSnr) {
  // std back-derived from a reference mean/SNR pair as mean / snr
  const Image img = two_level(54.0, 79.41);
  const MetricReport r = region_snr(img, whole(img));
  EXPECT_NEAR(r.mean, 54.0, 1e-9);
  EXPECT_NEAR(r.std, 79.41, 1e-9);
  EXPECT_NEAR(r.snr, 0.68, 0.005);
}

TEST(RegionSnr, ConstantRegionFlagsInfinity) {
  const Image img(8, 8, 3.0);
  const MetricReport r = region_snr(img, whole(img));
  EXPECT_EQ(r.std, 0.0);
  EXPECT_TRUE(r.snr_infinite);
  EXPECT_TRUE(std::isinf(r.snr));
}

TEST(RegionSnr, ZeroMeanGivesZeroSnr) {
  Image img(2, 2);
  img.pixels = {1, -1, 1, -1};
  const MetricReport r = region_snr(img, whole(img));
  EXPECT_EQ(r.mean, 0.0);
  EXPECT_EQ(r.snr, 0.0);
}

TEST(RegionSnr, PopulationStd) {
  Image img(2, 2);
  img.pixels = {1, 2, 3, 4};
  EXPECT_NEAR(region_snr(img, whole(img)).std, std::sqrt(1.25), 1e-15);
}

TEST(RegionSnr, InvalidRegions) {
  const Image img(10, 10, 1.0);
  EXPECT_THROW(region_snr(img, {8, 8, 4, 4}), SizeError);
  EXPECT_THROW(region_snr(img, {0, 0, 1, 3}), SizeError);
  EXPECT_NO_THROW(region_snr(img, {0, 0, 2, 2}));
}

TEST(RegionSnr, ScaleInvarianceAndShiftMonotonicity) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    Image img(16, 16);
    for (double& v : img.pixels) v = rng.uniform(1.0, 5.0);
    const MetricReport base = region_snr(img, whole(img));
    Image scaled = img, shifted = img;
    const double k = rng.uniform(0.1, 100.0), c = rng.uniform(0.01, 10.0);
    for (double& v : scaled.pixels) v *= k;
    for (double& v : shifted.pixels) v += c;
    EXPECT_NEAR(region_snr(scaled, whole(img)).snr, base.snr, 1e-9 * base.snr);
    EXPECT_GT(region_snr(shifted, whole(img)).snr, base.snr);
  }
}

TEST(Improvement, ArithmeticOnReferencePairs) {
  MetricReport in, out;
  in.snr = 0.68;
  out.snr = 2.35;
  in.mean = out.mean = 1.0;
  EXPECT_NEAR(improvement(in, out).delta_snr_pct, 245.588, 0.01);
  in.mean = 58.8;
  out.mean = 59.7;
  in.snr = out.snr = 1.0;
  EXPECT_NEAR(improvement(in, out).delta_mean_pct, 1.5306, 1e-3);
}

TEST(Improvement, SelfComparisonIsZero) {
  Rng rng(2);
  Image img(12, 12);
  for (double& v : img.pixels) v = rng.uniform(10, 20);
  const MetricReport r = compare(img, img, {2, 2, 8, 8});
  EXPECT_EQ(r.delta_snr_pct, 0.0);
  EXPECT_EQ(r.delta_mean_pct, 0.0);
  EXPECT_FALSE(r.delta_undefined);
}

TEST(Improvement, ZeroBaselineIsUndefined) {
  MetricReport in, out;
  out.snr = 2;
  out.mean = 1;
  EXPECT_TRUE(improvement(in, out).undefined);
}

TEST(HomogeneousRegion, FindsConstantBlockAndBreaksTies) {
  Rng rng(3);
  Image img(80, 80);
  for (double& v : img.pixels) v = rng.uniform();
  for (std::size_t y = 40; y < 72; ++y)
    for (std::size_t x = 20; x < 52; ++x) img(x, y) = 0.5;
  const Region r = find_homogeneous_region(img, {0, 0, 80, 80});
  EXPECT_EQ(r, (Region{20, 40, 32, 32}));

  const Image flat(64, 64, 1.0);
  EXPECT_EQ(find_homogeneous_region(flat, {0, 0, 64, 64}), (Region{0, 0, 32, 32}));
  EXPECT_THROW(find_homogeneous_region(flat, {0, 0, 20, 64}), SizeError);
}

TEST(HomogeneousRegion, BeatsEveryStride8Competitor) {
  Rng rng(4);
  Image img(72, 72);
  for (double& v : img.pixels) v = rng.uniform();
  const Region roi{0, 0, 72, 72};
  auto variance = [&](const Region& r) { return std::pow(region_snr(img, r).std, 2); };
  const double best = variance(find_homogeneous_region(img, roi));
  for (std::size_t y = 0; y + 32 <= 72; y += 8)
    for (std::size_t x = 0; x + 32 <= 72; x += 8) EXPECT_LE(best, variance({x, y, 32, 32}) + 1e-15);
}

TEST(MetricsJson, RoundTripIncludingInfinity) {
  MetricReport r;
  r.region = {1, 2, 3, 4};
  r.mean = 5;
  r.std = 0;
  r.snr = std::numeric_limits<double>::infinity();
  r.snr_infinite = true;
  const auto j = metrics_to_json(r);
  EXPECT_TRUE(j["snr"].is_null());
  const MetricReport back = metrics_from_json(j);
  EXPECT_TRUE(back.snr_infinite);
  EXPECT_EQ(back.region, r.region);
  EXPECT_EQ(parse_region("3,4,32,16"), (Region{3, 4, 32, 16}));
  EXPECT_THROW(parse_region("3,4,32"), FormatError);
  EXPECT_THROW(parse_region("-1,4,32,32"), FormatError);
}
