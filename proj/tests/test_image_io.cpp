#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "osar/image.hpp"
#include "osar/image_io.hpp"
#include "osar/patch.hpp"
#include "osar/rng.hpp"
#include "support/tempdir.hpp"

using namespace osar;
using osar::testing::TempDir;

namespace {

Image ramp(std::size_t w, std::size_t h) {
  Image img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<double>(i % 251) / 250.0;
  return img;
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

}  // namespace

TEST(ImageIo, RawRoundTripIsExact) {
  TempDir dir;
  Image img(2, 2);
  img.pixels = {0.0, 0.5, 0.25, 1.0};
  save_image(img, dir / "a.f32");
  EXPECT_TRUE(std::filesystem::exists(dir / "a.f32.json"));
  const Image back = load_image(dir / "a.f32");
  EXPECT_EQ(back.width, 2u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(ImageIo, RawSizeMismatchIsFormatError) {
  TempDir dir;
  write_bytes(dir / "b.f32", std::string(12, '\0'));
  write_bytes(dir / "b.f32.json", R"({"width": 2, "height": 2, "dtype": "f32"})");
  EXPECT_THROW(load_image(dir / "b.f32"), FormatError);
  write_bytes(dir / "b.f32.json", R"({"width": 2})");
  EXPECT_THROW(load_image(dir / "b.f32"), FormatError);
}

TEST(ImageIo, Pgm16MaxvalNormalizesToOne) {
  TempDir dir;
  std::string pgm = "P5\n# comment\n2 1\n65535\n";
  pgm += std::string("\xff\xff\x00\x00", 4);
  write_bytes(dir / "c.pgm", pgm);
  const Image img = load_image(dir / "c.pgm");
  EXPECT_EQ(img.pixels, (std::vector<double>{65535, 0}));
  EXPECT_EQ(normalize(img).pixels[0], 1.0);
}

TEST(ImageIo, Pgm16RoundTripAfterQuantization) {
  TempDir dir;
  Image img(3, 2);
  img.pixels = {0, 1, 1000.4, 40000.6, 65535, 70000};
  save_image(img, dir / "d.pgm");
  EXPECT_EQ(load_image(dir / "d.pgm").pixels, (std::vector<double>{0, 1, 1000, 40001, 65535, 65535}));
}

TEST(ImageIo, Pgm8Loads) {
  TempDir dir;
  write_bytes(dir / "e.pgm", std::string("P5 2 1 255\n\x10\x20", 13));
  EXPECT_EQ(load_image(dir / "e.pgm").pixels, (std::vector<double>{16, 32}));
}

TEST(ImageIo, TruncatedFilesAreFormatErrors) {
  TempDir dir;
  write_bytes(dir / "t.pgm", "P5\n4 4\n65535\n\x01\x02");
  EXPECT_THROW(load_image(dir / "t.pgm"), FormatError);
  write_bytes(dir / "h.pgm", "P5\n4");
  EXPECT_THROW(load_image(dir / "h.pgm"), FormatError);
  write_bytes(dir / "m.pgm", "P2\n1 1\n255\n0");
  EXPECT_THROW(load_image(dir / "m.pgm"), FormatError);

  Image img = ramp(8, 8);
  for (double& v : img.pixels) v *= 255;
  save_image(img, dir / "p.png");
  auto bytes = detail::read_file(dir / "p.png");
  bytes.resize(bytes.size() / 2);
  detail::write_file(dir / "q.png", bytes.data(), bytes.size());
  EXPECT_THROW(load_image(dir / "q.png"), FormatError);
}

TEST(ImageIo, PngRoundTrip) {
  TempDir dir;
  Image img(3, 2);
  img.pixels = {0, 17, 128, 200, 254, 255};
  save_image(img, dir / "r.png");
  EXPECT_EQ(load_image(dir / "r.png").pixels, img.pixels);
}

TEST(ImageIo, MissingFileIsIoError) { EXPECT_THROW(load_image("/nonexistent/x.png"), IoError); }

TEST(ImageIo, UnknownExtensionIsFormatError) { EXPECT_THROW(format_from_path("x.bmp"), FormatError); }

TEST(Normalize, LinearMapAndInverse) {
  Image img(3, 1);
  img.pixels = {-1000, 0, 1000};
  const Image n = normalize(img);
  EXPECT_EQ(n.pixels, (std::vector<double>{0, 0.5, 1.0}));
  const Image back = denormalize(n);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-6);
}

TEST(Normalize, RoundTripOnRandomImages) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Image img(17, 9);
    const double scale = rng.uniform(1e-3, 1e4), shift = rng.uniform(-1e4, 1e4);
    for (double& v : img.pixels) v = shift + scale * rng.uniform();
    const Image n = normalize(img);
    for (double v : n.pixels) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    const Image back = denormalize(n);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-6);
  }
}

TEST(Normalize, ConstantImageWarnsAndRestores) {
  const Image img(4, 4, 500.0);
  const Image n = normalize(img);
  for (double v : n.pixels) EXPECT_EQ(v, 0.0);
  EXPECT_FALSE(n.warnings.empty());
  for (double v : denormalize(n).pixels) EXPECT_EQ(v, 500.0);
}

TEST(Rois, JsonRoundTripAndValidation) {
  const std::vector<Roi> rois{{3, 7, PatchLabel::artifact}, {0, 0, PatchLabel::normal}};
  EXPECT_EQ(rois_from_json(rois_to_json(rois)), rois);
  EXPECT_THROW(parse_rois(R"({"patch_size": 16, "rois": []})"), FormatError);
  EXPECT_THROW(parse_rois(R"({"patch_size": 32, "rois": [{"x": 1, "y": 2, "label": "B"}]})"), FormatError);
  EXPECT_THROW(parse_rois(R"({"patch_size": 32, "rois": [{"x": -1, "y": 2, "label": "A"}]})"), FormatError);
  EXPECT_THROW(parse_rois("{not json"), FormatError);
  EXPECT_THROW(validate_rois({{40, 0, PatchLabel::artifact}}, Image(64, 64)), SizeError);
  EXPECT_NO_THROW(validate_rois({{32, 32, PatchLabel::artifact}}, Image(64, 64)));
}

TEST(SlicePatches, GridOriginsAndClamping) {
  auto origins = [](const std::vector<Patch>& ps) {
    std::vector<std::pair<std::size_t, std::size_t>> o;
    for (const auto& p : ps) o.emplace_back(p.x, p.y);
    return o;
  };
  using O = std::vector<std::pair<std::size_t, std::size_t>>;
  EXPECT_EQ(origins(slice_patches(ramp(64, 64), 32)), (O{{0, 0}, {32, 0}, {0, 32}, {32, 32}}));
  EXPECT_EQ(origins(slice_patches(ramp(48, 48), 32)), (O{{0, 0}, {16, 0}, {0, 16}, {16, 16}}));
  EXPECT_EQ(slice_patches(ramp(256, 256), 16).size(), 225u);
  EXPECT_EQ(slice_patches(ramp(32, 32), 32).size(), 1u);
  EXPECT_THROW(slice_patches(ramp(31, 64), 32), SizeError);
}

TEST(SlicePatches, EveryPixelCoveredForAnyStride) {
  for (std::size_t stride = 1; stride <= 32; stride += 3)
    for (auto [w, h] : {std::pair<std::size_t, std::size_t>{32, 32}, {45, 70}, {97, 33}}) {
      std::vector<int> hits(w * h, 0);
      const Image img = ramp(w, h);
      for (const Patch& p : slice_patches(img, stride)) {
        for (std::size_t r = 0; r < kPatchSize; ++r)
          for (std::size_t c = 0; c < kPatchSize; ++c) {
            ++hits[(p.y + r) * w + p.x + c];
            ASSERT_EQ(p(c, r), static_cast<float>(img(p.x + c, p.y + r)));
          }
      }
      EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int v) { return v > 0; }))
          << w << "x" << h << " stride " << stride;
    }
}

TEST(Augmentation, FlipsAndRotationsPreservePixelMultiset) {
  const Patch p = extract_patch(ramp(40, 40), 3, 5);
  auto sorted = [](const Patch& q) {
    auto v = q.values;
    std::sort(v.begin(), v.end());
    return v;
  };
  for (auto a : {Augmentation::identity, Augmentation::flip_h, Augmentation::flip_v, Augmentation::rot90,
                 Augmentation::rot180, Augmentation::rot270})
    EXPECT_EQ(sorted(apply_augmentation(p, a)), sorted(p));
  EXPECT_EQ(apply_augmentation(p, Augmentation::identity).values, p.values);
  const Patch r180 = apply_augmentation(p, Augmentation::rot180);
  EXPECT_EQ(apply_augmentation(r180, Augmentation::rot180).values, p.values);
  EXPECT_EQ(flip_horizontal(flip_horizontal(p)).values, p.values);
  EXPECT_EQ(rotate90(p)(kPatchSize - 1, 0), p(0, 0));  // clockwise: top-left goes to top-right
}

TEST(Augmentation, BalancedCountsAndInheritedLabels) {
  const Image img = ramp(128, 96);
  const std::vector<Roi> rois{{0, 0, PatchLabel::artifact}, {90, 60, PatchLabel::artifact}, {10, 40, PatchLabel::normal},
                              {50, 5, PatchLabel::normal},  {96, 0, PatchLabel::normal},   {0, 64, PatchLabel::normal},
                              {60, 60, PatchLabel::artifact}};
  Rng rng(8);
  const auto out = augment_rois(rois, img, rng, 500);
  ASSERT_EQ(out.size(), 1000u);
  EXPECT_EQ(std::count_if(out.begin(), out.end(), [](const auto& s) { return s.label == PatchLabel::artifact; }), 500);
  for (const auto& s : out)
    for (float v : s.patch.values) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
}

TEST(Augmentation, TranslationsStayInsideImage) {
  // ROIs flush against every border force out-of-image shift candidates
  const Image img = ramp(32, 32);
  const std::vector<Roi> rois{{0, 0, PatchLabel::artifact}, {0, 0, PatchLabel::normal}};
  Rng rng(2);
  EXPECT_EQ(augment_rois(rois, img, rng, 200).size(), 400u);
}

TEST(Augmentation, SingleClassIsContractError) {
  Rng rng(1);
  EXPECT_THROW(augment_rois({{0, 0, PatchLabel::normal}}, ramp(64, 64), rng, 10), ContractError);
}

TEST(Augmentation, DeterministicUnderSeed) {
  const Image img = ramp(100, 100);
  const std::vector<Roi> rois{{10, 10, PatchLabel::artifact}, {50, 50, PatchLabel::normal}};
  Rng a(77), b(77);
  const auto x = augment_rois(rois, img, a, 50), y = augment_rois(rois, img, b, 50);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i].patch.values, y[i].patch.values);
}
