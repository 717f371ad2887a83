#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "medfe/data.hpp"
#include "medfe/image_io.hpp"
#include "medfe/metrics.hpp"
#include "medfe/oracles.hpp"
#include "test_util.hpp"

using namespace medfe;
using medfe::test::max_abs_diff;

namespace {

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor quantized_image(std::int64_t h, std::int64_t w, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(3 * h * w));
  for (auto& x : v) x = dequantize(static_cast<std::uint8_t>(rng.below(256)));
  return Tensor::from(Shape{1, 3, h, w}, std::move(v));
}

double variance(const std::vector<double>& v) {
  double m = 0, s = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(CenterMask, Examples) {
  auto m = gen_center_mask(256, 256);
  EXPECT_EQ(m.hole_ratio(), 0.25);
  auto box = [&](const Mask& mask) {
    std::int64_t r0 = 1 << 20, r1 = -1, c0 = 1 << 20, c1 = -1;
    for (std::int64_t y = 0; y < mask.height(); ++y)
      for (std::int64_t x = 0; x < mask.width(); ++x)
        if (mask.tensor().at(0, 0, y, x) == 0.0) r0 = std::min(r0, y), r1 = std::max(r1, y), c0 = std::min(c0, x), c1 = std::max(c1, x);
    return std::array<std::int64_t, 4>{r0, c0, r1 - r0 + 1, c1 - c0 + 1};
  };
  EXPECT_EQ(box(m), (std::array<std::int64_t, 4>{64, 64, 128, 128}));
  EXPECT_EQ(box(gen_center_mask(64, 64)), (std::array<std::int64_t, 4>{16, 16, 32, 32}));
  auto small = gen_center_mask(4, 4);
  EXPECT_EQ(values(small.tensor()), (std::vector<double>{1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1}));
  EXPECT_EQ(box(gen_center_mask(5, 7)), (std::array<std::int64_t, 4>{1, 2, 2, 3}));
}

TEST(IrregularMask, DeterministicPerSeed) {
  for (int bucket = 0; bucket < 5; ++bucket) {
    EXPECT_EQ(values(gen_irregular_mask(64, 64, bucket, 42).tensor()),
              values(gen_irregular_mask(64, 64, bucket, 42).tensor()));
  }
  EXPECT_NE(values(gen_irregular_mask(64, 64, 2, 1).tensor()), values(gen_irregular_mask(64, 64, 2, 2).tensor()));
}

TEST(IrregularMask, RatiosStayInsideBucketsOverThousandSeeds) {
  for (int bucket = 0; bucket < 5; ++bucket) {
    const auto& b = mask_buckets()[bucket];
    double lo = 1, hi = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const double r = gen_irregular_mask(64, 64, bucket, seed).hole_ratio();
      lo = std::min(lo, r);
      hi = std::max(hi, r);
    }
    EXPECT_GE(lo, std::max(b.lo, kMinHoleRatio)) << b.label;
    EXPECT_LE(hi, b.hi) << b.label;
  }
}

TEST(IrregularMask, FullSizeBuckets) {
  for (int bucket = 0; bucket < 5; ++bucket)
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double r = gen_irregular_mask(256, 256, bucket, seed).hole_ratio();
      EXPECT_GE(r, mask_buckets()[bucket].lo);
      EXPECT_LE(r, mask_buckets()[bucket].hi);
    }
  EXPECT_THROW(gen_irregular_mask(64, 64, 7, 0), ContractViolation);
}

TEST(IrregularMask, HoleRatioIsOneMinusMean) {
  auto m = gen_irregular_mask(32, 32, 3, 9);
  double s = 0;
  for (double v : m.tensor().values()) s += v;
  EXPECT_EQ(m.hole_ratio(), 1.0 - s / 1024.0);
}

TEST(StructureImage, ConstantIsFixedPoint) {
  auto c = Tensor::full(Shape{1, 3, 8, 8}, 0.3);
  EXPECT_EQ(values(structure_image(c)), values(c));
}

TEST(StructureImage, ReducesTotalVariation) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto img = rand_uniform(Shape{1, 3, 16, 16}, rng, -1, 1);
    EXPECT_LE(total_variation(structure_image(img)), total_variation(img));
    auto synth = synth_image(seed, 32);
    EXPECT_LE(total_variation(structure_image(synth)), total_variation(synth));
  }
}

TEST(StructureImage, KeepsStepEdgeAndRemovesNoise) {
  Rng rng(3);
  const int H = 32, W = 32;
  std::vector<double> clean(3 * H * W), noisy(3 * H * W);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int i = (c * H + y) * W + x;
        clean[i] = x < 13 ? -0.5 : 0.5;
        noisy[i] = clean[i] + 0.02 * rng.normal();
      }
  auto out = structure_image(Tensor::from(Shape{1, 3, H, W}, noisy));
  std::vector<double> before, after;
  for (int i = 0; i < 3 * H * W; ++i) {
    before.push_back(noisy[i] - clean[i]);
    after.push_back(out.values()[i] - clean[i]);
  }
  EXPECT_LE(variance(after) * 10, variance(before));
  // Edge position: the column with the largest mean jump.
  for (int y = 0; y < H; ++y) {
    int best = 0;
    double jump = 0;
    for (int x = 0; x + 1 < W; ++x) {
      const double d = std::abs(out.at(0, 0, y, x + 1) - out.at(0, 0, y, x));
      if (d > jump) jump = d, best = x;
    }
    EXPECT_LE(std::abs(best - 12), 1) << y;
  }
}

TEST(StructureImage, SecondApplicationMovesLess) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto img = synth_image(seed, 32);
    auto once = structure_image(img), twice = structure_image(once);
    double d1 = 0, d2 = 0;
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      d1 += std::pow(once.values()[i] - img.values()[i], 2);
      d2 += std::pow(twice.values()[i] - once.values()[i], 2);
    }
    EXPECT_LE(d2, d1);
  }
}

TEST(Synth, DeterministicAndClamped) {
  auto a = synth_sample(5, 64), b = synth_sample(5, 64);
  EXPECT_EQ(values(a.image), values(b.image));
  EXPECT_EQ(values(a.structure), values(b.structure));
  EXPECT_NE(values(synth_image(6, 64)), values(a.image));
  for (double v : a.image.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(a.structure.shape(), a.image.shape());
  EXPECT_LE(total_variation(a.structure), total_variation(a.image));
}

TEST(Synth, CorpusTimingBudget) {
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t i = 0; i < 512; ++i) synth_sample(i, 64);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(s, 10.0);
}

TEST(Metrics, IdentityAndOffset) {
  Rng rng(1);
  auto a = rand_uniform(Shape{1, 3, 16, 16}, rng, -0.8, 0.8);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  // +0.1 in [0, 1] units is +0.2 in [-1, 1] units.
  EXPECT_NEAR(psnr(add_scalar(a, 0.2), a), 20.0, 1e-9);
  EXPECT_THROW(psnr(a, Tensor::zeros(Shape{1, 3, 8, 8})), ContractViolation);
  EXPECT_THROW(ssim(Tensor::zeros(Shape{1, 3, 6, 6}), Tensor::zeros(Shape{1, 3, 6, 6})), ContractViolation);
}

TEST(Metrics, SsimMatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto a = rand_uniform(Shape{2, 3, 12, 15}, rng, -1, 1);
    auto b = add(a, randn(a.shape(), rng, 0.3));
    const double s = ssim(a, b);
    EXPECT_LE(std::abs(s - oracle::ssim(a, b)), 1e-8);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Metrics, PsnrFallsWithNoise) {
  Rng rng(2);
  auto a = rand_uniform(Shape{1, 3, 32, 32}, rng, -0.5, 0.5);
  auto noise = randn(a.shape(), rng);
  double previous = 1e9;
  for (double sigma : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    const double p = psnr(add(a, scale(noise, sigma)), a);
    EXPECT_LT(p, previous);
    previous = p;
  }
}

TEST(Metrics, HoleL1AndMeanFill) {
  auto img = Tensor::from(Shape{1, 1, 2, 2}, {1, 3, 5, 0});
  Mask m(Tensor::from(Shape{1, 1, 2, 2}, {1, 1, 1, 0}));
  EXPECT_EQ(values(mean_fill(img, m)), (std::vector<double>{1, 3, 5, 3}));
  EXPECT_EQ(hole_l1(img, mean_fill(img, m), m), 3.0);
  EXPECT_EQ(hole_l1(img, img, Mask::ones(1, 2, 2)), 0.0);
}

TEST(ImageIo, WhitePixelBytes) {
  const std::string bytes = encode_ppm(Tensor::full(Shape{1, 3, 1, 1}, 1.0));
  EXPECT_EQ(bytes, std::string("P6\n1 1\n255\n\xff\xff\xff", 14));
}

TEST(ImageIo, PayloadLength) {
  const std::string bytes = encode_ppm(Tensor::zeros(Shape{1, 3, 256, 256}));
  EXPECT_EQ(bytes.size(), std::string("P6\n256 256\n255\n").size() + 196608);
  EXPECT_EQ(encode_ppm(Tensor::zeros(Shape{1, 3, 3, 5})).size(), 11u + 45u);
}

TEST(ImageIo, RoundTripsQuantizedImages) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    auto img = quantized_image(static_cast<std::int64_t>(rng.range(1, 20)), static_cast<std::int64_t>(rng.range(1, 20)), rng);
    auto back = decode_ppm(encode_ppm(img));
    EXPECT_EQ(values(back), values(img));
    EXPECT_EQ(encode_ppm(back), encode_ppm(img));
  }
}

TEST(ImageIo, QuantizeRoundsHalfUp) {
  EXPECT_EQ(quantize(-1.0), 0);
  EXPECT_EQ(quantize(1.0), 255);
  EXPECT_EQ(quantize(2.0 * 127.5 / 255.0 - 1.0), 128);
  EXPECT_EQ(quantize(0.0), 128);
}

TEST(ImageIo, ParseErrorsCarryOffsets) {
  auto offset_of = [](const std::string& bytes) -> std::size_t {
    try {
      decode_ppm(bytes);
    } catch (const ParseError& e) {
      return e.offset();
    }
    return std::string::npos;
  };
  EXPECT_EQ(offset_of("P5\n1 1\n255\n"), 0u);
  EXPECT_EQ(offset_of("P6\nx 1\n255\n"), 3u);
  EXPECT_EQ(offset_of("P6\n2 2\n255\n\x01\x02"), 13u);
  EXPECT_EQ(offset_of("P6\n1 1\n65535\n"), 12u);
  EXPECT_EQ(offset_of(std::string("P6\n1 1\n255\n\xff\xff\xff", 14)), std::string::npos);
  EXPECT_EQ(offset_of("P6\n# comment\n1 1\n255\n\xff\xff\xff"), std::string::npos);
}

TEST(ImageIo, MaskFilesAndManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "medfe_io_test";
  std::filesystem::create_directories(dir);
  auto mask = gen_irregular_mask(16, 16, 1, 3);
  write_pgm_mask((dir / "m.pgm").string(), mask);
  EXPECT_EQ(values(read_pgm_mask((dir / "m.pgm").string()).tensor()), values(mask.tensor()));
  write_manifest((dir / "list.tsv").string(), {{"a.ppm", "b.ppm", "m.pgm"}});
  auto entries = read_manifest((dir / "list.tsv").string());
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].mask, (dir / "m.pgm").string());
  detail::write_file((dir / "bad.tsv").string(), "# header\na.ppm\tb.ppm\n");
  try {
    read_manifest((dir / "bad.tsv").string());
    ADD_FAILURE();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 9u);
  }
  EXPECT_THROW(read_ppm((dir / "missing.ppm").string()), IoError);
  std::filesystem::remove_all(dir);
}
