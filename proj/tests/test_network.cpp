#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "medfe/data.hpp"
#include "medfe/grad_check.hpp"
#include "medfe/losses.hpp"
#include "medfe/network.hpp"
#include "test_util.hpp"

using namespace medfe;
using medfe::test::max_abs_diff;

namespace {

Tensor random_image(std::int64_t n, std::int64_t size, Rng& rng) {
  return rand_uniform(Shape{n, 3, size, size}, rng, -1.0, 1.0);
}

std::vector<double> copy(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Encode, DeskFeatureSizes) {
  Rng rng(1);
  auto g = Generator::make(GeneratorConfig::preset(Preset::Desk), rng);
  auto img = random_image(1, 64, rng);
  auto feats = encode(generator_input(img, gen_center_mask(64, 64)), g);
  ASSERT_EQ(feats.size(), 6u);
  const std::int64_t sizes[] = {32, 16, 8, 4, 2, 1};
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(feats[i].shape().h(), sizes[i]);
    EXPECT_EQ(feats[i].shape().c(), g.cfg.encoder_channels[i]);
  }
}

TEST(Encode, FullSizeArithmetic) {
  auto full = GeneratorConfig::preset(Preset::Full);
  const std::int64_t sizes[] = {128, 64, 32, 16, 8, 4};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(full.level_size(i), sizes[i]);
  EXPECT_EQ(full.reorg_size(), 32);
  EXPECT_EQ(GeneratorConfig::preset(Preset::Desk).reorg_size(), 8);

  // Desk widths at 256x256 exercise the same arithmetic through the real encoder.
  auto cfg = GeneratorConfig::preset(Preset::Desk);
  cfg.image_size = 256;
  Rng rng(2);
  auto g = Generator::make(cfg, rng);
  NoGradGuard guard;
  auto feats = encode(generator_input(random_image(1, 256, rng), gen_center_mask(256, 256)), g);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(feats[i].shape().h(), sizes[i]);
}

TEST(Encode, IndivisibleSizeIsViolation) {
  Rng rng(3);
  auto g = Generator::make(GeneratorConfig::preset(Preset::Desk), rng);
  EXPECT_THROW(encode(Tensor::zeros(Shape{1, 4, 48, 48}), g), ContractViolation);
  auto cfg = GeneratorConfig::preset(Preset::Desk);
  cfg.image_size = 96;
  EXPECT_THROW(Generator::make(cfg, rng), ContractViolation);
}

TEST(Encode, ZeroInputGivesFiniteFeatures) {
  Rng rng(4);
  auto g = Generator::make(GeneratorConfig::preset(Preset::Desk), rng);
  for (auto& l : g.encoder) l.bias = randn(l.bias.shape(), rng, 0.5, true);
  auto feats = encode(generator_input(Tensor::zeros(Shape{1, 3, 64, 64}), Mask::zeros(1, 64, 64)), g);
  for (const auto& f : feats) EXPECT_TRUE(f.all_finite());
}

TEST(Reorganize, ConstantLayersGiveConstantFeatures) {
  Rng rng(5);
  auto g = Generator::make(GeneratorConfig::preset(Preset::Desk), rng);
  std::vector<Tensor> feats;
  for (int i = 0; i < 6; ++i) {
    const std::int64_t s = g.cfg.level_size(i);
    feats.push_back(Tensor::full(Shape{1, g.cfg.encoder_channels[i], s, s}, 0.3 + 0.1 * i));
  }
  for (auto which : {FeatureGroup::Texture, FeatureGroup::Structure}) {
    auto f = reorganize(feats, which, g);
    EXPECT_EQ(f.shape(), (Shape{1, g.cfg.feature_width, 8, 8}));
    for (std::int64_t c = 0; c < f.shape().c(); ++c)
      for (std::int64_t i = 0; i < 64; ++i) EXPECT_NEAR(f.values()[c * 64 + i], f.values()[c * 64], 1e-12);
  }
}

TEST(BranchFill, AllOnesMaskIsPlainConvStacks) {
  Rng rng(6);
  auto branch = FillingBranch::make(4, {3, 5, 7}, rng);
  for (auto& stream : branch.streams)
    for (auto& l : stream) l.conv.bias = randn(l.conv.bias.shape(), rng, 0.2, true);
  auto x = randn(Shape{1, 4, 8, 8}, rng);
  auto r = branch_fill(x, Mask::ones(1, 8, 8), branch);
  std::vector<Tensor> outs;
  for (auto& stream : branch.streams) {
    Tensor y = x;
    for (auto& l : stream) y = leaky_relu(conv2d(y, l.conv.weight, l.conv.bias, 1, l.conv.padding));
    outs.push_back(y);
  }
  auto expected = branch.merge.forward(concat(outs, 1));
  EXPECT_LE(max_abs_diff(r.filled.values(), expected.values()), 1e-10);
  EXPECT_TRUE(r.mask.all_valid());
}

TEST(BranchFill, SevenStreamClosesCentreHoleAt32) {
  Rng rng(7);
  auto branch = FillingBranch::make(4, {3, 5, 7}, rng);
  auto r = branch_fill(Tensor::zeros(Shape{1, 4, 32, 32}), gen_center_mask(32, 32), branch);
  EXPECT_TRUE(r.stream_masks[2].all_valid());
  EXPECT_FALSE(r.stream_masks[0].all_valid());
  EXPECT_TRUE(r.mask.all_valid());
}

TEST(BranchFill, ZeroFeaturesGiveConstantMaps) {
  Rng rng(8);
  auto branch = FillingBranch::make(4, {3, 5, 7}, rng);
  for (auto& stream : branch.streams)
    for (auto& l : stream) l.conv.bias = Tensor::zeros(l.conv.bias.shape(), true);
  branch.merge.bias = randn(branch.merge.bias.shape(), rng, 0.5, true);
  auto r = branch_fill(Tensor::zeros(Shape{1, 4, 6, 6}), Mask::ones(1, 6, 6), branch);
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 0; i < 36; ++i) EXPECT_NEAR(r.filled.values()[c * 36 + i], r.filled.values()[c * 36], 1e-13);
}

namespace {

/// Mask update of the default branch, propagated without features.
Mask propagate(const Mask& mask, const std::array<int, 3>& kernels) {
  Mask united;
  for (int k : kernels) {
    Mask m = mask;
    for (int i = 0; i < kBranchDepth; ++i) m = Mask(partial_conv_windows(m, k, 1).updated);
    united = united.tensor().defined() ? united.united(m) : m;
  }
  return united;
}

}  // namespace

TEST(BranchFill, MaskClosureForPresetsAndBuckets) {
  for (Preset p : {Preset::Desk, Preset::Full}) {
    const auto cfg = GeneratorConfig::preset(p);
    const std::int64_t size = cfg.image_size, r = cfg.reorg_size();
    EXPECT_TRUE(propagate(gen_center_mask(size, size).resized(r, r), cfg.branch_kernels).all_valid());
    for (int bucket = 0; bucket < 5; ++bucket)
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Mask m = gen_irregular_mask(size, size, bucket, seed).resized(r, r);
        EXPECT_TRUE(propagate(m, cfg.branch_kernels).all_valid()) << bucket << " " << seed;
      }
  }
}

TEST(BranchFill, DeskBranchMaskClosesThroughNetwork) {
  Rng rng(9);
  auto g = Generator::make(GeneratorConfig::preset(Preset::Desk), rng);
  NoGradGuard guard;
  for (int bucket = 0; bucket < 5; ++bucket) {
    auto img = random_image(1, 64, rng);
    auto out = generator_forward(img, gen_irregular_mask(64, 64, bucket, 100 + bucket), g);
    EXPECT_TRUE(out.texture_mask.all_valid());
    EXPECT_TRUE(out.structure_mask.all_valid());
  }
}

TEST(ToColor, RangeBiasAndGradient) {
  Rng rng(10);
  auto head = ConvLayer::make(6, 3, 1, 1, 0, rng, true, 1, 1.0);
  head.bias = Tensor::from(Shape{1, 3, 1, 1}, {0.5, -2.0, 0.0}, true);
  auto zero = to_color(Tensor::zeros(Shape{1, 6, 3, 3}), head);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(zero.values()[c * 9 + i], std::tanh(head.bias.values()[c]));
  auto f = randn(Shape{2, 6, 4, 4}, rng, 5.0, true);
  auto y = to_color(f, head);
  for (double v : y.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  backward(sum(y));
  EXPECT_GT(medfe::test::max_abs(f.grad()), 0.0);
}

TEST(Generator, OutputShapes) {
  Rng rng(11);
  auto g = Generator::make(GeneratorConfig::preset(Preset::Desk), rng);
  NoGradGuard guard;
  auto out = generator_forward(random_image(2, 64, rng), stack_masks({gen_center_mask(64, 64), gen_center_mask(64, 64)}), g);
  EXPECT_EQ(out.out.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(out.texture_image.shape(), (Shape{2, 3, 8, 8}));
  EXPECT_EQ(out.structure_image.shape(), (Shape{2, 3, 8, 8}));
  EXPECT_EQ(out.equalized.shape(), (Shape{2, 32, 8, 8}));
  EXPECT_EQ(out.fused.shape(), (Shape{2, 32, 8, 8}));
  for (double v : out.out.values()) EXPECT_LE(std::abs(v), 1.0);
}

TEST(Generator, SkipAdaptersPreserveDecoderSizes) {
  Rng rng(12);
  for (Preset p : {Preset::Desk, Preset::Tiny}) {
    const auto cfg = GeneratorConfig::preset(p);
    auto g = Generator::make(cfg, rng);
    NoGradGuard guard;
    Tensor x = Tensor::zeros(Shape{1, cfg.encoder_channels[5], cfg.level_size(5), cfg.level_size(5)});
    Tensor eq = Tensor::zeros(Shape{1, cfg.feature_width, cfg.reorg_size(), cfg.reorg_size()});
    for (int i = 0; i < kDecoderLayers; ++i) {
      x = g.decoder[i].forward(x);
      EXPECT_EQ(x.shape().h(), cfg.level_size(kEncoderLayers - 2 - i));
      const Shape before = x.shape();
      x = g.skip[i].forward(concat({x, resize(eq, before.h(), before.w(), ResizeMode::Bilinear)}, 1));
      EXPECT_EQ(x.shape(), before);
    }
    EXPECT_EQ(g.output.forward(x).shape(), (Shape{1, 3, cfg.image_size, cfg.image_size}));
  }
}

TEST(Generator, DeskForwardBackwardReachesEveryParameter) {
  Rng rng(13);
  auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 13);
  auto img = random_image(2, 64, rng);
  auto mask = stack_masks({gen_center_mask(64, 64), gen_irregular_mask(64, 64, 2, 5)});
  auto out = generator_forward(img, mask, model.generator);
  auto loss = add(add(l1_loss(out.out, img), l1_loss(out.texture_image, resize(img, 8, 8, ResizeMode::Bilinear))),
                  l1_loss(out.structure_image, resize(img, 8, 8, ResizeMode::Bilinear)));
  backward(loss);
  const auto params = model.generator_parameters();
  std::int64_t nonzero = 0;
  for (const auto& e : params.entries()) {
    ASSERT_TRUE(e.tensor.has_grad()) << e.name;
    const auto g = e.tensor.grad();
    for (double v : g) ASSERT_TRUE(std::isfinite(v)) << e.name;
    if (medfe::test::max_abs(g) > 0) ++nonzero;
  }
  EXPECT_EQ(nonzero, static_cast<std::int64_t>(params.entries().size()));
}

TEST(Generator, TinyPipelineGradientCheck) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Tiny), seed);
    Rng rng(seed);
    auto img = random_image(1, 16, rng);
    img = img.as_parameter();
    const Tensor target = random_image(1, 16, rng);
    const Mask mask = gen_center_mask(16, 16);
    std::vector<Tensor> inputs{img};
    std::vector<std::string> names{"image"};
    // Zero biases put every all-zero hole window exactly on the leaky-ReLU kink.
    for (const auto& e : model.generator_parameters().entries()) {
      if (e.name.ends_with(".bias")) {
        Tensor t = e.tensor;
        for (double& v : t.mutable_values()) v = rng.uniform(-0.1, 0.1);
      }
      inputs.push_back(e.tensor);
      names.push_back(e.name);
    }
    auto report = grad_check(
        [&](const std::vector<Tensor>& in) { return l1_loss(generator_forward(in[0], mask, model.generator).out, target); },
        inputs, names, {.tolerance = 5e-4, .max_entries_per_input = 2, .seed = seed});
    EXPECT_TRUE(report.passed) << "seed " << seed << " max rel " << report.max_rel_error;
  }
}

TEST(Discriminator, ScoreMapAndSymmetry) {
  auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 14);
  Rng rng(14);
  auto img = random_image(2, 64, rng);
  auto scores = discriminator_forward(img, model.global);
  EXPECT_EQ(scores.shape(), (Shape{2, 1, 2, 2}));
  auto adv = adv_losses(scores, scores);
  EXPECT_NEAR(adv.generator.item(), adv.discriminator.item(), 1e-12);
  EXPECT_GE(adv.generator.item(), 2 * std::log(2.0) - 1e-12);
}

TEST(Discriminator, ConvergedNormalizationIgnoresWeightScale) {
  auto a = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 15);
  auto b = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 15);
  for (auto& l : b.global.layers) l.weight = scale(l.weight, 10.0).as_parameter();
  for (auto* d : {&a.global, &b.global})
    for (std::size_t i = 0; i < d->layers.size(); ++i) {
      d->norms[i].power_iterations = 100;
      spectral_normalize(d->layers[i].weight, d->norms[i]);
    }
  Rng rng(15);
  auto img = random_image(1, 64, rng);
  NoGradGuard guard;
  auto sa = discriminator_forward(img, a.global);
  auto sb = discriminator_forward(img, b.global);
  EXPECT_LE(max_abs_diff(sa.values(), sb.values()), 1e-8);
}

TEST(Discriminator, LocalPatchesFollowHoleBox) {
  Rng rng(16);
  auto img = random_image(2, 16, rng);
  std::vector<double> mv(2 * 256, 1.0);
  for (int y = 2; y < 6; ++y)
    for (int x = 3; x < 11; ++x) mv[y * 16 + x] = 0.0;
  mv[256 + 9 * 16 + 9] = 0.0;
  Mask mask(Tensor::from(Shape{2, 1, 16, 16}, mv));
  auto box = hole_box(mask, 0);
  EXPECT_EQ(box.top, 2);
  EXPECT_EQ(box.left, 3);
  EXPECT_EQ(box.height, 4);
  EXPECT_EQ(box.width, 8);
  auto patches = local_patches(img, mask);
  EXPECT_EQ(patches.shape(), (Shape{2, 3, 64, 64}));
  // A single-pixel hole box becomes a constant patch.
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(patches.at(1, c, 40, 7), img.at(1, c, 9, 9));
  EXPECT_THROW(local_patches(img, Mask::ones(2, 16, 16)), ContractViolation);
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 17);
  Rng rng(17);
  auto img = random_image(1, 64, rng);
  const Mask mask = gen_center_mask(64, 64);
  NoGradGuard guard;
  const auto before = copy(generator_forward(img, mask, model.generator).out);
  const auto scores_before = copy(discriminator_forward(img, model.local));
  const auto path = (std::filesystem::temp_directory_path() / "medfe_model_roundtrip.bin").string();
  save_checkpoint(path, model.state());
  auto other = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 99);
  other.load_state(checkpoint_map(load_checkpoint(path)));
  EXPECT_EQ(copy(generator_forward(img, mask, other.generator).out), before);
  EXPECT_EQ(copy(discriminator_forward(img, other.local)), scores_before);
  std::filesystem::remove(path);
}

TEST(Model, ParameterNamesAreUnique) {
  auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 18);
  std::set<std::string> names;
  for (const auto& e : model.state()) EXPECT_TRUE(names.insert(e.name).second) << e.name;
}

TEST(Model, CompositeKeepsValidPixels) {
  Rng rng(19);
  auto truth = random_image(1, 8, rng), out = random_image(1, 8, rng);
  auto mask = gen_center_mask(8, 8);
  auto comp = composite(truth, out, mask);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < 8; ++y)
      for (std::int64_t x = 0; x < 8; ++x)
        EXPECT_EQ(comp.at(0, c, y, x), mask.tensor().at(0, 0, y, x) == 1.0 ? truth.at(0, c, y, x) : out.at(0, c, y, x));
  EXPECT_EQ(copy(composite(truth, out, Mask::ones(1, 8, 8))), copy(truth));
}
