#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <vector>

#include "medfe/grad_check.hpp"
#include "medfe/losses.hpp"
#include "medfe/network.hpp"
#include "medfe/oracles.hpp"
#include "test_util.hpp"

using namespace medfe;
using medfe::test::max_abs_diff;

namespace {

Tensor image(std::int64_t n, std::int64_t size, Rng& rng, bool grad = false) {
  return rand_uniform(Shape{n, 3, size, size}, rng, -1.0, 1.0, grad);
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

/// Extractor activations recomputed with the naive convolution oracle.
std::vector<Tensor> oracle_features(const FeatureExtractor& fx, const Tensor& img) {
  std::vector<Tensor> maps;
  Tensor x = img;
  for (std::size_t i = 0; i < fx.layer_count(); ++i) {
    Shape s;
    auto v = oracle::conv2d(x, fx.weight(i), Tensor(), 2, 1, 1, s);
    for (auto& e : v) e = std::max(0.0, e);
    x = Tensor::from(s, std::move(v));
    maps.push_back(x);
  }
  return maps;
}

}  // namespace

TEST(Recon, Examples) {
  Rng rng(1);
  auto a = image(2, 4, rng);
  EXPECT_EQ(recon_loss(a, a).item(), 0.0);
  EXPECT_NEAR(recon_loss(add_scalar(a, 0.5), a).item(), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(recon_loss(Tensor::full(Shape{1, 3, 2, 2}, 1.0), Tensor::full(Shape{1, 3, 2, 2}, -1.0)).item(), 2.0);
  auto b = image(2, 4, rng);
  EXPECT_NEAR(recon_loss(a, b).item(), oracle::mean_abs_diff(a, b), 1e-14);
  EXPECT_THROW(recon_loss(a, image(1, 4, rng)), ContractViolation);
}

TEST(Recon, BranchLosses) {
  Rng rng(2);
  auto st = image(1, 4, rng), te = image(1, 4, rng), gt = image(1, 4, rng);
  auto r = branch_recon_loss(st, te, st, gt);
  EXPECT_EQ(r.structure.item(), 0.0);
  EXPECT_NEAR(r.texture.item(), oracle::mean_abs_diff(te, gt), 1e-14);
  EXPECT_THROW(branch_recon_loss(st, te, image(1, 8, rng), gt), ContractViolation);
}

TEST(Extractor, SeededIsDeterministicAndMatchesOracle) {
  auto fx = FeatureExtractor::seeded(3), again = FeatureExtractor::seeded(3);
  ASSERT_EQ(fx.layer_count(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(values(fx.weight(i)), values(again.weight(i)));
    EXPECT_FALSE(fx.weight(i).requires_grad());
  }
  Rng rng(3);
  auto img = image(1, 32, rng);
  auto maps = fx.features(img);
  auto expected = oracle_features(fx, img);
  const std::int64_t sizes[] = {16, 8, 4, 2, 1};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(maps[i].shape().h(), sizes[i]);
    EXPECT_LE(max_abs_diff(maps[i].values(), expected[i].values()), 1e-10);
  }
}

TEST(Extractor, CheckpointRoundTrip) {
  auto fx = FeatureExtractor::seeded(4);
  auto loaded = FeatureExtractor::from_checkpoint(checkpoint_map(decode_checkpoint(encode_checkpoint(fx.state()))));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(values(fx.weight(i)), values(loaded.weight(i)));
  EXPECT_THROW(FeatureExtractor::from_checkpoint({}), IoError);
}

TEST(Perceptual, Examples) {
  auto fx = FeatureExtractor::seeded(5);
  Rng rng(5);
  auto a = image(2, 32, rng), b = image(2, 32, rng);
  EXPECT_EQ(perceptual_loss(a, a, fx).item(), 0.0);
  EXPECT_EQ(perceptual_loss(a, b, fx).item(), perceptual_loss(b, a, fx).item());
  auto fa = oracle_features(fx, a), fb = oracle_features(fx, b);
  double expected = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) expected += oracle::mean_abs_diff(fa[i], fb[i]);
  EXPECT_NEAR(perceptual_loss(a, b, fx).item(), expected, 1e-10);
}

TEST(Gram, HandCaseAndLaws) {
  // Rows [1, 0] and [0, 1] over a 1x2 plane: G = I / (2 * 1 * 2).
  auto phi = Tensor::from(Shape{1, 2, 1, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(gram_matrix(phi)), (std::vector<double>{0.25, 0, 0, 0.25}));

  auto ortho = Tensor::from(Shape{1, 2, 2, 2}, {1, 1, 1, 1, 1, -1, 1, -1});
  auto g = gram_matrix(ortho);
  EXPECT_EQ(g.values()[1], 0.0);
  EXPECT_EQ(g.values()[2], 0.0);
  EXPECT_EQ(g.values()[0], g.values()[3]);

  Rng rng(6);
  auto x = randn(Shape{2, 5, 3, 4}, rng);
  auto gx = gram_matrix(x);
  EXPECT_EQ(gx.shape(), (Shape{2, 1, 5, 5}));
  for (std::int64_t n = 0; n < 2; ++n) {
    auto expected = oracle::gram(x, n);
    Eigen::MatrixXd m(5, 5);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        EXPECT_NEAR(gx.at(n, 0, i, j), expected[i * 5 + j], 1e-12);
        EXPECT_NEAR(gx.at(n, 0, i, j), gx.at(n, 0, j, i), 1e-14);
        m(i, j) = gx.at(n, 0, i, j);
      }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-12);
  }
}

TEST(Style, Examples) {
  auto fx = FeatureExtractor::seeded(7);
  Rng rng(7);
  auto a = image(1, 32, rng), b = image(1, 32, rng);
  EXPECT_EQ(style_loss(a, a, fx).item(), 0.0);

  auto fa = oracle_features(fx, a), fb = oracle_features(fx, b);
  double expected = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto ga = oracle::gram(fa[i], 0), gb = oracle::gram(fb[i], 0);
    double acc = 0;
    for (std::size_t k = 0; k < ga.size(); ++k) acc += std::abs(ga[k] - gb[k]);
    expected += acc / static_cast<double>(ga.size());
  }
  expected /= static_cast<double>(fa.size());
  EXPECT_NEAR(style_loss(a, b, fx).item(), expected, 1e-12);
}

TEST(Style, InvariantToSharedSpatialPermutation) {
  Rng rng(8);
  std::vector<Tensor> out, truth, out_perm, truth_perm;
  for (int layer = 0; layer < 3; ++layer) {
    auto a = randn(Shape{1, 4, 3, 3}, rng), b = randn(Shape{1, 4, 3, 3}, rng);
    std::vector<std::int64_t> perm(9);
    for (int i = 0; i < 9; ++i) perm[i] = i;
    shuffle(perm, rng);
    auto permute_plane = [&](const Tensor& t) {
      std::vector<double> v(36);
      for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 9; ++i) v[c * 9 + i] = t.values()[c * 9 + perm[i]];
      return Tensor::from(t.shape(), v);
    };
    out.push_back(a);
    truth.push_back(b);
    out_perm.push_back(permute_plane(a));
    truth_perm.push_back(permute_plane(b));
  }
  EXPECT_NEAR(style_loss(out, truth).item(), style_loss(out_perm, truth_perm).item(), 1e-14);
}

TEST(Adversarial, SymmetricPointAndShift) {
  Rng rng(9);
  for (double c : {-3.0, 0.0, 0.5, 12.0}) {
    auto s = Tensor::full(Shape{2, 1, 2, 2}, c);
    auto r = adv_losses(s, s);
    EXPECT_NEAR(r.generator.item(), 2 * std::log(2.0), 1e-9);
    EXPECT_NEAR(r.discriminator.item(), 2 * std::log(2.0), 1e-9);
  }

  auto real = randn(Shape{2, 1, 2, 2}, rng, 2.0), fake = randn(Shape{2, 1, 2, 2}, rng, 2.0);
  auto base = adv_losses(real, fake);
  auto shifted = adv_losses(add_scalar(real, 3.7), add_scalar(fake, 3.7));
  EXPECT_NEAR(base.generator.item(), shifted.generator.item(), 1e-9);
  EXPECT_NEAR(base.discriminator.item(), shifted.discriminator.item(), 1e-9);

  auto [g, d] = oracle::adv_losses(values(real), values(fake));
  EXPECT_NEAR(base.generator.item(), g, 1e-12);
  EXPECT_NEAR(base.discriminator.item(), d, 1e-12);
}

TEST(Adversarial, ClampKeepsLossesFinite) {
  auto real = Tensor::full(Shape{1, 1, 2, 2}, 200.0), fake = Tensor::full(Shape{1, 1, 2, 2}, -200.0);
  auto r = adv_losses(real, fake);
  EXPECT_TRUE(std::isfinite(r.generator.item()));
  EXPECT_NEAR(r.generator.item(), -2 * std::log(1e-8), 1e-6);
  EXPECT_NEAR(r.discriminator.item(), 0.0, 1e-12);
}

TEST(Total, WeightsAndLinearity) {
  const LossWeights w;
  EXPECT_EQ(total_loss(LossTerms<double>{1, 1, 1, 1, 1, 1}, w), 253.3);
  EXPECT_EQ(total_loss(LossTerms<double>{0, 0, 0, 0, 0, 0}, w), 0.0);
  auto one = [] { return Tensor::scalar(1.0); };
  EXPECT_EQ(total_loss(LossTerms<Tensor>{one(), one(), one(), one(), one(), one()}, w).item(), 253.3);
  const LossTerms<double> base{0.3, 0.7, 0.01, 1.2, 0.4, 0.5};
  const double t0 = total_loss(base, w);
  LossTerms<double> doubled = base;
  doubled.style *= 2;
  EXPECT_NEAR(total_loss(doubled, w) - t0, w.style * base.style, 1e-12);
  doubled = base;
  doubled.adversarial *= 2;
  EXPECT_NEAR(total_loss(doubled, w) - t0, w.adversarial * base.adversarial, 1e-12);
  LossWeights bad;
  bad.style = -1;
  EXPECT_THROW(bad.validate(), ContractViolation);
}

TEST(Losses, GradientChecks) {
  auto fx = FeatureExtractor::seeded(10);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto a = image(1, 16, rng, true);
    const Tensor b = image(1, 16, rng);
    const GradCheckOptions opt{.seed = seed};
    auto check = [&](const char* name, auto fn, std::vector<Tensor> inputs) {
      auto r = grad_check(fn, std::move(inputs), {}, opt);
      EXPECT_TRUE(r.passed) << name << " seed " << seed << " " << r.max_rel_error;
    };
    check("recon", [&](const std::vector<Tensor>& in) { return recon_loss(in[0], b); }, {a});
    check("perceptual", [&](const std::vector<Tensor>& in) { return perceptual_loss(in[0], b, fx); }, {a});
    check("style", [&](const std::vector<Tensor>& in) { return style_loss(in[0], b, fx); }, {a});
    check("gram", [&](const std::vector<Tensor>& in) { return gram_matrix(in[0]); }, {randn(Shape{2, 3, 2, 3}, rng, 1.0, true)});
    auto real = randn(Shape{2, 1, 2, 2}, rng, 1.0, true), fake = randn(Shape{2, 1, 2, 2}, rng, 1.0, true);
    check("L_G", [&](const std::vector<Tensor>& in) { return adv_losses(in[0], in[1]).generator; }, {real, fake});
    check("L_D", [&](const std::vector<Tensor>& in) { return adv_losses(in[0], in[1]).discriminator; }, {real, fake});
  }
}

TEST(Losses, DiscriminatorDescent) {
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Tiny), seed);
    Rng rng(seed);
    auto real = image(2, 16, rng), fake = image(2, 16, rng);
    auto loss = [&] {
      auto s = discriminator_forward(concat({real, fake}, 0), model.global);
      return adv_losses(slice_batch(s, 0, 2), slice_batch(s, 2, 2)).discriminator;
    };
    Tensor before = loss();
    backward(before);
    const ParameterList params = model.discriminator_parameters();
    for (const auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      Tensor t = e.tensor;
      auto g = t.grad();
      auto v = t.mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) v[i] -= 1e-3 * g[i];
    }
    NoGradGuard guard;
    if (!(loss().item() < before.item())) ++failures;
  }
  EXPECT_LE(failures, 1);
}
