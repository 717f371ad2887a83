#pragma once

// Oracle-equivalence, law and gradient suites shared by the `selftest` command
// and the acceptance runner. Each suite reports its worst measured value
// against the limit it is held to.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/data.hpp"
#include "medfe/equalization.hpp"
#include "medfe/grad_check.hpp"
#include "medfe/image_io.hpp"
#include "medfe/losses.hpp"
#include "medfe/metrics.hpp"
#include "medfe/network.hpp"
#include "medfe/oracles.hpp"

namespace medfe::selftest {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

namespace detail {

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::string fmt(const char* f, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

inline SuiteResult timed(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{name};
  try {
    auto [ok, detail] = body();
    r.passed = ok;
    r.detail = std::move(detail);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline Tensor random_features(Shape s, Rng& rng, bool grad = false) { return randn(s, rng, 1.0, grad); }

}  // namespace detail

/// Both BPA branches against the per-pixel loop oracle.
inline SuiteResult bpa_oracle_suite() {
  return detail::timed("bpa-oracle", [] {
    double worst = 0;
    for (Shape s : {Shape{1, 2, 4, 4}, Shape{1, 4, 8, 8}, Shape{2, 3, 5, 5}})
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(mix_seed(seed, 0x6270));
        const Tensor x = detail::random_features(s, rng);
        const double sigma = SpatialKernel::default_sigma(s.h(), s.w());
        const auto [ys, yr] = bpa_oracle(x, sigma);
        worst = std::max(worst, detail::max_abs_diff(spatial_branch(x, SpatialKernel::make(s.h(), s.w(), sigma)).values(),
                                                     ys.values()));
        worst = std::max(worst, detail::max_abs_diff(range_branch(x).values(), yr.values()));
      }
    return std::pair{worst <= 1e-8, detail::fmt("max abs diff %.3e (limit 1e-8)", worst)};
  });
}

/// Spatial branch linearity and cubic homogeneity of the range branch.
inline SuiteResult bpa_laws_suite() {
  return detail::timed("bpa-laws", [] {
    double linear = 0, homogeneous = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(mix_seed(seed, 0x6c6177));
      const Shape s{1 + static_cast<std::int64_t>(rng.below(2)), 1 + static_cast<std::int64_t>(rng.below(4)),
                    3 + static_cast<std::int64_t>(rng.below(5)), 3 + static_cast<std::int64_t>(rng.below(5))};
      const Tensor x = detail::random_features(s, rng), y = detail::random_features(s, rng);
      const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2), t = rng.uniform(0.2, 3.0);
      const auto kernel = SpatialKernel::make(s.h(), s.w(), SpatialKernel::default_sigma(s.h(), s.w()));
      const Tensor lhs = spatial_branch(add(scale(x, a), scale(y, b)), kernel);
      const Tensor rhs = add(scale(spatial_branch(x, kernel), a), scale(spatial_branch(y, kernel), b));
      linear = std::max(linear, detail::max_abs_diff(lhs.values(), rhs.values()));
      const Tensor scaled = range_branch(scale(x, t));
      const Tensor expected = scale(range_branch(x), t * t * t);
      double peak = 0;
      for (double v : expected.values()) peak = std::max(peak, std::abs(v));
      homogeneous = std::max(homogeneous, detail::max_abs_diff(scaled.values(), expected.values()) / peak);
    }
    return std::pair{linear <= 1e-10 && homogeneous <= 1e-9,
                     detail::fmt("linearity %.3e (limit 1e-10), homogeneity rel %.3e (limit 1e-9)", linear, homogeneous)};
  });
}

/// Every differentiable op, composite layer and loss, plus the tiny generator
/// with L1, against central differences on five seeds.
inline SuiteResult gradient_suite(bool include_pipeline = true) {
  return detail::timed("gradients", [include_pipeline] {
    using V = const std::vector<Tensor>&;
    double worst_op = 0, worst_pipeline = 0;
    std::string worst_name = "none";
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      const GradCheckOptions opt{.step = 1e-5, .tolerance = 1e-4, .seed = seed};
      auto check = [&](const char* name, const std::function<Tensor(V)>& fn, std::vector<Tensor> in) {
        const auto r = grad_check(fn, std::move(in), {}, opt);
        if (r.max_rel_error > worst_op) worst_op = r.max_rel_error, worst_name = name;
      };
      auto away_from_zero = [&](Shape s) {
        Tensor t = randn(s, rng, 1.0, true);
        for (auto& v : t.mutable_values()) v += v >= 0 ? 0.1 : -0.1;
        return t;
      };
      const Tensor x = randn(Shape{2, 3, 5, 4}, rng, 1.0, true), y = randn(Shape{2, 3, 5, 4}, rng, 1.0, true);
      const Tensor g = randn(Shape{1, 3, 1, 1}, rng, 1.0, true);
      check("add", [](V in) { return add(in[0], in[1]); }, {x, g});
      check("sub", [](V in) { return sub(in[0], in[1]); }, {x, y});
      check("mul", [](V in) { return mul(in[0], in[1]); }, {x, g});
      check("div", [](V in) { return div(in[0], add_scalar(square(in[1]), 1.0)); }, {x, y});
      check("sigmoid", [](V in) { return sigmoid(in[0]); }, {x});
      check("tanh", [](V in) { return tanh(in[0]); }, {x});
      check("exp", [](V in) { return exp(in[0]); }, {x});
      check("leaky_relu", [](V in) { return leaky_relu(in[0]); }, {away_from_zero(Shape{2, 3, 5, 4})});
      check("abs", [](V in) { return abs(in[0]); }, {away_from_zero(Shape{1, 2, 3, 3})});
      check("log", [](V in) { return log_clamped(add_scalar(square(in[0]), 0.5)); }, {x});
      check("sum", [](V in) { return sum(in[0], kC | kW); }, {x});
      check("mean", [](V in) { return mean(in[0], kSpatial); }, {x});
      check("reshape", [](V in) { return reshape(in[0], Shape{1, 6, 4, 5}); }, {x});
      check("permute", [](V in) { return permute(in[0], {2, 0, 3, 1}); }, {x});
      check("concat", [](V in) { return concat({in[0], in[1]}, 1); }, {x, y});
      check("crop", [](V in) { return crop(in[0], 1, 1, 3, 2); }, {x});
      check("softmax", [](V in) { return softmax(in[0], 2); }, {x});
      check("matmul", [](V in) { return matmul(in[0], in[1]); },
            {randn(Shape{2, 1, 4, 3}, rng, 1.0, true), randn(Shape{1, 1, 3, 5}, rng, 1.0, true)});
      const Tensor w = randn(Shape{4, 3, 3, 3}, rng, 0.5, true), b = randn(Shape{1, 4, 1, 1}, rng, 0.5, true);
      check("conv2d", [](V in) { return conv2d(in[0], in[1], in[2], 1, 2, 2); }, {x, w, b});
      check("conv2d_stride", [](V in) { return conv2d(in[0], in[1], in[2], 2, 1, 1); }, {x, w, b});
      check("conv_transpose2d", [](V in) { return conv_transpose2d(in[0], in[1], in[2], 2, 1); },
            {x, randn(Shape{3, 2, 4, 4}, rng, 0.5, true), randn(Shape{1, 2, 1, 1}, rng, 0.5, true)});
      check("unfold", [](V in) { return neighborhood_unfold(in[0], 3); }, {x});
      check("resize_bilinear", [](V in) { return resize(in[0], 7, 9, ResizeMode::Bilinear); }, {x});
      check("resize_nearest", [](V in) { return resize(in[0], 10, 3, ResizeMode::Nearest); }, {x});

      const Tensor f = randn(Shape{1, 4, 6, 6}, rng, 1.0, true);
      auto pconv = PartialConvLayer::make(4, 4, 3, 1, rng);
      pconv.conv.bias = randn(pconv.conv.bias.shape(), rng, 0.3, true);
      const Mask hole = gen_center_mask(6, 6);
      check("partial_conv", [&](V in) { return partial_conv(in[0], hole, pconv).first; },
            {f, pconv.conv.weight, pconv.conv.bias});
      auto se = SEBlock::make(4, rng);
      check("se_block", [&](V in) { return se_forward(in[0], se); }, {f, se.reduce.weight, se.expand.weight});
      auto res = ResidualBlock::make(4, 2, rng);
      res.first.bias = randn(res.first.bias.shape(), rng, 0.3, true);
      check("residual_block", [&](V in) { return dilated_residual_block(in[0], res); },
            {f, res.first.weight, res.second.weight});
      auto bpa_cfg = BPAConfig::make(4, rng);
      check("bpa", [&](V in) { return bpa(in[0], bpa_cfg); }, {f, bpa_cfg.fuse.weight});
      auto sn = SpectralNormState::make(4, rng);
      check("spectral_norm", [&](V in) { return spectral_normalize(in[0], sn, false); },
            {randn(Shape{4, 3, 3, 3}, rng, 0.5, true)});
      check("gram", [](V in) { return gram_matrix(in[0]); }, {randn(Shape{2, 3, 4, 5}, rng, 1.0, true)});

      const auto fx = FeatureExtractor::seeded(seed);
      const Tensor out = rand_uniform(Shape{1, 3, 16, 16}, rng, -1, 1, true);
      const Tensor truth = rand_uniform(Shape{1, 3, 16, 16}, rng, -1, 1);
      check("l1", [&](V in) { return l1_loss(in[0], truth); }, {out});
      check("perceptual", [&](V in) { return perceptual_loss(in[0], truth, fx); }, {out});
      check("style", [&](V in) { return style_loss(fx.features(in[0]), fx.features(truth)); }, {out});
      check("adversarial_g", [](V in) { return adv_losses(in[0], in[1]).generator; },
            {randn(Shape{2, 1, 2, 2}, rng, 1.0, true), randn(Shape{2, 1, 2, 2}, rng, 1.0, true)});
      check("adversarial_d", [](V in) { return adv_losses(in[0], in[1]).discriminator; },
            {randn(Shape{2, 1, 2, 2}, rng, 1.0, true), randn(Shape{2, 1, 2, 2}, rng, 1.0, true)});

      if (include_pipeline) {
        Rng rng(seed);
        auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Tiny), seed);
        const Tensor img = rand_uniform(Shape{1, 3, 16, 16}, rng, -1, 1, true);
        const Tensor target = rand_uniform(Shape{1, 3, 16, 16}, rng, -1, 1);
        const Mask mask = gen_center_mask(16, 16);
        std::vector<Tensor> inputs{img};
        const ParameterList params = model.generator_parameters();
        for (const auto& e : params.entries()) {
          // Zero biases would put all-zero hole windows exactly on the leaky-ReLU kink.
          if (e.name.ends_with(".bias")) {
            Tensor t = e.tensor;
            for (double& v : t.mutable_values()) v = rng.uniform(-0.1, 0.1);
          }
          inputs.push_back(e.tensor);
        }
        const auto r = grad_check(
            [&](V in) { return l1_loss(generator_forward(in[0], mask, model.generator).out, target); }, inputs, {},
            {.tolerance = 5e-4, .max_entries_per_input = 2, .seed = seed});
        worst_pipeline = std::max(worst_pipeline, r.max_rel_error);
      }
    }
    const bool ok = worst_op <= 1e-4 && worst_pipeline <= 5e-4;
    return std::pair{ok, "ops max rel " + detail::fmt("%.3e", worst_op) + " (" + worst_name +
                             ", limit 1e-4), pipeline max rel " + detail::fmt("%.3e (limit 5e-4)", worst_pipeline)};
  });
}

/// A deliberately wrong backward rule must be caught by the checker.
inline SuiteResult negative_control_suite() {
  return detail::timed("negative-control", [] {
    Rng rng(5);
    const auto r = grad_check([](const std::vector<Tensor>& in) { return oracle::corrupted_square(in[0]); },
                              {randn(Shape{1, 2, 3, 3}, rng, 1.0, true)});
    return std::pair{!r.passed, detail::fmt("corrupted rule max rel %.3e (must exceed 1e-4)", r.max_rel_error)};
  });
}

/// All-ones degeneracy, hole-only windows, loop oracle and mask closure of the
/// default streams at desk size for every bucket.
inline SuiteResult partial_conv_suite() {
  return detail::timed("partial-conv", [] {
    double degeneracy = 0, oracle_diff = 0;
    bool zeros_exact = true, closed = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(mix_seed(seed, 0x7063));
      const int k = 1 + 2 * static_cast<int>(rng.below(4));
      const int stride = 1 + static_cast<int>(rng.below(2));
      auto layer = PartialConvLayer::make(3, 4, k, stride, rng);
      layer.conv.bias = randn(layer.conv.bias.shape(), rng, 0.5, true);
      const Tensor x = randn(Shape{2, 3, 9, 8}, rng);
      const auto [out, m] = partial_conv(x, Mask::ones(2, 9, 8), layer);
      const Tensor plain = conv2d(x, layer.conv.weight, layer.conv.bias, stride, (k - 1) / 2);
      degeneracy = std::max(degeneracy, detail::max_abs_diff(out.values(), plain.values()));
      zeros_exact = zeros_exact && m.all_valid();

      const auto [zo, zm] = partial_conv(x, Mask::zeros(2, 9, 8), layer);
      for (double v : zo.values()) zeros_exact = zeros_exact && v == 0.0;
      for (double v : zm.tensor().values()) zeros_exact = zeros_exact && v == 0.0;

      const Mask irregular = stack_masks({gen_irregular_mask(9, 8, 4, seed), gen_center_mask(9, 8)});
      const auto [io, im] = partial_conv(x, irregular, layer);
      const auto [eo, em] = oracle::partial_conv(x, irregular.tensor(), layer.conv.weight, layer.conv.bias, stride);
      oracle_diff = std::max(oracle_diff, detail::max_abs_diff(io.values(), eo));
      oracle_diff = std::max(oracle_diff, detail::max_abs_diff(im.tensor().values(), em));
      const Shape so = io.shape();
      for (std::int64_t n = 0; n < so.n(); ++n)
        for (std::int64_t c = 0; c < so.c(); ++c)
          for (std::int64_t p = 0; p < so.plane(); ++p)
            if (em[static_cast<std::size_t>(n * so.plane() + p)] == 0.0)
              zeros_exact = zeros_exact && io.values()[(n * so.c() + c) * so.plane() + p] == 0.0;
    }
    const GeneratorConfig desk = GeneratorConfig::preset(Preset::Desk);
    const std::int64_t size = desk.image_size, feature = desk.reorg_size();
    for (int bucket = 0; bucket < 5; ++bucket)
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Mask m = gen_irregular_mask(size, size, bucket, seed).resized(feature, feature);
        Mask united = Mask::zeros(1, feature, feature);
        for (int kernel : desk.branch_kernels) {
          Mask sm = m;
          for (int l = 0; l < kBranchDepth; ++l) sm = partial_conv_windows(sm, kernel, 1).updated;
          united = united.united(sm);
        }
        closed = closed && united.all_valid();
      }
    const bool ok = degeneracy <= 1e-10 && oracle_diff <= 1e-10 && zeros_exact && closed;
    return std::pair{ok, detail::fmt("all-ones vs conv %.3e (limit 1e-10), oracle %.3e", degeneracy, oracle_diff) +
                             (zeros_exact ? ", empty windows exact zero" : ", empty windows NOT zero") +
                             (closed ? ", desk masks closed in every bucket" : ", a desk mask stayed open")};
  });
}

/// Symmetric point and common-shift invariance of the relativistic losses.
inline SuiteResult adversarial_suite() {
  return detail::timed("adversarial", [] {
    double symmetric = 0, shift = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(mix_seed(seed, 0x6164));
      const Shape s{2, 1, 1 + static_cast<std::int64_t>(rng.below(4)), 1 + static_cast<std::int64_t>(rng.below(4))};
      const Tensor same = Tensor::full(s, rng.uniform(-5, 5));
      const auto at = adv_losses(same, same);
      symmetric = std::max({symmetric, std::abs(at.generator.item() - 2 * std::log(2.0)),
                            std::abs(at.discriminator.item() - 2 * std::log(2.0))});
      const Tensor real = randn(s, rng, 2.0), fake = randn(s, rng, 2.0);
      const double c = rng.uniform(-10, 10);
      const auto base = adv_losses(real, fake), moved = adv_losses(add_scalar(real, c), add_scalar(fake, c));
      shift = std::max({shift, std::abs(base.generator.item() - moved.generator.item()),
                        std::abs(base.discriminator.item() - moved.discriminator.item())});
    }
    return std::pair{symmetric <= 1e-9 && shift <= 1e-9,
                     detail::fmt("symmetric point %.3e, shift %.3e (limit 1e-9)", symmetric, shift)};
  });
}

inline SuiteResult total_loss_suite() {
  return detail::timed("total-loss", [] {
    const double t = total_loss(LossTerms<double>{1, 1, 1, 1, 1, 1}, LossWeights{});
    const double u = total_loss(LossTerms<Tensor>{Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1),
                                                  Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1)},
                                LossWeights{})
                         .item();
    return std::pair{t == 253.3 && u == 253.3, detail::fmt("unit parts give %.17g and %.17g (expect 253.3)", t, u)};
  });
}

/// Closed-form PSNR/SSIM cases and SSIM against the window-loop oracle.
inline SuiteResult metrics_suite() {
  return detail::timed("metrics", [] {
    Rng rng(8);
    const Tensor a = rand_uniform(Shape{1, 3, 16, 16}, rng, -0.8, 0.8);
    const bool identity = psnr(a, a) == 100.0 && std::abs(ssim(a, a) - 1.0) <= 1e-12;
    const double offset = psnr(add_scalar(a, 0.2), a);
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(mix_seed(seed, 0x7373));
      const Tensor x = rand_uniform(Shape{1, 3, 11 + static_cast<std::int64_t>(r.below(6)), 12}, r, -1, 1);
      const Tensor y = add(x, randn(x.shape(), r, 0.3));
      worst = std::max(worst, std::abs(ssim(x, y) - oracle::ssim(x, y)));
    }
    const bool ok = identity && std::abs(offset - 20.0) <= 1e-9 && worst <= 1e-8;
    return std::pair{ok, std::string(identity ? "identity 100 dB / 1.0" : "identity FAILED") +
                             detail::fmt(", +0.1 offset %.9f dB, ssim oracle %.3e (limit 1e-8)", offset, worst)};
  });
}

/// Bit-exact checkpoint round trip of a desk model and PPM round trips of 100
/// random quantized images.
inline SuiteResult round_trip_suite() {
  return detail::timed("round-trip", [] {
    const auto model = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 21);
    const auto state = model.state();
    const auto decoded = decode_checkpoint(encode_checkpoint(state));
    bool ckpt = decoded.size() == state.size();
    for (std::size_t i = 0; ckpt && i < state.size(); ++i) {
      ckpt = decoded[i].name == state[i].name && decoded[i].tensor.shape() == state[i].tensor.shape();
      const auto p = state[i].tensor.values(), q = decoded[i].tensor.values();
      for (std::size_t j = 0; ckpt && j < p.size(); ++j)
        ckpt = std::bit_cast<std::uint64_t>(p[j]) == std::bit_cast<std::uint64_t>(q[j]);
    }
    auto reloaded = MEDFEModel::make(GeneratorConfig::preset(Preset::Desk), 22);
    reloaded.load_state(checkpoint_map(decoded));
    ckpt = ckpt && encode_checkpoint(reloaded.state()) == encode_checkpoint(state);

    int exact = 0;
    Rng rng(23);
    for (int i = 0; i < 100; ++i) {
      const std::int64_t h = rng.range(1, 24), w = rng.range(1, 24);
      std::vector<double> v(static_cast<std::size_t>(3 * h * w));
      for (auto& e : v) e = dequantize(static_cast<std::uint8_t>(rng.below(256)));
      const Tensor img = Tensor::from(Shape{1, 3, h, w}, v);
      const std::string bytes = encode_ppm(img);
      const Tensor back = decode_ppm(bytes);
      if (std::equal(back.values().begin(), back.values().end(), v.begin(), v.end()) && encode_ppm(back) == bytes)
        ++exact;
    }
    return std::pair{ckpt && exact == 100, std::string(ckpt ? "checkpoint bit-exact" : "checkpoint MISMATCH") +
                                               detail::fmt(", %.0f/100 PPM images exact", exact)};
  });
}

/// The suites run by the `selftest` command.
inline std::vector<SuiteResult> run_all() {
  return {bpa_oracle_suite(), bpa_laws_suite(),   partial_conv_suite(), gradient_suite(), negative_control_suite(),
          adversarial_suite(), total_loss_suite(), metrics_suite(),      round_trip_suite()};
}

}  // namespace medfe::selftest
