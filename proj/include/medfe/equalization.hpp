#pragma once

// Feature equalization: fused structure/texture features are reweighed per
// channel (squeeze-excitation) and then passed through the bilateral
// propagation activation (BPA), which mixes a global Gaussian-weighted spatial
// average with a local dot-product-weighted range aggregation:
//
//   y^s_i = 1/N * sum_{j in image} g(|j - i|) x_j,  g(d) = exp(-d^2 / (2 sigma^2))
//   y^r_i = 1/N * sum_{j in 3x3(i)} (x_i . x_j) x_j
//   y_i   = q([y^s_i, y^r_i])                       q: 1x1 conv, no bias
//
// N is the number of spatial positions.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "medfe/conv.hpp"
#include "medfe/layers.hpp"
#include "medfe/ops.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

struct SpatialKernel {
  std::int64_t height = 0, width = 0;
  double sigma = 1;
  Tensor weights;  // (1, 1, h*w, h*w), entry (i, j) = g(|pos_j - pos_i|)

  static SpatialKernel make(std::int64_t h, std::int64_t w, double sigma) {
    require(h >= 1 && w >= 1, "SpatialKernel: empty domain");
    require(sigma > 0, "SpatialKernel: sigma must be positive");
    const std::int64_t n = h * w;
    std::vector<double> k(static_cast<std::size_t>(n * n));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j <= i; ++j) {
        const double dy = static_cast<double>(i / w - j / w), dx = static_cast<double>(i % w - j % w);
        const double g = std::exp(-(dy * dy + dx * dx) * inv);
        k[i * n + j] = g;
        k[j * n + i] = g;
      }
    return {h, w, sigma, Tensor::from(Shape{1, 1, n, n}, std::move(k))};
  }

  /// Gaussian width used when none is configured: max(h, w) / 4.
  static double default_sigma(std::int64_t h, std::int64_t w) { return static_cast<double>(std::max(h, w)) / 4.0; }
};

struct BPAConfig {
  double sigma = 0;  // <= 0 selects SpatialKernel::default_sigma
  int local_k = 3;
  ConvLayer fuse;  // q: 2C -> C, 1x1, no bias
  bool softmax_range = false;  // non-local style normalization (ablation)
  bool residual = false;       // y + x (ablation)

  static BPAConfig make(std::int64_t channels, Rng& rng) {
    BPAConfig c;
    c.fuse = ConvLayer::make(2 * channels, channels, 1, 1, 0, rng, false, 1, 1.0);
    return c;
  }

  /// q fixed to (y^s + y^r) / 2.
  static BPAConfig averaging(std::int64_t channels) {
    BPAConfig c;
    std::vector<double> w(static_cast<std::size_t>(channels * 2 * channels), 0.0);
    for (std::int64_t o = 0; o < channels; ++o) {
      w[o * 2 * channels + o] = 0.5;
      w[o * 2 * channels + channels + o] = 0.5;
    }
    c.fuse.weight = Tensor::from(Shape{channels, 2 * channels, 1, 1}, std::move(w), true);
    return c;
  }

  double sigma_for(std::int64_t h, std::int64_t w) const { return sigma > 0 ? sigma : SpatialKernel::default_sigma(h, w); }

  void collect(ParameterList& out, const std::string& prefix) const { fuse.collect(out, prefix + ".q"); }
};

inline Tensor spatial_branch(const Tensor& x, const SpatialKernel& kernel) {
  const Shape s = x.shape();
  require(kernel.height == s.h() && kernel.width == s.w(),
          "spatial_branch: kernel built for " + std::to_string(kernel.height) + "x" + std::to_string(kernel.width) +
              ", feature is " + s.str());
  const std::int64_t n = s.plane();
  const Tensor flat = reshape(x, Shape{s.n(), 1, s.c(), n});
  const Tensor y = scale(matmul(flat, kernel.weights), 1.0 / static_cast<double>(n));
  return reshape(y, s);
}

/// Local range aggregation through a 3x3 neighbourhood unfold; zero padding
/// gives border pixels fewer effective neighbours.
inline Tensor range_branch(const Tensor& x, bool softmax_normalized = false, int k = 3) {
  const Shape s = x.shape();
  const std::int64_t n = s.plane();
  const Tensor neighbours = neighborhood_unfold(x, k);                                      // (b, hw, kk, c)
  const Tensor centre = reshape(permute(x, {0, 2, 3, 1}), Shape{s.n(), n, 1, s.c()});        // (b, hw, 1, c)
  Tensor affinity = sum(mul(neighbours, centre), kW);                                      // (b, hw, kk, 1)
  if (softmax_normalized) affinity = softmax(affinity, 2);
  Tensor agg = sum(mul(neighbours, affinity), kH);                                          // (b, hw, 1, c)
  if (!softmax_normalized) agg = scale(agg, 1.0 / static_cast<double>(n));
  return permute(reshape(agg, Shape{s.n(), s.h(), s.w(), s.c()}), {0, 3, 1, 2});
}

inline Tensor bpa(const Tensor& x, const BPAConfig& cfg) {
  require(cfg.local_k == 3, "bpa: range neighbourhood is fixed at 3x3");
  require(cfg.fuse.weight.defined() && cfg.fuse.weight.shape().c() == 2 * x.shape().c() &&
              cfg.fuse.weight.shape().n() == x.shape().c(),
          "bpa: fusion weights do not match feature channels " + x.shape().str());
  const Shape s = x.shape();
  const auto kernel = SpatialKernel::make(s.h(), s.w(), cfg.sigma_for(s.h(), s.w()));
  const Tensor ys = spatial_branch(x, kernel);
  const Tensor yr = range_branch(x, cfg.softmax_range, cfg.local_k);
  Tensor y = cfg.fuse.forward(concat({ys, yr}, 1));
  if (cfg.residual) y = add(y, x);
  return y;
}

/// Direct evaluation of both branches with nested loops; O(N^2 C).
/// Returns (y^s, y^r).
inline std::pair<Tensor, Tensor> bpa_oracle(const Tensor& x, double sigma) {
  const Shape s = x.shape();
  const std::int64_t H = s.h(), W = s.w(), C = s.c();
  const double N = static_cast<double>(H * W);
  std::vector<double> ys(static_cast<std::size_t>(s.numel()), 0.0), yr(ys.size(), 0.0);
  for (std::int64_t b = 0; b < s.n(); ++b)
    for (std::int64_t iy = 0; iy < H; ++iy)
      for (std::int64_t ix = 0; ix < W; ++ix) {
        for (std::int64_t jy = 0; jy < H; ++jy)
          for (std::int64_t jx = 0; jx < W; ++jx) {
            const double d2 = static_cast<double>((jy - iy) * (jy - iy) + (jx - ix) * (jx - ix));
            const double g = std::exp(-d2 / (2 * sigma * sigma));
            for (std::int64_t c = 0; c < C; ++c) ys[x.index(b, c, iy, ix)] += g * x.at(b, c, jy, jx) / N;
          }
        for (std::int64_t jy = iy - 1; jy <= iy + 1; ++jy)
          for (std::int64_t jx = ix - 1; jx <= ix + 1; ++jx) {
            if (jy < 0 || jy >= H || jx < 0 || jx >= W) continue;
            double f = 0;
            for (std::int64_t c = 0; c < C; ++c) f += x.at(b, c, iy, ix) * x.at(b, c, jy, jx);
            for (std::int64_t c = 0; c < C; ++c) yr[x.index(b, c, iy, ix)] += f * x.at(b, c, jy, jx) / N;
          }
      }
  return {Tensor::from(s, std::move(ys)), Tensor::from(s, std::move(yr))};
}

struct EqualizationParams {
  ConvLayer fusion;  // 2C -> C, 1x1, no bias: produces F_sf
  SEBlock channel;
  BPAConfig bpa;

  static EqualizationParams make(std::int64_t channels, Rng& rng) {
    return {ConvLayer::make(2 * channels, channels, 1, 1, 0, rng, false, 1, 1.0), SEBlock::make(channels, rng),
            BPAConfig::make(channels, rng)};
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    fusion.collect(out, prefix + ".fusion");
    channel.collect(out, prefix + ".se");
    bpa.collect(out, prefix + ".bpa");
  }
};

struct EqualizedFeatures {
  Tensor fused;      // F_sf
  Tensor equalized;  // F_equal
};

inline EqualizedFeatures equalize(const Tensor& texture_filled, const Tensor& structure_filled,
                                  const EqualizationParams& params) {
  require(texture_filled.shape() == structure_filled.shape(),
          "equalize: texture " + texture_filled.shape().str() + " vs structure " + structure_filled.shape().str());
  Tensor fused = params.fusion.forward(concat({texture_filled, structure_filled}, 1));
  Tensor equalized = bpa(se_forward(fused, params.channel), params.bpa);
  return {std::move(fused), std::move(equalized)};
}

}  // namespace medfe
