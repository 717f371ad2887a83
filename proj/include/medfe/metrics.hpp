#pragma once

// PSNR and SSIM on images mapped from [-1, 1] to [0, 1].

#include <cmath>
#include <cstdint>
#include <vector>

#include "medfe/errors.hpp"
#include "medfe/layers.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

inline constexpr double kPsnrCap = 100.0;
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

struct ImageScores {
  double psnr = 0;
  double ssim = 0;
};

inline double to_unit(double v) { return (v + 1.0) * 0.5; }

inline double psnr(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "psnr: shape " + a.shape().str() + " vs " + b.shape().str());
  double mse = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = to_unit(a.values()[i]) - to_unit(b.values()[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  return mse < 1e-10 ? kPsnrCap : 10.0 * std::log10(1.0 / mse);
}

/// Mean local SSIM over all valid 7x7 windows, channels and samples, with
/// uniform weights and population statistics.
inline double ssim(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "ssim: shape " + a.shape().str() + " vs " + b.shape().str());
  const Shape s = a.shape();
  const std::int64_t W = kSsimWindow, oh = s.h() - W + 1, ow = s.w() - W + 1;
  require(oh > 0 && ow > 0, "ssim: images must be at least 7x7, got " + s.str());
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2, inv_n = 1.0 / static_cast<double>(W * W);
  const std::int64_t P = s.plane();

  // Horizontal then vertical box sums of x, y, x^2, y^2, xy.
  std::vector<double> src(static_cast<std::size_t>(5 * P)), row(static_cast<std::size_t>(5 * s.h() * ow)),
      box(static_cast<std::size_t>(5 * oh * ow));
  double total = 0;
  for (std::int64_t plane = 0; plane < s.n() * s.c(); ++plane) {
    const double* pa = a.data() + plane * P;
    const double* pb = b.data() + plane * P;
    for (std::int64_t i = 0; i < P; ++i) {
      const double x = to_unit(pa[i]), y = to_unit(pb[i]);
      src[i] = x;
      src[P + i] = y;
      src[2 * P + i] = x * x;
      src[3 * P + i] = y * y;
      src[4 * P + i] = x * y;
    }
    for (int k = 0; k < 5; ++k)
      for (std::int64_t r = 0; r < s.h(); ++r)
        for (std::int64_t c = 0; c < ow; ++c) {
          double acc = 0;
          for (std::int64_t j = 0; j < W; ++j) acc += src[k * P + r * s.w() + c + j];
          row[(k * s.h() + r) * ow + c] = acc;
        }
    for (int k = 0; k < 5; ++k)
      for (std::int64_t r = 0; r < oh; ++r)
        for (std::int64_t c = 0; c < ow; ++c) {
          double acc = 0;
          for (std::int64_t i = 0; i < W; ++i) acc += row[(k * s.h() + r + i) * ow + c];
          box[(k * oh + r) * ow + c] = acc * inv_n;
        }
    const std::int64_t Q = oh * ow;
    for (std::int64_t q = 0; q < Q; ++q) {
      const double mx = box[q], my = box[Q + q];
      const double vx = box[2 * Q + q] - mx * mx, vy = box[3 * Q + q] - my * my, cov = box[4 * Q + q] - mx * my;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  }
  return total / static_cast<double>(s.n() * s.c() * oh * ow);
}

inline ImageScores image_scores(const Tensor& a, const Tensor& b) { return {psnr(a, b), ssim(a, b)}; }

/// Mean absolute difference over hole pixels (all channels); 0 when there are none.
inline double hole_l1(const Tensor& a, const Tensor& b, const Mask& mask) {
  require(a.shape() == b.shape(), "hole_l1: shape mismatch");
  const Shape s = a.shape();
  require(mask.shape().n() == s.n() && mask.height() == s.h() && mask.width() == s.w(), "hole_l1: mask mismatch");
  double acc = 0;
  std::int64_t count = 0;
  for (std::int64_t n = 0; n < s.n(); ++n)
    for (std::int64_t c = 0; c < s.c(); ++c)
      for (std::int64_t i = 0; i < s.plane(); ++i)
        if (mask.tensor().values()[n * s.plane() + i] == 0.0) {
          const std::int64_t k = (n * s.c() + c) * s.plane() + i;
          acc += std::abs(a.values()[k] - b.values()[k]);
          ++count;
        }
  return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

/// Fills each sample's holes with the per-channel mean of its valid pixels.
inline Tensor mean_fill(const Tensor& img, const Mask& mask) {
  const Shape s = img.shape();
  std::vector<double> out(img.values().begin(), img.values().end());
  for (std::int64_t n = 0; n < s.n(); ++n) {
    const double* m = mask.tensor().data() + n * s.plane();
    for (std::int64_t c = 0; c < s.c(); ++c) {
      double* p = out.data() + (n * s.c() + c) * s.plane();
      double acc = 0;
      std::int64_t count = 0;
      for (std::int64_t i = 0; i < s.plane(); ++i)
        if (m[i] == 1.0) acc += p[i], ++count;
      const double fill = count > 0 ? acc / static_cast<double>(count) : 0.0;
      for (std::int64_t i = 0; i < s.plane(); ++i)
        if (m[i] == 0.0) p[i] = fill;
    }
  }
  return Tensor::from(s, std::move(out));
}

}  // namespace medfe
