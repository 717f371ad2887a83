#pragma once

// Reference implementations used by the test suites and the `selftest`
// command. Each one evaluates its definition with plain loops and shares no
// code path with the operator it checks.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "medfe/ops.hpp"
#include "medfe/tensor.hpp"

namespace medfe::oracle {

/// Six nested loops of zero-padded, strided, dilated cross-correlation.
inline std::vector<double> conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
                                  int dil, Shape& out_shape) {
  const Shape sx = x.shape(), sw = w.shape();
  const std::int64_t k = sw.h();
  const std::int64_t oh = (sx.h() + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const std::int64_t ow = (sx.w() + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  out_shape = Shape{sx.n(), sw.n(), oh, ow};
  std::vector<double> out(static_cast<std::size_t>(out_shape.numel()), 0.0);
  std::size_t o = 0;
  for (std::int64_t n = 0; n < sx.n(); ++n)
    for (std::int64_t co = 0; co < sw.n(); ++co)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx, ++o) {
          double acc = bias.defined() ? bias.values()[co] : 0.0;
          for (std::int64_t ci = 0; ci < sx.c(); ++ci)
            for (std::int64_t ki = 0; ki < k; ++ki)
              for (std::int64_t kj = 0; kj < k; ++kj) {
                const std::int64_t iy = y * stride - pad + ki * dil, ix = xx * stride - pad + kj * dil;
                if (iy < 0 || iy >= sx.h() || ix < 0 || ix >= sx.w()) continue;
                acc += w.at(co, ci, ki, kj) * x.at(n, ci, iy, ix);
              }
          out[o] = acc;
        }
  return out;
}

/// Triple-loop product of two row-major matrices.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::int64_t m,
                                  std::int64_t k, std::int64_t n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

/// Partial convolution window by window: valid taps counted directly, the
/// renormalization factor is (in-bounds taps) / (valid taps).
inline std::pair<std::vector<double>, std::vector<double>> partial_conv(const Tensor& x, const Tensor& mask,
                                                                        const Tensor& w, const Tensor& bias,
                                                                        int stride) {
  const Shape sx = x.shape(), sw = w.shape();
  const std::int64_t k = sw.h(), pad = (k - 1) / 2;
  const std::int64_t oh = (sx.h() + 2 * pad - k) / stride + 1, ow = (sx.w() + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(sx.n() * sw.n() * oh * ow), 0.0);
  std::vector<double> new_mask(static_cast<std::size_t>(sx.n() * oh * ow), 0.0);
  for (std::int64_t n = 0; n < sx.n(); ++n)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        int inside = 0, valid = 0;
        for (std::int64_t ki = 0; ki < k; ++ki)
          for (std::int64_t kj = 0; kj < k; ++kj) {
            const std::int64_t iy = y * stride - pad + ki, ix = xx * stride - pad + kj;
            if (iy < 0 || iy >= sx.h() || ix < 0 || ix >= sx.w()) continue;
            ++inside;
            if (mask.at(n, 0, iy, ix) == 1.0) ++valid;
          }
        if (valid == 0) continue;
        new_mask[(n * oh + y) * ow + xx] = 1.0;
        for (std::int64_t co = 0; co < sw.n(); ++co) {
          double acc = 0;
          for (std::int64_t ci = 0; ci < sx.c(); ++ci)
            for (std::int64_t ki = 0; ki < k; ++ki)
              for (std::int64_t kj = 0; kj < k; ++kj) {
                const std::int64_t iy = y * stride - pad + ki, ix = xx * stride - pad + kj;
                if (iy < 0 || iy >= sx.h() || ix < 0 || ix >= sx.w()) continue;
                acc += w.at(co, ci, ki, kj) * x.at(n, ci, iy, ix) * mask.at(n, 0, iy, ix);
              }
          out[((n * sw.n() + co) * oh + y) * ow + xx] =
              acc * static_cast<double>(inside) / static_cast<double>(valid) + (bias.defined() ? bias.values()[co] : 0.0);
        }
      }
  return {out, new_mask};
}

/// Mean |a - b| by a single loop.
inline double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += std::abs(a.values()[i] - b.values()[i]);
  return acc / static_cast<double>(a.numel());
}

/// Gram matrix of sample n with explicit channel-pair sums, row-major c x c.
inline std::vector<double> gram(const Tensor& phi, std::int64_t n) {
  const Shape s = phi.shape();
  std::vector<double> g(static_cast<std::size_t>(s.c() * s.c()), 0.0);
  for (std::int64_t i = 0; i < s.c(); ++i)
    for (std::int64_t j = 0; j < s.c(); ++j) {
      double acc = 0;
      for (std::int64_t y = 0; y < s.h(); ++y)
        for (std::int64_t x = 0; x < s.w(); ++x) acc += phi.at(n, i, y, x) * phi.at(n, j, y, x);
      g[i * s.c() + j] = acc / static_cast<double>(s.c() * s.plane());
    }
  return g;
}

/// Relativistic-average losses evaluated element by element:
/// returns {L_G, L_D} with log clamped at 1e-8.
inline std::pair<double, double> adv_losses(const std::vector<double>& real, const std::vector<double>& fake) {
  double mr = 0, mf = 0;
  for (double v : real) mr += v;
  for (double v : fake) mf += v;
  mr /= static_cast<double>(real.size());
  mf /= static_cast<double>(fake.size());
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  auto lg = [](double p) { return std::log(std::max(p, 1e-8)); };
  double g_real = 0, g_fake = 0, d_real = 0, d_fake = 0;
  for (double v : real) {
    g_real += lg(1.0 - sig(v - mf));
    d_real += lg(sig(v - mf));
  }
  for (double v : fake) {
    g_fake += lg(sig(v - mr));
    d_fake += lg(1.0 - sig(v - mr));
  }
  const double nr = static_cast<double>(real.size()), nf = static_cast<double>(fake.size());
  return {-g_real / nr - g_fake / nf, -d_real / nr - d_fake / nf};
}

/// SSIM from its definition: every 7x7 window's means, population variances
/// and covariance computed directly, on values mapped to [0, 1].
inline double ssim(const Tensor& a, const Tensor& b) {
  const Shape s = a.shape();
  const int W = 7;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  std::int64_t windows = 0;
  for (std::int64_t n = 0; n < s.n(); ++n)
    for (std::int64_t c = 0; c < s.c(); ++c)
      for (std::int64_t y = 0; y + W <= s.h(); ++y)
        for (std::int64_t x = 0; x + W <= s.w(); ++x) {
          double mx = 0, my = 0;
          for (int i = 0; i < W; ++i)
            for (int j = 0; j < W; ++j) {
              mx += (a.at(n, c, y + i, x + j) + 1) / 2;
              my += (b.at(n, c, y + i, x + j) + 1) / 2;
            }
          mx /= W * W;
          my /= W * W;
          double vx = 0, vy = 0, cov = 0;
          for (int i = 0; i < W; ++i)
            for (int j = 0; j < W; ++j) {
              const double dx = (a.at(n, c, y + i, x + j) + 1) / 2 - mx, dy = (b.at(n, c, y + i, x + j) + 1) / 2 - my;
              vx += dx * dx;
              vy += dy * dy;
              cov += dx * dy;
            }
          vx /= W * W;
          vy /= W * W;
          cov /= W * W;
          total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++windows;
        }
  return total / static_cast<double>(windows);
}

/// x^2 whose backward rule is deliberately wrong (derivative 2.2x); negative
/// control for the gradient checker.
inline Tensor corrupted_square(const Tensor& x) {
  std::vector<double> v(x.values().begin(), x.values().end());
  for (auto& e : v) e = e * e;
  return detail::make_result(x.shape(), std::move(v), {&x}, [](detail::Node& self) {
    auto& in = self.inputs[0];
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 2.2 * in->value[i];
  });
}

}  // namespace medfe::oracle
