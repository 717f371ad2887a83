#pragma once

// Procedural masks, the edge-aware structure smoother and synthetic samples.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "medfe/errors.hpp"
#include "medfe/layers.hpp"
#include "medfe/random.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

enum class MaskKind { Center, Irregular };

/// Hole-ratio buckets; the first one covers (0, 10%].
struct MaskBucket {
  double lo = 0.0, hi = 0.1;
  std::string label;
};

inline const std::array<MaskBucket, 5>& mask_buckets() {
  static const std::array<MaskBucket, 5> buckets{{{0.0, 0.1, "0-10"},
                                                  {0.1, 0.2, "10-20"},
                                                  {0.2, 0.3, "20-30"},
                                                  {0.3, 0.4, "30-40"},
                                                  {0.4, 0.5, "40-50"}}};
  return buckets;
}

inline int parse_bucket(const std::string& s) {
  const auto& b = mask_buckets();
  for (std::size_t i = 0; i < b.size(); ++i)
    if (s == b[i].label || s == std::to_string(i)) return static_cast<int>(i);
  throw ContractViolation("unknown mask bucket '" + s + "' (expected 0-10, 10-20, 20-30, 30-40 or 40-50)");
}

/// Smallest hole ratio generated for the lowest bucket.
inline constexpr double kMinHoleRatio = 0.01;
inline constexpr int kMaxStrokes = 1000;

struct MaskSpec {
  MaskKind kind = MaskKind::Center;
  int bucket = 0;
  std::uint64_t seed = 0;
};

/// Centered rectangular hole of half the height and width.
inline Mask gen_center_mask(std::int64_t h, std::int64_t w, std::int64_t batch = 1) {
  require(h >= 2 && w >= 2, "center mask needs at least 2x2 pixels");
  const std::int64_t hh = h / 2, hw = w / 2, top = (h - hh) / 2, left = (w - hw) / 2;
  std::vector<double> v(static_cast<std::size_t>(batch * h * w), 1.0);
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t y = top; y < top + hh; ++y)
      for (std::int64_t x = left; x < left + hw; ++x) v[(n * h + y) * w + x] = 0.0;
  return Mask(Tensor::from(Shape{batch, 1, h, w}, std::move(v)));
}

/// Random brush strokes stamped as discs until the hole ratio reaches a
/// target drawn inside the bucket. The target leaves room for one more disc,
/// so the final ratio never leaves the bucket.
inline Mask gen_irregular_mask(std::int64_t h, std::int64_t w, int bucket, std::uint64_t seed) {
  require(bucket >= 0 && bucket < static_cast<int>(mask_buckets().size()), "mask bucket out of range");
  const MaskBucket& b = mask_buckets()[static_cast<std::size_t>(bucket)];
  const double area = static_cast<double>(h * w);
  const double lo = std::max(b.lo, kMinHoleRatio);
  int max_radius = static_cast<int>(std::max<std::int64_t>(1, std::min(h, w) / 16));
  while (max_radius > 0 && (2.0 * max_radius + 1) * (2.0 * max_radius + 1) / area > (b.hi - lo) / 2) --max_radius;
  const double stamp = (2.0 * max_radius + 1) * (2.0 * max_radius + 1) / area;
  require(stamp < b.hi - lo, "image too small for mask bucket " + b.label);

  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(bucket), 0x6d61736bULL));
  const double target = rng.uniform(lo, b.hi - stamp);
  std::vector<double> m(static_cast<std::size_t>(h * w), 1.0);
  std::int64_t holes = 0;
  auto ratio = [&] { return static_cast<double>(holes) / area; };
  auto stamp_disc = [&](double cy, double cx, int r) {
    const auto iy = static_cast<std::int64_t>(std::lround(cy)), ix = static_cast<std::int64_t>(std::lround(cx));
    for (std::int64_t y = std::max<std::int64_t>(0, iy - r); y <= std::min(h - 1, iy + r); ++y)
      for (std::int64_t x = std::max<std::int64_t>(0, ix - r); x <= std::min(w - 1, ix + r); ++x)
        if ((y - iy) * (y - iy) + (x - ix) * (x - ix) <= r * r && m[y * w + x] == 1.0) {
          m[y * w + x] = 0.0;
          ++holes;
        }
  };

  for (int stroke = 0; stroke < kMaxStrokes; ++stroke) {
    double y = rng.uniform(0, static_cast<double>(h - 1)), x = rng.uniform(0, static_cast<double>(w - 1));
    double heading = rng.uniform(0, 2 * std::numbers::pi);
    const int segments = static_cast<int>(rng.range(2, 6));
    for (int s = 0; s < segments; ++s) {
      heading += rng.uniform(-std::numbers::pi / 3, std::numbers::pi / 3);
      const int radius = static_cast<int>(rng.range(0, max_radius));
      const double length = rng.uniform(static_cast<double>(std::min(h, w)) / 16, static_cast<double>(std::min(h, w)) / 4);
      for (double t = 0; t < length; t += 1.0) {
        stamp_disc(y, x, radius);
        if (ratio() >= target) return Mask(Tensor::from(Shape{1, 1, h, w}, std::move(m)));
        double ny = y + std::sin(heading), nx = x + std::cos(heading);
        if (ny < 0 || ny > static_cast<double>(h - 1)) heading = -heading, ny = y + std::sin(heading);
        if (nx < 0 || nx > static_cast<double>(w - 1)) heading = std::numbers::pi - heading, nx = x + std::cos(heading);
        y = std::clamp(ny, 0.0, static_cast<double>(h - 1));
        x = std::clamp(nx, 0.0, static_cast<double>(w - 1));
      }
    }
  }
  throw ContractViolation("irregular mask: bucket " + b.label + " not reached after 1000 strokes");
}

inline Mask gen_mask(std::int64_t h, std::int64_t w, const MaskSpec& spec) {
  return spec.kind == MaskKind::Center ? gen_center_mask(h, w) : gen_irregular_mask(h, w, spec.bucket, spec.seed);
}

/// Stacks single-sample masks along the batch axis.
inline Mask stack_masks(const std::vector<Mask>& masks) {
  require(!masks.empty(), "stack_masks: empty list");
  std::vector<double> v;
  for (const auto& m : masks) {
    require(m.height() == masks[0].height() && m.width() == masks[0].width(), "stack_masks: size mismatch");
    v.insert(v.end(), m.tensor().values().begin(), m.tensor().values().end());
  }
  return Mask(Tensor::from(Shape{static_cast<std::int64_t>(masks.size()), 1, masks[0].height(), masks[0].width()},
                           std::move(v)));
}

/// Anisotropic total variation: sum of absolute horizontal and vertical differences.
inline double total_variation(const Tensor& img) {
  const Shape s = img.shape();
  double tv = 0;
  for (std::int64_t n = 0; n < s.n(); ++n)
    for (std::int64_t c = 0; c < s.c(); ++c)
      for (std::int64_t y = 0; y < s.h(); ++y)
        for (std::int64_t x = 0; x < s.w(); ++x) {
          if (x + 1 < s.w()) tv += std::abs(img.at(n, c, y, x + 1) - img.at(n, c, y, x));
          if (y + 1 < s.h()) tv += std::abs(img.at(n, c, y + 1, x) - img.at(n, c, y, x));
        }
  return tv;
}

struct SmoothingOptions {
  int iterations = 10;
  double theta = 0.1;
};

/// Iterated edge-aware smoothing. Each pass replaces every pixel p by
/// (I_p + sum_q w_pq I_q) / (1 + sum_q w_pq) over its 4-neighbors with
/// w_pq = exp(-|I_p - I_q|^2 / theta^2), the color difference taken across channels.
inline Tensor structure_image(const Tensor& img, SmoothingOptions opt = {}) {
  require(opt.theta > 0 && opt.iterations >= 0, "structure_image: theta must be positive");
  const Shape s = img.shape();
  const std::int64_t H = s.h(), W = s.w(), C = s.c(), P = s.plane();
  std::vector<double> cur(img.values().begin(), img.values().end()), next(cur.size());
  const double inv_t2 = 1.0 / (opt.theta * opt.theta);
  constexpr int dy[4] = {-1, 1, 0, 0};
  constexpr int dx[4] = {0, 0, -1, 1};
  for (int it = 0; it < opt.iterations; ++it) {
    for (std::int64_t n = 0; n < s.n(); ++n) {
      const double* base = cur.data() + n * C * P;
      double* out = next.data() + n * C * P;
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          const std::int64_t p = y * W + x;
          double wsum = 0;
          std::array<double, 4> wq{};
          for (int k = 0; k < 4; ++k) {
            const std::int64_t qy = y + dy[k], qx = x + dx[k];
            if (qy < 0 || qy >= H || qx < 0 || qx >= W) continue;
            const std::int64_t q = qy * W + qx;
            double d2 = 0;
            for (std::int64_t c = 0; c < C; ++c) {
              const double d = base[c * P + p] - base[c * P + q];
              d2 += d * d;
            }
            wq[k] = std::exp(-d2 * inv_t2);
            wsum += wq[k];
          }
          for (std::int64_t c = 0; c < C; ++c) {
            double acc = base[c * P + p];
            for (int k = 0; k < 4; ++k) {
              const std::int64_t qy = y + dy[k], qx = x + dx[k];
              if (wq[k] != 0.0) acc += wq[k] * base[c * P + qy * W + qx];
            }
            out[c * P + p] = acc / (1.0 + wsum);
          }
        }
    }
    cur.swap(next);
  }
  return Tensor::from(s, std::move(cur));
}

struct Sample {
  Tensor image;      // I_gt, (1, 3, h, w) in [-1, 1]
  Tensor structure;  // I_st
  Mask mask;
};

/// Procedural image: a linear color ramp, a few flat convex polygons and a
/// faint sinusoidal texture, clamped to [-1, 1].
inline Tensor synth_image(std::uint64_t seed, std::int64_t size) {
  require(size >= 4, "synthetic image size must be at least 4");
  Rng rng(mix_seed(seed, 0x73796e74ULL));
  const std::int64_t P = size * size;
  std::vector<double> img(static_cast<std::size_t>(3 * P));
  const double inv = 1.0 / static_cast<double>(size);
  for (int c = 0; c < 3; ++c) {
    const double base = rng.uniform(-0.5, 0.5), gy = rng.uniform(-0.8, 0.8), gx = rng.uniform(-0.8, 0.8);
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x)
        img[c * P + y * size + x] = base + gy * ((static_cast<double>(y) + 0.5) * inv - 0.5) +
                                    gx * ((static_cast<double>(x) + 0.5) * inv - 0.5);
  }

  const int polygons = static_cast<int>(rng.range(2, 4));
  for (int p = 0; p < polygons; ++p) {
    const double cy = rng.uniform(0.1, 0.9) * static_cast<double>(size);
    const double cx = rng.uniform(0.1, 0.9) * static_cast<double>(size);
    const double radius = rng.uniform(0.15, 0.4) * static_cast<double>(size);
    const int vertices = static_cast<int>(rng.range(3, 6));
    std::vector<double> angles(static_cast<std::size_t>(vertices));
    for (auto& a : angles) a = rng.uniform(0, 2 * std::numbers::pi);
    std::sort(angles.begin(), angles.end());
    std::vector<std::array<double, 2>> pts;
    for (double a : angles) pts.push_back({cy + radius * std::sin(a), cx + radius * std::cos(a)});
    std::array<double, 3> color{rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        bool inside = true;
        for (std::size_t i = 0; i < pts.size() && inside; ++i) {
          const auto& a = pts[i];
          const auto& b = pts[(i + 1) % pts.size()];
          // Vertices run counterclockwise in (x, y); inside is to the left of every edge.
          const double cross = (b[1] - a[1]) * (py - a[0]) - (b[0] - a[0]) * (px - a[1]);
          inside = cross >= 0;
        }
        if (inside)
          for (int c = 0; c < 3; ++c) img[c * P + y * size + x] = color[c];
      }
  }

  for (int t = 0; t < 2; ++t) {
    const double fy = rng.uniform(4, 10), fx = rng.uniform(4, 10), phase = rng.uniform(0, 2 * std::numbers::pi);
    const double amp = rng.uniform(0.02, 0.06);
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        const double v =
            amp * std::sin(2 * std::numbers::pi * (fy * static_cast<double>(y) + fx * static_cast<double>(x)) * inv +
                           phase);
        for (int c = 0; c < 3; ++c) img[c * P + y * size + x] += v;
      }
  }
  for (auto& v : img) v = std::clamp(v, -1.0, 1.0);
  return Tensor::from(Shape{1, 3, size, size}, std::move(img));
}

inline Sample synth_sample(std::uint64_t seed, std::int64_t size, const MaskSpec& mask = {}) {
  Tensor img = synth_image(seed, size);
  Tensor st = structure_image(img);
  return {img, st, gen_mask(size, size, mask)};
}

}  // namespace medfe
