#pragma once

// Convolution family lowered to GEMM through im2col / col2im. Columns for the
// whole batch are gathered into one (C*k*k) x (N*P) matrix so each op issues
// a single product per pass.

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "medfe/ops.hpp"
#include "medfe/parallel.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

struct ConvGeometry {
  std::int64_t channels, height, width;  // image side
  std::int64_t kernel, stride, padding, dilation;
  std::int64_t out_h, out_w;             // column side

  std::int64_t rows() const { return channels * kernel * kernel; }
  std::int64_t positions() const { return out_h * out_w; }
};

inline std::int64_t conv_out_size(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad,
                                  std::int64_t dil) {
  const std::int64_t span = in + 2 * pad - dil * (k - 1) - 1;
  return span < 0 ? 0 : span / stride + 1;
}

namespace detail {

// Writes the columns of one image into cols, whose rows have stride ld; the
// image occupies columns [col0, col0 + positions).
inline void im2col(const double* img, const ConvGeometry& g, double* cols, std::int64_t ld, std::int64_t col0) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld + col0;
        const double* plane = img + c * g.height * g.width;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki * g.dilation;
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj * g.dilation;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : 0.0;
          }
        }
      }
}

// Adjoint of im2col: scatters-and-adds columns back into the image.
inline void col2im(const double* cols, const ConvGeometry& g, std::int64_t ld, std::int64_t col0, double* img) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * ld + col0;
        double* plane = img + c * g.height * g.width;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.height) continue;
          const double* src = row + oh * g.out_w;
          double* dst = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj * g.dilation;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
}

inline RowMat batch_im2col(const double* data, std::int64_t batch, const ConvGeometry& g) {
  const std::int64_t P = g.positions();
  RowMat cols(g.rows(), batch * P);
  const std::int64_t image = g.channels * g.height * g.width;
  parallel_for(batch, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) im2col(data + b * image, g, cols.data(), batch * P, b * P);
  });
  return cols;
}

inline void batch_col2im(const RowMat& cols, std::int64_t batch, const ConvGeometry& g, double* data) {
  const std::int64_t P = g.positions();
  const std::int64_t image = g.channels * g.height * g.width;
  parallel_for(batch, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t b = b0; b < b1; ++b) col2im(cols.data(), g, batch * P, b * P, data + b * image);
  });
}

// (N, C, P) layout <-> C x (N*P) matrix.
inline RowMat nchw_to_matrix(const double* data, std::int64_t batch, std::int64_t channels, std::int64_t P) {
  RowMat m(channels, batch * P);
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t c = 0; c < channels; ++c)
      std::copy(data + (b * channels + c) * P, data + (b * channels + c + 1) * P, m.data() + c * batch * P + b * P);
  return m;
}

inline void matrix_to_nchw(const RowMat& m, std::int64_t batch, std::int64_t channels, std::int64_t P,
                           double* data) {
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t c = 0; c < channels; ++c)
      std::copy(m.data() + c * batch * P + b * P, m.data() + c * batch * P + (b + 1) * P,
                data + (b * channels + c) * P);
}

inline void check_bias(const Tensor& bias, std::int64_t channels, const char* op) {
  if (!bias.defined()) return;
  require(bias.numel() == channels, std::string(op) + ": bias has " + std::to_string(bias.numel()) +
                                        " entries, expected " + std::to_string(channels));
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. weight is (out_c, in_c, k, k);
/// bias holds out_c values in any shape (usually (1, out_c, 1, 1)) or is
/// undefined.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1, int padding = 0,
                     int dilation = 1) {
  const Shape si = input.shape(), sw = weight.shape();
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(dilation >= 1, "conv2d: dilation must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  require(sw.h() == sw.w() && sw.h() >= 1, "conv2d: kernel must be square, got " + sw.str());
  require(sw.c() == si.c(), "conv2d: weight " + sw.str() + " expects " + std::to_string(sw.c()) +
                                " input channels, input is " + si.str());
  detail::check_bias(bias, sw.n(), "conv2d");
  const ConvGeometry g{si.c(), si.h(), si.w(), sw.h(), stride, padding, dilation,
                       conv_out_size(si.h(), sw.h(), stride, padding, dilation),
                       conv_out_size(si.w(), sw.h(), stride, padding, dilation)};
  require(g.out_h >= 1 && g.out_w >= 1, "conv2d: kernel larger than padded input " + si.str());
  const std::int64_t N = si.n(), Cout = sw.n(), P = g.positions();

  detail::RowMat cols = detail::batch_im2col(input.data(), N, g);
  detail::ConstMapMat W(weight.data(), Cout, g.rows());
  detail::RowMat out = W * cols;
  if (bias.defined())
    for (std::int64_t c = 0; c < Cout; ++c) out.row(c).array() += bias.data()[c];
  const Shape so{N, Cout, g.out_h, g.out_w};
  std::vector<double> v(static_cast<std::size_t>(so.numel()));
  detail::matrix_to_nchw(out, N, Cout, P, v.data());

  return detail::make_result(so, std::move(v), {&input, &weight, &bias}, [g, N, Cout, P](detail::Node& self) {
    auto& nx = self.inputs[0];
    auto& nw = self.inputs[1];
    const detail::RowMat G = detail::nchw_to_matrix(self.grad.data(), N, Cout, P);
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (std::int64_t c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
    }
    if (nw->requires_grad) {
      const detail::RowMat cols = detail::batch_im2col(nx->value.data(), N, g);
      detail::MapMat GW(nw->grad_buffer().data(), Cout, g.rows());
      GW.noalias() += G * cols.transpose();
    }
    if (nx->requires_grad) {
      detail::ConstMapMat W(nw->value.data(), Cout, g.rows());
      const detail::RowMat dcols = W.transpose() * G;
      detail::batch_col2im(dcols, N, g, nx->grad_buffer().data());
    }
  });
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, int stride = 1, int padding = 0, int dilation = 1) {
  return conv2d(input, weight, Tensor{}, stride, padding, dilation);
}

/// Transposed convolution: the adjoint of conv2d with respect to its input.
/// weight is (in_c, out_c, k, k), the layout of the conv2d it transposes.
/// Output size = (h - 1) * stride - 2 * padding + k.
inline Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride = 1,
                               int padding = 0) {
  const Shape si = input.shape(), sw = weight.shape();
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  require(padding >= 0, "conv_transpose2d: padding must be >= 0");
  require(sw.h() == sw.w() && sw.h() >= 1, "conv_transpose2d: kernel must be square, got " + sw.str());
  require(sw.n() == si.c(), "conv_transpose2d: weight " + sw.str() + " expects " + std::to_string(sw.n()) +
                                " input channels, input is " + si.str());
  const std::int64_t k = sw.h(), Cout = sw.c(), Cin = si.c(), N = si.n();
  const std::int64_t oh = (si.h() - 1) * stride - 2 * padding + k;
  const std::int64_t ow = (si.w() - 1) * stride - 2 * padding + k;
  require(oh >= 1 && ow >= 1, "conv_transpose2d: empty output for " + si.str());
  detail::check_bias(bias, Cout, "conv_transpose2d");
  // Geometry of the forward conv whose input-gradient this is.
  const ConvGeometry g{Cout, oh, ow, k, stride, padding, 1, si.h(), si.w()};
  require(conv_out_size(oh, k, stride, padding, 1) == si.h() && conv_out_size(ow, k, stride, padding, 1) == si.w(),
          "conv_transpose2d: inconsistent geometry");
  const std::int64_t P = g.positions();

  const detail::RowMat X = detail::nchw_to_matrix(input.data(), N, Cin, P);
  detail::ConstMapMat W(weight.data(), Cin, g.rows());
  const detail::RowMat cols = W.transpose() * X;
  const Shape so{N, Cout, oh, ow};
  std::vector<double> v(static_cast<std::size_t>(so.numel()), 0.0);
  detail::batch_col2im(cols, N, g, v.data());
  if (bias.defined())
    for (std::int64_t b = 0; b < N; ++b)
      for (std::int64_t c = 0; c < Cout; ++c) {
        double* plane = v.data() + (b * Cout + c) * oh * ow;
        for (std::int64_t i = 0; i < oh * ow; ++i) plane[i] += bias.data()[c];
      }

  return detail::make_result(so, std::move(v), {&input, &weight, &bias}, [g, N, Cin, Cout, P](detail::Node& self) {
    auto& nx = self.inputs[0];
    auto& nw = self.inputs[1];
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      const std::int64_t plane = g.height * g.width;
      for (std::int64_t b = 0; b < N; ++b)
        for (std::int64_t c = 0; c < Cout; ++c) {
          const double* src = self.grad.data() + (b * Cout + c) * plane;
          double s = 0;
          for (std::int64_t i = 0; i < plane; ++i) s += src[i];
          gb[c] += s;
        }
    }
    const detail::RowMat gcols = detail::batch_im2col(self.grad.data(), N, g);
    if (nw->requires_grad) {
      const detail::RowMat X = detail::nchw_to_matrix(nx->value.data(), N, Cin, P);
      detail::MapMat GW(nw->grad_buffer().data(), Cin, g.rows());
      GW.noalias() += X * gcols.transpose();
    }
    if (nx->requires_grad) {
      detail::ConstMapMat W(nw->value.data(), Cin, g.rows());
      const detail::RowMat GX = W * gcols;
      std::vector<double> tmp(static_cast<std::size_t>(N * Cin * P));
      detail::matrix_to_nchw(GX, N, Cin, P, tmp.data());
      auto& gx = nx->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i];
    }
  });
}

/// Gathers the k x k zero-padded neighbourhood of every position:
/// output (n, h*w, k*k, c), entry (p, j, :) is the channel vector of neighbour
/// j (row-major inside the window) of position p.
inline Tensor neighborhood_unfold(const Tensor& input, int k) {
  require(k >= 1 && k % 2 == 1, "neighborhood_unfold: kernel size must be odd, got " + std::to_string(k));
  const Shape s = input.shape();
  const std::int64_t N = s.n(), C = s.c(), H = s.h(), W = s.w(), KK = std::int64_t{k} * k, r = k / 2;
  const Shape so{N, H * W, KK, C};
  // src[i] = flat input index of output i, or -1 for padding.
  std::vector<std::int64_t> src(static_cast<std::size_t>(so.numel()));
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < N; ++b)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x)
        for (std::int64_t dy = -r; dy <= r; ++dy)
          for (std::int64_t dx = -r; dx <= r; ++dx) {
            const std::int64_t yy = y + dy, xx = x + dx;
            const bool inside = yy >= 0 && yy < H && xx >= 0 && xx < W;
            for (std::int64_t c = 0; c < C; ++c) src[o++] = inside ? ((b * C + c) * H + yy) * W + xx : -1;
          }
  std::vector<double> v(src.size());
  const double* px = input.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = src[i] >= 0 ? px[src[i]] : 0.0;
  return detail::make_result(so, std::move(v), {&input}, [src = std::move(src)](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i)
      if (src[i] >= 0) g[src[i]] += self.grad[i];
  });
}

enum class ResizeMode { Nearest, Bilinear };

/// Spatial resampling. Nearest picks floor(dst * in / out); bilinear uses the
/// align-corners-false convention with source coordinates clamped at 0.
inline Tensor resize(const Tensor& input, std::int64_t out_h, std::int64_t out_w, ResizeMode mode) {
  require(out_h >= 1 && out_w >= 1, "resize: target dims must be >= 1");
  const Shape s = input.shape();
  const std::int64_t H = s.h(), W = s.w(), planes = s.n() * s.c();
  if (out_h == H && out_w == W) return reshape(input, s);

  // Per-axis taps: (i0, i1, weight of i1).
  struct Tap {
    std::int64_t i0, i1;
    double t;
  };
  auto taps = [mode](std::int64_t in, std::int64_t out) {
    std::vector<Tap> v(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t d = 0; d < out; ++d) {
      if (mode == ResizeMode::Nearest) {
        const auto i = std::min<std::int64_t>(in - 1, static_cast<std::int64_t>(std::floor(d * scale)));
        v[d] = {i, i, 0.0};
      } else {
        const double src = std::max(0.0, (d + 0.5) * scale - 0.5);
        const auto i0 = std::min<std::int64_t>(in - 1, static_cast<std::int64_t>(std::floor(src)));
        const auto i1 = std::min<std::int64_t>(in - 1, i0 + 1);
        v[d] = {i0, i1, src - static_cast<double>(i0)};
      }
    }
    return v;
  };
  const auto ty = taps(H, out_h), tx = taps(W, out_w);
  const Shape so{s.n(), s.c(), out_h, out_w};
  std::vector<double> v(static_cast<std::size_t>(so.numel()));
  const double* px = input.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* plane = px + p * H * W;
    for (std::int64_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[y];
      for (std::int64_t x = 0; x < out_w; ++x) {
        const Tap& b = tx[x];
        const double top = plane[a.i0 * W + b.i0] * (1 - b.t) + plane[a.i0 * W + b.i1] * b.t;
        const double bot = plane[a.i1 * W + b.i0] * (1 - b.t) + plane[a.i1 * W + b.i1] * b.t;
        v[(p * out_h + y) * out_w + x] = top * (1 - a.t) + bot * a.t;
      }
    }
  }
  return detail::make_result(so, std::move(v), {&input}, [ty, tx, planes, H, W, out_h, out_w](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t p = 0; p < planes; ++p) {
      double* plane = g.data() + p * H * W;
      for (std::int64_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[y];
        for (std::int64_t x = 0; x < out_w; ++x) {
          const Tap& b = tx[x];
          const double go = self.grad[(p * out_h + y) * out_w + x];
          plane[a.i0 * W + b.i0] += go * (1 - a.t) * (1 - b.t);
          plane[a.i0 * W + b.i1] += go * (1 - a.t) * b.t;
          plane[a.i1 * W + b.i0] += go * a.t * (1 - b.t);
          plane[a.i1 * W + b.i1] += go * a.t * b.t;
        }
      }
    }
  });
}

}  // namespace medfe
