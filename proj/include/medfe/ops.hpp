#pragma once

// Differentiable tensor primitives: broadcasting arithmetic, pointwise
// activations, reductions, layout changes and batched matrix products.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "medfe/parallel.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out;
  for (std::size_t i = 0; i < 4; ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out.dims[i] = a[i];
    } else if (a[i] == 1) {
      out.dims[i] = b[i];
    } else {
      throw ContractViolation(std::string(op) + ": shapes " + a.str() + " and " + b.str() + " do not broadcast");
    }
  }
  return out;
}

inline std::array<std::int64_t, 4> broadcast_strides(const Shape& s) {
  std::array<std::int64_t, 4> st{s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
  for (std::size_t i = 0; i < 4; ++i)
    if (s[i] == 1) st[i] = 0;
  return st;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const auto sa = broadcast_strides(a);
  const auto sb = broadcast_strides(b);
  std::int64_t o = 0;
  for (std::int64_t i0 = 0; i0 < out[0]; ++i0)
    for (std::int64_t i1 = 0; i1 < out[1]; ++i1)
      for (std::int64_t i2 = 0; i2 < out[2]; ++i2) {
        std::int64_t ia = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        std::int64_t ib = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (std::int64_t i3 = 0; i3 < out[3]; ++i3, ++o, ia += sa[3], ib += sb[3]) fn(o, ia, ib);
      }
}

enum class BinaryKind { Add, Sub, Mul, Div };

inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<double> out(static_cast<std::size_t>(out_shape.numel()));
  const double* pa = a.data();
  const double* pb = b.data();
  const bool same = a.shape() == b.shape();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      case BinaryKind::Mul: return x * y;
      case BinaryKind::Div: return x / y;
    }
    return 0.0;
  };
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(pa[i], pb[i]);
  } else {
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t ib) { out[o] = apply(pa[ia], pb[ib]); });
  }
  return make_result(out_shape, std::move(out), {&a, &b}, [kind, same, out_shape](Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs.size() > 1 ? self.inputs[1] : self.inputs[0];
    std::vector<double>* ga = grad_sink(na);
    std::vector<double>* gb = grad_sink(nb);
    const auto& g = self.grad;
    const auto& va = na->value;
    const auto& vb = nb->value;
    auto accumulate = [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      const double go = g[o];
      switch (kind) {
        case BinaryKind::Add:
          if (ga) (*ga)[ia] += go;
          if (gb) (*gb)[ib] += go;
          break;
        case BinaryKind::Sub:
          if (ga) (*ga)[ia] += go;
          if (gb) (*gb)[ib] -= go;
          break;
        case BinaryKind::Mul:
          if (ga) (*ga)[ia] += go * vb[ib];
          if (gb) (*gb)[ib] += go * va[ia];
          break;
        case BinaryKind::Div:
          if (ga) (*ga)[ia] += go / vb[ib];
          if (gb) (*gb)[ib] -= go * va[ia] / (vb[ib] * vb[ib]);
          break;
      }
    };
    if (same) {
      for (std::int64_t i = 0; i < out_shape.numel(); ++i) accumulate(i, i, i);
    } else {
      for_each_broadcast(out_shape, na->shape, nb->shape, accumulate);
    }
  });
}

// Pointwise op with derivative expressed through input x and output y.
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  const double* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  return make_result(x.shape(), std::move(out), {&x}, [df](Node& self) {
    auto& in = self.inputs[0];
    auto& gx = in->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(in->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::Div, a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor leaky_relu(const Tensor& x, double alpha = 0.2) {
  return detail::unary(
      x, [alpha](double v) { return v > 0 ? v : alpha * v; }, [alpha](double v, double) { return v > 0 ? 1.0 : alpha; });
}

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); }, [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// log(max(x, eps)); the gradient is zero where the clamp is active.
inline Tensor log_clamped(const Tensor& x, double eps = 1e-8) {
  return detail::unary(
      x, [eps](double v) { return std::log(std::max(v, eps)); },
      [eps](double v, double) { return v > eps ? 1.0 / v : 0.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Bit set over (n, c, h, w).
enum Dim : unsigned { kN = 1u, kC = 2u, kH = 4u, kW = 8u, kSpatial = kH | kW, kAll = 15u };

enum class ReduceKind { Sum, Mean };

/// Sum or mean over the dims in `dims`; reduced dims become singleton.
inline Tensor reduce(ReduceKind kind, const Tensor& x, unsigned dims) {
  require(x.defined() && x.numel() > 0, "reduce: empty tensor");
  require(dims != 0 && dims <= kAll, "reduce: invalid dim set");
  const Shape in = x.shape();
  Shape out = in;
  std::int64_t count = 1;
  for (std::size_t i = 0; i < 4; ++i)
    if (dims & (1u << i)) {
      out.dims[i] = 1;
      count *= in[i];
    }
  const double factor = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<double> acc(static_cast<std::size_t>(out.numel()), 0.0);
  const double* px = x.data();
  detail::for_each_broadcast(in, in, out,
                             [&](std::int64_t i, std::int64_t, std::int64_t o) { acc[o] += px[i]; });
  if (factor != 1.0)
    for (auto& v : acc) v *= factor;
  return detail::make_result(out, std::move(acc), {&x}, [in, out, factor](detail::Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    detail::for_each_broadcast(in, in, out,
                               [&](std::int64_t i, std::int64_t, std::int64_t o) { gx[i] += self.grad[o] * factor; });
  });
}

inline Tensor sum(const Tensor& x, unsigned dims = kAll) { return reduce(ReduceKind::Sum, x, dims); }
inline Tensor mean(const Tensor& x, unsigned dims = kAll) { return reduce(ReduceKind::Mean, x, dims); }

/// Same values, new shape with equal element count.
inline Tensor reshape(const Tensor& x, Shape s) {
  require(s.numel() == x.numel(), "reshape: " + x.shape().str() + " -> " + s.str());
  std::vector<double> v(x.values().begin(), x.values().end());
  return detail::make_result(s, std::move(v), {&x}, [](detail::Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Output dim i is input dim perm[i].
inline Tensor permute(const Tensor& x, std::array<int, 4> perm) {
  std::array<bool, 4> used{};
  for (int p : perm) {
    require(p >= 0 && p < 4 && !used[static_cast<std::size_t>(p)], "permute: invalid permutation");
    used[static_cast<std::size_t>(p)] = true;
  }
  const Shape in = x.shape();
  Shape out;
  for (std::size_t i = 0; i < 4; ++i) out.dims[i] = in[static_cast<std::size_t>(perm[i])];
  const std::array<std::int64_t, 4> in_strides{in[1] * in[2] * in[3], in[2] * in[3], in[3], 1};
  std::array<std::int64_t, 4> st{};
  for (std::size_t i = 0; i < 4; ++i) st[i] = in_strides[static_cast<std::size_t>(perm[i])];
  std::vector<std::int64_t> src(static_cast<std::size_t>(out.numel()));
  std::int64_t o = 0;
  for (std::int64_t a = 0; a < out[0]; ++a)
    for (std::int64_t b = 0; b < out[1]; ++b)
      for (std::int64_t c = 0; c < out[2]; ++c)
        for (std::int64_t d = 0; d < out[3]; ++d) src[o++] = a * st[0] + b * st[1] + c * st[2] + d * st[3];
  std::vector<double> v(src.size());
  const double* px = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = px[src[i]];
  return detail::make_result(out, std::move(v), {&x}, [src = std::move(src)](detail::Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += self.grad[i];
  });
}

/// Concatenation along one axis (0..3); all other dims must agree.
inline Tensor concat(const std::vector<Tensor>& parts, int axis = 1) {
  require(!parts.empty(), "concat: no inputs");
  require(axis >= 0 && axis < 4, "concat: axis out of range");
  const auto ax = static_cast<std::size_t>(axis);
  Shape out = parts[0].shape();
  out.dims[ax] = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < 4; ++i)
      if (i != ax)
        require(p.shape()[i] == parts[0].shape()[i],
                "concat: " + p.shape().str() + " vs " + parts[0].shape().str() + " on axis " + std::to_string(axis));
    out.dims[ax] += p.shape()[ax];
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out[i];
  for (std::size_t i = ax + 1; i < 4; ++i) inner *= out[i];
  std::vector<double> v(static_cast<std::size_t>(out.numel()));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t len = p.shape()[ax] * inner;
    const double* src = p.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(src + o * len, src + (o + 1) * len, v.begin() + o * out[ax] * inner + off * inner);
    off += p.shape()[ax];
  }
  return detail::make_result(out, std::move(v), parts, [outer, inner, ax, out, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      const std::int64_t len = in->shape[ax] * inner;
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = self.grad.data() + o * out[ax] * inner + offsets[k] * inner;
        double* dst = g.data() + o * len;
        for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Spatial window [top, top+height) x [left, left+width).
inline Tensor crop(const Tensor& x, std::int64_t top, std::int64_t left, std::int64_t height, std::int64_t width) {
  const Shape in = x.shape();
  require(height >= 1 && width >= 1 && top >= 0 && left >= 0 && top + height <= in.h() && left + width <= in.w(),
          "crop: window out of range for " + in.str());
  const Shape out{in.n(), in.c(), height, width};
  std::vector<double> v(static_cast<std::size_t>(out.numel()));
  std::int64_t o = 0;
  for (std::int64_t p = 0; p < in.n() * in.c(); ++p)
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t xx = 0; xx < width; ++xx) v[o++] = x.data()[(p * in.h() + top + y) * in.w() + left + xx];
  return detail::make_result(out, std::move(v), {&x}, [in, top, left, height, width](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    std::int64_t o = 0;
    for (std::int64_t p = 0; p < in.n() * in.c(); ++p)
      for (std::int64_t y = 0; y < height; ++y)
        for (std::int64_t xx = 0; xx < width; ++xx) g[(p * in.h() + top + y) * in.w() + left + xx] += self.grad[o++];
  });
}

/// Selects batch entries [first, first+count).
inline Tensor slice_batch(const Tensor& x, std::int64_t first, std::int64_t count) {
  const Shape in = x.shape();
  require(first >= 0 && count >= 1 && first + count <= in.n(), "slice_batch: range out of bounds");
  const std::int64_t per = in.c() * in.h() * in.w();
  std::vector<double> v(x.data() + first * per, x.data() + (first + count) * per);
  return detail::make_result(Shape{count, in.c(), in.h(), in.w()}, std::move(v), {&x},
                             [first, per](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[static_cast<std::size_t>(first * per) + i] += self.grad[i];
                             });
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
}  // namespace detail

/// Batched product over the last two dims: a (Na,1,m,k) x b (Nb,1,k,n) ->
/// (max(Na,Nb),1,m,n); a batch dim of 1 broadcasts.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape sa = a.shape(), sb = b.shape();
  require(sa.c() == 1 && sb.c() == 1, "matmul: operands must have a singleton channel dim");
  require(sa.w() == sb.h(), "matmul: inner dims " + sa.str() + " x " + sb.str());
  require(sa.n() == sb.n() || sa.n() == 1 || sb.n() == 1, "matmul: batch dims do not broadcast");
  const std::int64_t batch = std::max(sa.n(), sb.n());
  const std::int64_t m = sa.h(), k = sa.w(), n = sb.w();
  const Shape out{batch, 1, m, n};
  std::vector<double> v(static_cast<std::size_t>(out.numel()));
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::ConstMapMat A(a.data() + (sa.n() == 1 ? 0 : i) * m * k, m, k);
    detail::ConstMapMat B(b.data() + (sb.n() == 1 ? 0 : i) * k * n, k, n);
    detail::MapMat C(v.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return detail::make_result(out, std::move(v), {&a, &b}, [sa, sb, batch, m, k, n](detail::Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs[1];
    for (std::int64_t i = 0; i < batch; ++i) {
      detail::ConstMapMat G(self.grad.data() + i * m * n, m, n);
      const std::int64_t ia = sa.n() == 1 ? 0 : i;
      const std::int64_t ib = sb.n() == 1 ? 0 : i;
      if (na->requires_grad) {
        detail::MapMat GA(na->grad_buffer().data() + ia * m * k, m, k);
        detail::ConstMapMat B(nb->value.data() + ib * k * n, k, n);
        GA.noalias() += G * B.transpose();
      }
      if (nb->requires_grad) {
        detail::MapMat GB(nb->grad_buffer().data() + ib * k * n, k, n);
        detail::ConstMapMat A(na->value.data() + ia * m * k, m, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

/// Swaps the last two dims.
inline Tensor transpose(const Tensor& x) { return permute(x, {0, 1, 3, 2}); }

/// Softmax along one axis.
inline Tensor softmax(const Tensor& x, int axis) {
  require(axis >= 0 && axis < 4, "softmax: axis out of range");
  const Shape s = x.shape();
  const auto ax = static_cast<std::size_t>(axis);
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < 4; ++i) inner *= s[i];
  const std::int64_t len = s[ax];
  std::vector<double> v(static_cast<std::size_t>(s.numel()));
  const double* px = x.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = px[base];
      for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      double z = 0;
      for (std::int64_t j = 0; j < len; ++j) z += (v[base + j * inner] = std::exp(px[base + j * inner] - mx));
      for (std::int64_t j = 0; j < len; ++j) v[base + j * inner] /= z;
    }
  return detail::make_result(s, std::move(v), {&x}, [outer, inner, len](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        double dot = 0;
        for (std::int64_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * self.value[base + j * inner];
        for (std::int64_t j = 0; j < len; ++j) {
          const std::int64_t idx = base + j * inner;
          g[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

/// Element-wise product with a tensor that is never differentiated (masks,
/// renormalization maps). Cheaper than mul() since b needs no gradient.
inline Tensor mul_const(const Tensor& a, const Tensor& b) { return mul(a, b.requires_grad() ? b.detach() : b); }

}  // namespace medfe
