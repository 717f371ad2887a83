#pragma once

// Composite layers: plain and transposed convolutions with owned parameters,
// partial convolution with mask update, squeeze-excitation, dilated residual
// blocks and spectral normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/conv.hpp"
#include "medfe/ops.hpp"
#include "medfe/random.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

inline constexpr double kLeakySlope = 0.2;

/// Collects (name, tensor) handles; tensors share storage with the layers.
class ParameterList {
 public:
  void add(std::string name, const Tensor& t) { entries_.push_back({std::move(name), t}); }
  const std::vector<NamedTensor>& entries() const& { return entries_; }
  std::vector<NamedTensor>& entries() & { return entries_; }
  std::vector<NamedTensor> entries() && { return std::move(entries_); }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

 private:
  std::vector<NamedTensor> entries_;
};

/// Weight init: zero-mean normal with std = gain / sqrt(fan_in).
inline Tensor init_weight(Shape s, std::int64_t fan_in, Rng& rng, double gain) {
  return randn(s, rng, gain / std::sqrt(static_cast<double>(fan_in)), true);
}

inline double leaky_gain(double slope = kLeakySlope) { return std::sqrt(2.0 / (1.0 + slope * slope)); }

struct ConvLayer {
  Tensor weight;  // (out_c, in_c, k, k)
  Tensor bias;    // (1, out_c, 1, 1) or undefined
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  static ConvLayer make(std::int64_t in_c, std::int64_t out_c, int k, int stride, int padding, Rng& rng,
                        bool with_bias = true, int dilation = 1, double gain = leaky_gain()) {
    ConvLayer l;
    l.weight = init_weight(Shape{out_c, in_c, k, k}, in_c * k * k, rng, gain);
    if (with_bias) l.bias = Tensor::zeros(Shape{1, out_c, 1, 1}, true);
    l.stride = stride;
    l.padding = padding;
    l.dilation = dilation;
    return l;
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding, dilation); }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.add(prefix + ".weight", weight);
    if (bias.defined()) out.add(prefix + ".bias", bias);
  }
};

struct ConvTransposeLayer {
  Tensor weight;  // (in_c, out_c, k, k)
  Tensor bias;    // (1, out_c, 1, 1)
  int stride = 2;
  int padding = 1;

  static ConvTransposeLayer make(std::int64_t in_c, std::int64_t out_c, int k, int stride, int padding, Rng& rng,
                                 double gain = leaky_gain()) {
    ConvTransposeLayer l;
    // Each output sees about in_c * k * k / stride^2 taps.
    const std::int64_t fan_in = std::max<std::int64_t>(1, in_c * k * k / (std::int64_t{stride} * stride));
    l.weight = init_weight(Shape{in_c, out_c, k, k}, fan_in, rng, gain);
    l.bias = Tensor::zeros(Shape{1, out_c, 1, 1}, true);
    l.stride = stride;
    l.padding = padding;
    return l;
  }

  Tensor forward(const Tensor& x) const { return conv_transpose2d(x, weight, bias, stride, padding); }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.add(prefix + ".weight", weight);
    out.add(prefix + ".bias", bias);
  }
};

/// Binary validity map (n, 1, h, w): 1 = valid pixel, 0 = hole.
class Mask {
 public:
  Mask() = default;
  explicit Mask(Tensor t) : t_(std::move(t)) {
    require(t_.shape().c() == 1, "Mask: expected a single channel, got " + t_.shape().str());
    for (double v : t_.values()) require(v == 0.0 || v == 1.0, "Mask: values must be 0 or 1");
    if (t_.requires_grad()) t_ = t_.detach();
  }

  static Mask ones(std::int64_t n, std::int64_t h, std::int64_t w) { return Mask(Tensor::full(Shape{n, 1, h, w}, 1.0)); }
  static Mask zeros(std::int64_t n, std::int64_t h, std::int64_t w) { return Mask(Tensor::zeros(Shape{n, 1, h, w})); }

  const Tensor& tensor() const { return t_; }
  const Shape& shape() const { return t_.shape(); }
  std::int64_t height() const { return t_.shape().h(); }
  std::int64_t width() const { return t_.shape().w(); }

  /// Fraction of hole pixels, 1 - mean(M).
  double hole_ratio() const {
    double s = 0;
    for (double v : t_.values()) s += v;
    return 1.0 - s / static_cast<double>(t_.numel());
  }
  bool all_valid() const {
    return std::all_of(t_.values().begin(), t_.values().end(), [](double v) { return v == 1.0; });
  }

  Mask resized(std::int64_t h, std::int64_t w) const {
    NoGradGuard guard;
    return Mask(resize(t_, h, w, ResizeMode::Nearest));
  }

  /// Elementwise maximum (union of valid regions).
  Mask united(const Mask& other) const {
    require(shape() == other.shape(), "Mask::united: shape mismatch");
    std::vector<double> v(t_.values().begin(), t_.values().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(v[i], other.t_.values()[i]);
    return Mask(Tensor::from(shape(), std::move(v)));
  }

  /// Hole (0) <-> valid (1) flipped, as a plain tensor.
  Tensor holes() const {
    std::vector<double> v(t_.values().begin(), t_.values().end());
    for (auto& x : v) x = 1.0 - x;
    return Tensor::from(shape(), std::move(v));
  }

  Mask batch_entry(std::int64_t i) const {
    NoGradGuard guard;
    return Mask(slice_batch(t_, i, 1));
  }

 private:
  Tensor t_;
};

struct PartialConvLayer {
  ConvLayer conv;  // bias applied only where the window had valid taps
  int kernel = 3;

  static PartialConvLayer make(std::int64_t in_c, std::int64_t out_c, int k, int stride, Rng& rng) {
    require(k >= 1 && k % 2 == 1, "PartialConvLayer: kernel must be odd, got " + std::to_string(k));
    PartialConvLayer l;
    l.conv = ConvLayer::make(in_c, out_c, k, stride, (k - 1) / 2, rng);
    l.kernel = k;
    return l;
  }

  void collect(ParameterList& out, const std::string& prefix) const { conv.collect(out, prefix); }
};

/// Window statistics of a partial convolution: renormalization factor and the
/// updated mask, both at output resolution.
struct PartialConvWindows {
  Tensor ratio;  // in-bounds taps / valid taps, 0 where no tap is valid
  Mask updated;
};

inline PartialConvWindows partial_conv_windows(const Mask& mask, int k, int stride) {
  NoGradGuard guard;
  const std::int64_t pad = (k - 1) / 2;
  const Tensor ones_kernel = Tensor::full(Shape{1, 1, k, k}, 1.0);
  const Shape ms = mask.shape();
  const Tensor valid = conv2d(mask.tensor(), ones_kernel, static_cast<int>(stride), static_cast<int>(pad));
  const Tensor inside = conv2d(Tensor::full(ms, 1.0), ones_kernel, static_cast<int>(stride), static_cast<int>(pad));
  std::vector<double> ratio(static_cast<std::size_t>(valid.numel())), upd(ratio.size());
  for (std::size_t i = 0; i < ratio.size(); ++i) {
    // Counts are small integers computed exactly in floating point.
    const double v = std::round(valid.values()[i]);
    ratio[i] = v > 0 ? std::round(inside.values()[i]) / v : 0.0;
    upd[i] = v > 0 ? 1.0 : 0.0;
  }
  return {Tensor::from(valid.shape(), std::move(ratio)), Mask(Tensor::from(valid.shape(), std::move(upd)))};
}

/// Partial convolution: per window with at least one valid tap,
/// out = W * (x . m) * (taps / valid taps) + b and the new mask is 1;
/// otherwise out = 0 and the new mask is 0. Zero padding counts as neither
/// valid nor hole, so an all-ones mask reproduces conv2d exactly.
inline std::pair<Tensor, Mask> partial_conv(const Tensor& input, const Mask& mask, const PartialConvLayer& layer) {
  const Shape si = input.shape(), sm = mask.shape();
  require(sm.n() == si.n() && sm.h() == si.h() && sm.w() == si.w(),
          "partial_conv: mask " + sm.str() + " does not match input " + si.str());
  auto windows = partial_conv_windows(mask, layer.kernel, layer.conv.stride);
  const Tensor masked = mul(input, mask.tensor());
  const Tensor raw = conv2d(masked, layer.conv.weight, layer.conv.stride, layer.conv.padding);
  Tensor out = mul(raw, windows.ratio);
  if (layer.conv.bias.defined()) out = add(out, mul(layer.conv.bias, windows.updated.tensor()));
  return {out, windows.updated};
}

struct SEBlock {
  ConvLayer reduce;  // C -> hidden, 1x1
  ConvLayer expand;  // hidden -> C, 1x1

  static std::int64_t hidden_size(std::int64_t channels) { return std::max<std::int64_t>(4, channels / 16); }

  static SEBlock make(std::int64_t channels, Rng& rng) {
    require(channels >= 4, "SEBlock: needs at least 4 channels, got " + std::to_string(channels));
    const std::int64_t hidden = hidden_size(channels);
    return {ConvLayer::make(channels, hidden, 1, 1, 0, rng, true, 1, std::sqrt(2.0)),
            ConvLayer::make(hidden, channels, 1, 1, 0, rng, true, 1, 1.0)};
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    reduce.collect(out, prefix + ".reduce");
    expand.collect(out, prefix + ".expand");
  }
};

/// Per-channel gains w = sigmoid(FC2(relu(FC1(spatial mean)))), shape (n, C, 1, 1).
inline Tensor se_gains(const Tensor& input, const SEBlock& block) {
  const Tensor squeezed = mean(input, kSpatial);
  return sigmoid(block.expand.forward(relu(block.reduce.forward(squeezed))));
}

inline Tensor se_forward(const Tensor& input, const SEBlock& block) {
  require(input.shape().c() == block.reduce.weight.shape().c(), "se_forward: channel mismatch");
  return mul(input, se_gains(input, block));
}

struct ResidualBlock {
  ConvLayer first;
  ConvLayer second;

  static ResidualBlock make(std::int64_t channels, int dilation, Rng& rng) {
    require(dilation >= 1, "ResidualBlock: dilation must be >= 1");
    return {ConvLayer::make(channels, channels, 3, 1, dilation, rng, true, dilation),
            ConvLayer::make(channels, channels, 3, 1, dilation, rng, true, dilation, 0.5 * leaky_gain())};
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    first.collect(out, prefix + ".conv1");
    second.collect(out, prefix + ".conv2");
  }
};

inline Tensor residual_branch(const Tensor& input, const ResidualBlock& block) {
  return block.second.forward(leaky_relu(block.first.forward(input), kLeakySlope));
}

/// out = input + conv(act(conv(input))) with dilated 3x3 convolutions.
inline Tensor dilated_residual_block(const Tensor& input, const ResidualBlock& block) {
  require(input.shape().c() == block.first.weight.shape().c() &&
              block.second.weight.shape().n() == input.shape().c(),
          "dilated_residual_block: channel mismatch for input " + input.shape().str());
  return add(input, residual_branch(input, block));
}

struct SpectralNormState {
  std::vector<double> u;  // unit-norm left singular vector estimate
  int power_iterations = 1;

  static SpectralNormState make(std::int64_t rows, Rng& rng) {
    SpectralNormState s;
    s.u.resize(static_cast<std::size_t>(rows));
    for (auto& v : s.u) v = rng.normal();
    double n = 0;
    for (double v : s.u) n += v * v;
    n = std::sqrt(n);
    for (auto& v : s.u) v /= n;
    return s;
  }
};

namespace detail {

inline double normalize_in_place(std::vector<double>& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0)
    for (auto& x : v) x /= n;
  return n;
}

}  // namespace detail

/// Divides the weight (viewed as out_c x rest) by the power-iteration estimate
/// of its top singular value. With update = true, state.u first advances by
/// state.power_iterations steps. Gradients treat u and v as constants.
inline Tensor spectral_normalize(const Tensor& weight, SpectralNormState& state, bool update = true) {
  const std::int64_t rows = weight.shape().n();
  const std::int64_t cols = weight.numel() / rows;
  require(static_cast<std::int64_t>(state.u.size()) == rows, "spectral_normalize: state size mismatch");
  detail::ConstMapMat W(weight.data(), rows, cols);
  if (W.cwiseAbs().maxCoeff() == 0.0) return reshape(weight, weight.shape());

  Eigen::Map<Eigen::VectorXd> u(state.u.data(), rows);
  Eigen::VectorXd v(cols);
  if (update) {
    for (int it = 0; it < state.power_iterations; ++it) {
      v.noalias() = W.transpose() * u;
      v /= std::max(v.norm(), 1e-12);
      Eigen::VectorXd wu = W * v;
      u = wu / std::max(wu.norm(), 1e-12);
    }
  }
  v.noalias() = W.transpose() * u;
  v /= std::max(v.norm(), 1e-12);
  const double sigma = u.dot(W * v);
  if (!(sigma > 0)) return reshape(weight, weight.shape());

  std::vector<double> out(weight.values().begin(), weight.values().end());
  for (auto& x : out) x /= sigma;
  Eigen::VectorXd uc = u;
  return detail::make_result(weight.shape(), std::move(out), {&weight},
                             [uc, v, sigma, rows, cols](detail::Node& self) {
                               auto& in = self.inputs[0];
                               detail::ConstMapMat G(self.grad.data(), rows, cols);
                               detail::ConstMapMat Wm(in->value.data(), rows, cols);
                               const double gw = (G.array() * Wm.array()).sum();
                               detail::MapMat GW(in->grad_buffer().data(), rows, cols);
                               GW += G / sigma;
                               GW.noalias() -= (gw / (sigma * sigma)) * (uc * v.transpose());
                             });
}

/// Power-iteration estimate of the top singular value without touching state.
inline double spectral_norm_estimate(const Tensor& weight, const SpectralNormState& state) {
  const std::int64_t rows = weight.shape().n();
  const std::int64_t cols = weight.numel() / rows;
  detail::ConstMapMat W(weight.data(), rows, cols);
  Eigen::Map<const Eigen::VectorXd> u(state.u.data(), rows);
  Eigen::VectorXd v = W.transpose() * u;
  const double n = v.norm();
  if (n == 0) return 0;
  return u.dot(W * (v / n));
}

}  // namespace medfe
