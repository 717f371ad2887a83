#pragma once

// Mutual encoder-decoder generator with texture/structure filling branches,
// feature equalization and equalized skips, plus the two patch
// discriminators.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/conv.hpp"
#include "medfe/equalization.hpp"
#include "medfe/layers.hpp"
#include "medfe/ops.hpp"

namespace medfe {

inline constexpr int kEncoderLayers = 6;
inline constexpr int kDecoderLayers = 5;
inline constexpr int kBranchDepth = 5;
inline constexpr std::int64_t kLocalPatch = 64;

enum class Preset { Tiny, Desk, Full };

inline Preset parse_preset(const std::string& name) {
  if (name == "tiny") return Preset::Tiny;
  if (name == "desk") return Preset::Desk;
  if (name == "full") return Preset::Full;
  throw ContractViolation("unknown preset '" + name + "' (expected tiny, desk or full)");
}

struct GeneratorConfig {
  std::int64_t image_size = 64;
  std::array<std::int64_t, kEncoderLayers> encoder_channels{8, 16, 32, 64, 64, 64};
  std::array<int, kEncoderLayers> encoder_strides{2, 2, 2, 2, 2, 2};
  std::array<std::int64_t, kDecoderLayers> decoder_channels{64, 64, 32, 16, 8};
  std::vector<int> residual_dilations{2, 2, 2, 2};
  std::array<int, 3> branch_kernels{3, 5, 7};
  std::int64_t feature_width = 32;
  // Encoder layer (0-based) whose resolution F_te/F_st are reorganized to.
  int reorg_layer = 2;
  std::array<std::int64_t, 5> discriminator_channels{16, 32, 64, 64, 1};
  std::array<int, 5> discriminator_strides{2, 2, 2, 2, 2};

  static GeneratorConfig preset(Preset p) {
    GeneratorConfig c;
    switch (p) {
      case Preset::Desk:
        break;
      case Preset::Full:
        c.image_size = 256;
        c.encoder_channels = {64, 128, 256, 512, 512, 512};
        c.decoder_channels = {512, 512, 256, 128, 64};
        c.feature_width = 256;
        c.discriminator_channels = {64, 128, 256, 512, 1};
        break;
      case Preset::Tiny:
        c.image_size = 16;
        c.encoder_channels = {4, 4, 4, 4, 4, 4};
        c.encoder_strides = {2, 2, 1, 1, 1, 1};
        c.decoder_channels = {4, 4, 4, 4, 4};
        c.feature_width = 8;
        c.discriminator_channels = {4, 4, 4, 4, 1};
        c.discriminator_strides = {2, 2, 1, 1, 1};
        break;
    }
    return c;
  }

  /// Product of the encoder strides; image sides must be a multiple of it.
  std::int64_t size_multiple() const {
    std::int64_t m = 1;
    for (int s : encoder_strides) m *= s;
    return m;
  }

  std::int64_t level_size(int layer) const {
    std::int64_t s = image_size;
    for (int i = 0; i <= layer; ++i) s /= encoder_strides[i];
    return s;
  }

  std::int64_t reorg_size() const { return level_size(reorg_layer); }

  void validate() const {
    require(residual_dilations.size() == 4, "generator config: 4 residual blocks expected");
    for (int k : branch_kernels) require(k % 2 == 1 && k >= 1, "generator config: stream kernels must be odd");
    for (int s : encoder_strides) require(s == 1 || s == 2, "generator config: encoder strides must be 1 or 2");
    std::int64_t d = image_size;
    for (int s : discriminator_strides) {
      require(s == 1 || s == 2, "generator config: discriminator strides must be 1 or 2");
      d /= s;
    }
    require(d >= 1, "generator config: discriminator reduces the image below one pixel");
    require(image_size > 0 && image_size % size_multiple() == 0,
            "image size " + std::to_string(image_size) + " must be a positive multiple of " +
                std::to_string(size_multiple()) + " for this preset");
    require(reorg_layer >= 0 && reorg_layer < kEncoderLayers, "generator config: bad reorg layer");
    require(feature_width >= 4, "generator config: feature width must be at least 4");
  }
};

/// Encoder layer: 4x4/stride-2 convolution, or 3x3/stride-1 when the level keeps its size.
inline ConvLayer make_encoder_layer(std::int64_t in_c, std::int64_t out_c, int stride, Rng& rng) {
  return stride == 2 ? ConvLayer::make(in_c, out_c, 4, 2, 1, rng) : ConvLayer::make(in_c, out_c, 3, 1, 1, rng);
}

/// Decoder layer mirroring one encoder layer: transposed 4x4/stride-2 or 3x3 convolution.
struct DecoderLayer {
  bool upsample = true;
  ConvTransposeLayer up;
  ConvLayer same;

  static DecoderLayer make(std::int64_t in_c, std::int64_t out_c, int stride, Rng& rng, double gain = leaky_gain()) {
    DecoderLayer d;
    d.upsample = stride == 2;
    if (d.upsample)
      d.up = ConvTransposeLayer::make(in_c, out_c, 4, 2, 1, rng, gain);
    else
      d.same = ConvLayer::make(in_c, out_c, 3, 1, 1, rng, true, 1, gain);
    return d;
  }

  Tensor forward(const Tensor& x) const { return upsample ? up.forward(x) : same.forward(x); }

  void collect(ParameterList& out, const std::string& prefix) const {
    if (upsample)
      up.collect(out, prefix);
    else
      same.collect(out, prefix);
  }
};

/// Three parallel streams of stacked partial convolutions merged by a 1x1 convolution.
struct FillingBranch {
  std::array<std::vector<PartialConvLayer>, 3> streams;
  ConvLayer merge;

  static FillingBranch make(std::int64_t channels, const std::array<int, 3>& kernels, Rng& rng) {
    FillingBranch b;
    for (std::size_t s = 0; s < 3; ++s)
      for (int i = 0; i < kBranchDepth; ++i)
        b.streams[s].push_back(PartialConvLayer::make(channels, channels, kernels[s], 1, rng));
    b.merge = ConvLayer::make(3 * channels, channels, 1, 1, 0, rng, true, 1, 1.0);
    return b;
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < streams[s].size(); ++i)
        streams[s][i].collect(out, prefix + ".stream" + std::to_string(s) + "." + std::to_string(i));
    merge.collect(out, prefix + ".merge");
  }
};

struct BranchOutput {
  Tensor filled;
  Mask mask;  // union of the stream output masks
  std::array<Mask, 3> stream_masks;
};

inline BranchOutput branch_fill(const Tensor& features, const Mask& mask, const FillingBranch& branch) {
  const Mask m = mask.resized(features.shape().h(), features.shape().w());
  std::vector<Tensor> outs;
  BranchOutput r;
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor x = features;
    Mask sm = m;
    for (const auto& layer : branch.streams[s]) {
      auto [y, next] = partial_conv(x, sm, layer);
      x = leaky_relu(y);
      sm = std::move(next);
    }
    outs.push_back(x);
    r.stream_masks[s] = sm;
  }
  r.filled = branch.merge.forward(concat(outs, 1));
  r.mask = r.stream_masks[0].united(r.stream_masks[1]).united(r.stream_masks[2]);
  return r;
}

/// 1x1 convolution to three channels followed by tanh.
inline Tensor to_color(const Tensor& features, const ConvLayer& head) { return tanh(head.forward(features)); }

/// Renders an arbitrary feature map as a gray image in [-1, 1] from its channel mean.
inline Tensor channel_mean_image(const Tensor& features) {
  NoGradGuard guard;
  Tensor m = mean(features, kC);
  const auto v = m.values();
  double lo = v[0], hi = v[0];
  for (double e : v) lo = std::min(lo, e), hi = std::max(hi, e);
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<double> out;
  out.reserve(v.size() * 3);
  const Shape s = m.shape();
  for (std::int64_t n = 0; n < s.n(); ++n)
    for (int c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < s.plane(); ++i) out.push_back(2.0 * (v[n * s.plane() + i] - lo) / span - 1.0);
  return Tensor::from(Shape{s.n(), 3, s.h(), s.w()}, std::move(out));
}

struct Generator {
  GeneratorConfig cfg;
  std::vector<ConvLayer> encoder;
  std::vector<ResidualBlock> residual;
  ConvLayer reorg_texture, reorg_structure;
  FillingBranch texture_branch, structure_branch;
  EqualizationParams equalization;
  std::vector<DecoderLayer> decoder;
  std::vector<ConvLayer> skip;
  DecoderLayer output;
  ConvLayer head_texture, head_structure;

  static Generator make(const GeneratorConfig& cfg, Rng& rng) {
    cfg.validate();
    Generator g;
    g.cfg = cfg;
    std::int64_t in_c = 4;
    for (int i = 0; i < kEncoderLayers; ++i) {
      g.encoder.push_back(make_encoder_layer(in_c, cfg.encoder_channels[i], cfg.encoder_strides[i], rng));
      in_c = cfg.encoder_channels[i];
    }
    for (int d : cfg.residual_dilations) g.residual.push_back(ResidualBlock::make(in_c, d, rng));
    const std::int64_t W = cfg.feature_width;
    const auto& ec = cfg.encoder_channels;
    g.reorg_texture = ConvLayer::make(ec[0] + ec[1] + ec[2], W, 1, 1, 0, rng, true, 1, 1.0);
    g.reorg_structure = ConvLayer::make(ec[3] + ec[4] + ec[5], W, 1, 1, 0, rng, true, 1, 1.0);
    g.texture_branch = FillingBranch::make(W, cfg.branch_kernels, rng);
    g.structure_branch = FillingBranch::make(W, cfg.branch_kernels, rng);
    g.equalization = EqualizationParams::make(W, rng);
    for (int i = 0; i < kDecoderLayers; ++i) {
      const std::int64_t out_c = cfg.decoder_channels[i];
      g.decoder.push_back(DecoderLayer::make(in_c, out_c, cfg.encoder_strides[kEncoderLayers - 1 - i], rng));
      g.skip.push_back(ConvLayer::make(out_c + W, out_c, 1, 1, 0, rng));
      in_c = out_c;
    }
    g.output = DecoderLayer::make(in_c, 3, cfg.encoder_strides[0], rng, 1.0);
    g.head_texture = ConvLayer::make(W, 3, 1, 1, 0, rng, true, 1, 1.0);
    g.head_structure = ConvLayer::make(W, 3, 1, 1, 0, rng, true, 1, 1.0);
    return g;
  }

  void collect(ParameterList& out, const std::string& prefix = "g") const {
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect(out, prefix + ".enc" + std::to_string(i));
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i].collect(out, prefix + ".res" + std::to_string(i));
    reorg_texture.collect(out, prefix + ".reorg_te");
    reorg_structure.collect(out, prefix + ".reorg_st");
    texture_branch.collect(out, prefix + ".branch_te");
    structure_branch.collect(out, prefix + ".branch_st");
    equalization.collect(out, prefix + ".eq");
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      decoder[i].collect(out, prefix + ".dec" + std::to_string(i));
      skip[i].collect(out, prefix + ".skip" + std::to_string(i));
    }
    output.collect(out, prefix + ".out");
    head_texture.collect(out, prefix + ".head_te");
    head_structure.collect(out, prefix + ".head_st");
  }
};

/// Generator input: the masked image with the mask appended as a fourth channel.
inline Tensor generator_input(const Tensor& image, const Mask& mask) {
  require(image.shape().c() == 3, "generator input must have 3 channels, got " + image.shape().str());
  require(mask.shape().n() == image.shape().n() && mask.height() == image.shape().h() &&
              mask.width() == image.shape().w(),
          "mask " + mask.shape().str() + " does not match image " + image.shape().str());
  return concat({mul_const(image, mask.tensor()), mask.tensor()}, 1);
}

inline std::vector<Tensor> encode(const Tensor& input, const Generator& g) {
  const Shape s = input.shape();
  const std::int64_t m = g.cfg.size_multiple();
  require(s.h() % m == 0 && s.w() % m == 0 && s.h() > 0 && s.w() > 0,
          "encoder input " + s.str() + ": sides must be multiples of " + std::to_string(m));
  require(s.c() == 4, "encoder input must have 4 channels (image + mask), got " + s.str());
  std::vector<Tensor> features;
  Tensor x = input;
  for (const auto& layer : g.encoder) {
    x = leaky_relu(layer.forward(x));
    features.push_back(x);
  }
  return features;
}

enum class FeatureGroup { Texture, Structure };

inline Tensor reorganize(const std::vector<Tensor>& features, FeatureGroup which, const Generator& g) {
  require(features.size() == kEncoderLayers, "reorganize expects 6 encoder features");
  const std::int64_t size = features[g.cfg.reorg_layer].shape().h();
  const std::size_t first = which == FeatureGroup::Texture ? 0 : 3;
  std::vector<Tensor> parts;
  for (std::size_t i = first; i < first + 3; ++i) parts.push_back(resize(features[i], size, size, ResizeMode::Bilinear));
  const ConvLayer& reduce = which == FeatureGroup::Texture ? g.reorg_texture : g.reorg_structure;
  return reduce.forward(concat(parts, 1));
}

struct GeneratorOutput {
  Tensor out;              // I_out
  Tensor texture_image;    // I_ote
  Tensor structure_image;  // I_ost
  Tensor texture;          // F_te
  Tensor structure;        // F_st
  Tensor texture_filled;   // F_fte
  Tensor structure_filled; // F_fst
  Tensor fused;            // F_sf
  Tensor equalized;        // F_equal
  Mask texture_mask, structure_mask;
};

inline GeneratorOutput generator_forward(const Tensor& image, const Mask& mask, const Generator& g) {
  GeneratorOutput r;
  const auto features = encode(generator_input(image, mask), g);
  r.texture = reorganize(features, FeatureGroup::Texture, g);
  r.structure = reorganize(features, FeatureGroup::Structure, g);
  auto te = branch_fill(r.texture, mask, g.texture_branch);
  auto st = branch_fill(r.structure, mask, g.structure_branch);
  r.texture_filled = te.filled;
  r.structure_filled = st.filled;
  r.texture_mask = te.mask;
  r.structure_mask = st.mask;
  auto eq = equalize(r.texture_filled, r.structure_filled, g.equalization);
  r.fused = eq.fused;
  r.equalized = eq.equalized;

  Tensor x = features.back();
  for (const auto& block : g.residual) x = dilated_residual_block(x, block);
  for (std::size_t i = 0; i < g.decoder.size(); ++i) {
    x = leaky_relu(g.decoder[i].forward(x));
    const Shape s = x.shape();
    Tensor skip = resize(r.equalized, s.h(), s.w(), ResizeMode::Bilinear);
    x = leaky_relu(g.skip[i].forward(concat({x, skip}, 1)));
  }
  r.out = tanh(g.output.forward(x));
  r.texture_image = to_color(r.texture_filled, g.head_texture);
  r.structure_image = to_color(r.structure_filled, g.head_structure);
  return r;
}

/// I_comp = M * I_gt + (1 - M) * I_out.
inline Tensor composite(const Tensor& truth, const Tensor& output, const Mask& mask) {
  return add(mul_const(truth, mask.tensor()), mul_const(output, mask.holes()));
}

struct HoleBox {
  std::int64_t top = 0, left = 0, height = 0, width = 0;
  bool empty() const { return height == 0 || width == 0; }
};

inline HoleBox hole_box(const Mask& mask, std::int64_t sample) {
  const std::int64_t h = mask.height(), w = mask.width();
  std::int64_t r0 = h, r1 = -1, c0 = w, c1 = -1;
  const double* m = mask.tensor().data() + sample * h * w;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (m[y * w + x] == 0.0) {
        r0 = std::min(r0, y), r1 = std::max(r1, y);
        c0 = std::min(c0, x), c1 = std::max(c1, x);
      }
  if (r1 < 0) return {};
  return {r0, c0, r1 - r0 + 1, c1 - c0 + 1};
}

/// Crops each sample's hole bounding box and resizes it to the local patch size.
inline Tensor local_patches(const Tensor& images, const Mask& mask) {
  std::vector<Tensor> patches;
  for (std::int64_t i = 0; i < images.shape().n(); ++i) {
    const HoleBox box = hole_box(mask, i);
    require(!box.empty(), "local discriminator: sample " + std::to_string(i) + " has no hole");
    Tensor crop_i = crop(slice_batch(images, i, 1), box.top, box.left, box.height, box.width);
    patches.push_back(resize(crop_i, kLocalPatch, kLocalPatch, ResizeMode::Bilinear));
  }
  return concat(patches, 0);
}

struct Discriminator {
  std::vector<ConvLayer> layers;
  std::vector<SpectralNormState> norms;

  static Discriminator make(const std::array<std::int64_t, 5>& channels, const std::array<int, 5>& strides, Rng& rng) {
    Discriminator d;
    std::int64_t in_c = 3;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      d.layers.push_back(make_encoder_layer(in_c, channels[i], strides[i], rng));
      d.norms.push_back(SpectralNormState::make(channels[i], rng));
      in_c = channels[i];
    }
    return d;
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + "." + std::to_string(i));
  }

  std::vector<NamedTensor> norm_state(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < norms.size(); ++i) {
      const auto& u = norms[i].u;
      out.push_back({prefix + "." + std::to_string(i) + ".u",
                     Tensor::from(Shape{1, 1, 1, static_cast<std::int64_t>(u.size())}, u)});
    }
    return out;
  }
};

enum class DiscriminatorKind { Global, Local };

/// Patch score map without a final sigmoid. `update_norms` advances the power
/// iteration; `trainable` = false treats the weights as constants.
inline Tensor discriminator_forward(const Tensor& image, Discriminator& d, bool update_norms = false,
                                    bool trainable = true) {
  Tensor x = image;
  for (std::size_t i = 0; i < d.layers.size(); ++i) {
    const ConvLayer& l = d.layers[i];
    Tensor w = spectral_normalize(trainable ? l.weight : l.weight.detach(), d.norms[i], update_norms);
    Tensor b = trainable ? l.bias : l.bias.detach();
    x = conv2d(x, w, b, l.stride, l.padding);
    if (i + 1 < d.layers.size()) x = leaky_relu(x);
  }
  return x;
}

struct MEDFEModel {
  GeneratorConfig cfg;
  Generator generator;
  Discriminator global, local;

  static MEDFEModel make(const GeneratorConfig& cfg, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x6d656466ULL));
    MEDFEModel m;
    m.cfg = cfg;
    m.generator = Generator::make(cfg, rng);
    m.global = Discriminator::make(cfg.discriminator_channels, cfg.discriminator_strides, rng);
    m.local = Discriminator::make(cfg.discriminator_channels, cfg.discriminator_strides, rng);
    return m;
  }

  ParameterList generator_parameters() const {
    ParameterList p;
    generator.collect(p, "g");
    return p;
  }

  ParameterList discriminator_parameters() const {
    ParameterList p;
    global.collect(p, "dg");
    local.collect(p, "dl");
    return p;
  }

  /// Parameters plus spectral-norm vectors, in a fixed order.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out = generator_parameters().entries();
    const ParameterList d = discriminator_parameters();
    for (const auto& e : d.entries()) out.push_back(e);
    for (auto& e : global.norm_state("dg.sn")) out.push_back(std::move(e));
    for (auto& e : local.norm_state("dl.sn")) out.push_back(std::move(e));
    return out;
  }

  /// Copies values from a checkpoint; every entry of state() must be present with matching shape.
  void load_state(const std::map<std::string, Tensor>& entries) {
    auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
      auto it = entries.find(name);
      if (it == entries.end()) throw IoError("checkpoint is missing '" + name + "'");
      if (it->second.shape() != shape)
        throw IoError("checkpoint entry '" + name + "' has shape " + it->second.shape().str() + ", expected " +
                      shape.str());
      return it->second;
    };
    auto copy_params = [&](ParameterList params) {
      for (auto& e : params.entries()) {
        const Tensor& src = fetch(e.name, e.tensor.shape());
        std::copy(src.values().begin(), src.values().end(), e.tensor.mutable_values().begin());
      }
    };
    copy_params(generator_parameters());
    copy_params(discriminator_parameters());
    for (auto [d, prefix] : {std::pair{&global, "dg.sn"}, std::pair{&local, "dl.sn"}})
      for (std::size_t i = 0; i < d->norms.size(); ++i) {
        auto& u = d->norms[i].u;
        const Tensor& src =
            fetch(std::string(prefix) + "." + std::to_string(i) + ".u", Shape{1, 1, 1, static_cast<std::int64_t>(u.size())});
        u.assign(src.values().begin(), src.values().end());
      }
  }
};

}  // namespace medfe
