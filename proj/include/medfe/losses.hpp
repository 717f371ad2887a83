#pragma once

// Reconstruction, perceptual, style and relativistic-average adversarial
// losses, the frozen feature extractor they share, and the weighted total.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/conv.hpp"
#include "medfe/layers.hpp"
#include "medfe/ops.hpp"
#include "medfe/random.hpp"

namespace medfe {

/// Mean absolute difference.
inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "l1 loss: shape " + a.shape().str() + " vs " + b.shape().str());
  return mean(abs(sub(a, b)));
}

struct BranchLosses {
  Tensor structure;  // L_rst
  Tensor texture;    // L_rte
};

inline BranchLosses branch_recon_loss(const Tensor& structure_out, const Tensor& texture_out,
                                      const Tensor& structure_target, const Tensor& texture_target) {
  return {l1_loss(structure_out, structure_target), l1_loss(texture_out, texture_target)};
}

inline Tensor recon_loss(const Tensor& out, const Tensor& truth) { return l1_loss(out, truth); }

/// Frozen convolutional feature pyramid: five stride-2 3x3 convolutions with ReLU.
class FeatureExtractor {
 public:
  static constexpr std::array<std::int64_t, 5> kChannels{16, 32, 64, 128, 128};

  /// Seeded substitute backbone. Each layer's weight rows are orthonormalized
  /// (when there are no more rows than columns) and scaled by sqrt(2).
  static FeatureExtractor seeded(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x66656174ULL));
    FeatureExtractor fx;
    std::int64_t in_c = 3;
    for (std::int64_t out_c : kChannels) {
      const std::int64_t cols = in_c * 9;
      std::vector<double> w(static_cast<std::size_t>(out_c * cols));
      for (auto& v : w) v = rng.normal();
      if (out_c <= cols) {
        for (std::int64_t r = 0; r < out_c; ++r) {
          double* row = w.data() + r * cols;
          for (std::int64_t q = 0; q < r; ++q) {
            const double* prev = w.data() + q * cols;
            double dot = 0;
            for (std::int64_t j = 0; j < cols; ++j) dot += row[j] * prev[j];
            for (std::int64_t j = 0; j < cols; ++j) row[j] -= dot * prev[j];
          }
          double norm = 0;
          for (std::int64_t j = 0; j < cols; ++j) norm += row[j] * row[j];
          norm = std::sqrt(norm);
          for (std::int64_t j = 0; j < cols; ++j) row[j] /= norm;
        }
        for (auto& v : w) v *= std::sqrt(2.0);
      } else {
        for (auto& v : w) v *= std::sqrt(2.0 / static_cast<double>(cols));
      }
      fx.weights_.push_back(Tensor::from(Shape{out_c, in_c, 3, 3}, std::move(w)));
      fx.biases_.push_back(Tensor::zeros(Shape{1, out_c, 1, 1}));
      in_c = out_c;
    }
    return fx;
  }

  /// Loads weights "fx.<i>.weight" / "fx.<i>.bias" (i = 0..4) from a checkpoint.
  static FeatureExtractor from_checkpoint(const std::map<std::string, Tensor>& entries) {
    FeatureExtractor fx;
    std::int64_t in_c = 3;
    for (std::size_t i = 0; i < kChannels.size(); ++i) {
      const std::string base = "fx." + std::to_string(i);
      auto w = entries.find(base + ".weight");
      auto b = entries.find(base + ".bias");
      if (w == entries.end() || b == entries.end()) throw IoError("feature extractor checkpoint lacks " + base);
      const Shape ws = w->second.shape();
      if (ws.c() != in_c || ws.h() != 3 || ws.w() != 3 || b->second.shape() != Shape{1, ws.n(), 1, 1})
        throw IoError("feature extractor layer " + base + " has unexpected shape " + ws.str());
      fx.weights_.push_back(w->second.detach());
      fx.biases_.push_back(b->second.detach());
      in_c = ws.n();
    }
    return fx;
  }

  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.push_back({"fx." + std::to_string(i) + ".weight", weights_[i]});
      out.push_back({"fx." + std::to_string(i) + ".bias", biases_[i]});
    }
    return out;
  }

  /// Activation maps Phi_1..Phi_5 at halving resolutions.
  std::vector<Tensor> features(const Tensor& image) const {
    std::vector<Tensor> maps;
    Tensor x = image;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      x = relu(conv2d(x, weights_[i], biases_[i], 2, 1));
      maps.push_back(x);
    }
    return maps;
  }

  std::size_t layer_count() const { return weights_.size(); }
  const Tensor& weight(std::size_t i) const { return weights_[i]; }

 private:
  std::vector<Tensor> weights_, biases_;
};

/// Sum over layers of the mean absolute activation difference.
inline Tensor perceptual_loss(const std::vector<Tensor>& out_maps, const std::vector<Tensor>& truth_maps) {
  require(out_maps.size() == truth_maps.size(), "perceptual loss: layer count mismatch");
  Tensor total;
  for (std::size_t i = 0; i < out_maps.size(); ++i) {
    Tensor term = l1_loss(out_maps[i], truth_maps[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

inline Tensor perceptual_loss(const Tensor& out, const Tensor& truth, const FeatureExtractor& fx) {
  return perceptual_loss(fx.features(out), fx.features(truth));
}

/// Per-sample Gram matrix A A^T / (c h w) of the c x (h w) unfolding, shaped (n, 1, c, c).
inline Tensor gram_matrix(const Tensor& phi) {
  const Shape s = phi.shape();
  Tensor a = reshape(phi, Shape{s.n(), 1, s.c(), s.plane()});
  return scale(matmul(a, transpose(a)), 1.0 / static_cast<double>(s.c() * s.plane()));
}

/// Mean over layers of the mean absolute Gram difference.
inline Tensor style_loss(const std::vector<Tensor>& out_maps, const std::vector<Tensor>& truth_maps) {
  require(out_maps.size() == truth_maps.size() && !out_maps.empty(), "style loss: layer count mismatch");
  Tensor total;
  for (std::size_t i = 0; i < out_maps.size(); ++i) {
    Tensor term = l1_loss(gram_matrix(out_maps[i]), gram_matrix(truth_maps[i]));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(out_maps.size()));
}

inline Tensor style_loss(const Tensor& out, const Tensor& truth, const FeatureExtractor& fx) {
  return style_loss(fx.features(out), fx.features(truth));
}

struct AdversarialLosses {
  Tensor generator;      // L_G
  Tensor discriminator;  // L_D
};

inline constexpr double kLogFloor = 1e-8;

/// Relativistic-average losses from raw (pre-sigmoid) score maps. With
/// D(a, b) = sigmoid(C(a) - E[C(b)]):
///   L_G = -E[log(1 - D(real, fake))] - E[log D(fake, real)]
///   L_D = -E[log D(real, fake)] - E[log(1 - D(fake, real))]
inline AdversarialLosses adv_losses(const Tensor& real_scores, const Tensor& fake_scores) {
  Tensor real_rel = sub(real_scores, mean(fake_scores));
  Tensor fake_rel = sub(fake_scores, mean(real_scores));
  auto neg_mean_log = [](const Tensor& p) { return scale(mean(log_clamped(p, kLogFloor)), -1.0); };
  // 1 - sigmoid(z) is evaluated as sigmoid(-z).
  Tensor gen = add(neg_mean_log(sigmoid(scale(real_rel, -1.0))), neg_mean_log(sigmoid(fake_rel)));
  Tensor disc = add(neg_mean_log(sigmoid(real_rel)), neg_mean_log(sigmoid(scale(fake_rel, -1.0))));
  return {gen, disc};
}

struct LossWeights {
  double recon = 1.0;       // lambda_r
  double perceptual = 0.1;  // lambda_p
  double style = 250.0;     // lambda_s
  double adversarial = 0.2; // lambda_adv
  double structure = 1.0;   // lambda_st
  double texture = 1.0;     // lambda_te

  void validate() const {
    for (double w : {recon, perceptual, style, adversarial, structure, texture})
      require(w >= 0.0 && std::isfinite(w), "loss weights must be finite and non-negative");
  }
};

template <class T>
struct LossTerms {
  T recon, perceptual, style, adversarial, structure, texture;
};

// Accumulated left to right in this order; unit terms then sum to exactly 253.3.
inline double total_loss(const LossTerms<double>& p, const LossWeights& w) {
  double t = w.recon * p.recon;
  t += w.perceptual * p.perceptual;
  t += w.adversarial * p.adversarial;
  t += w.structure * p.structure;
  t += w.texture * p.texture;
  t += w.style * p.style;
  return t;
}

inline Tensor total_loss(const LossTerms<Tensor>& p, const LossWeights& w) {
  Tensor t = scale(p.recon, w.recon);
  t = add(t, scale(p.perceptual, w.perceptual));
  t = add(t, scale(p.adversarial, w.adversarial));
  t = add(t, scale(p.structure, w.structure));
  t = add(t, scale(p.texture, w.texture));
  return add(t, scale(p.style, w.style));
}

}  // namespace medfe
