#pragma once

// Run configuration, dataset assembly, the alternating adversarial training
// loop, inference, per-bucket evaluation and feature visualization.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/data.hpp"
#include "medfe/image_io.hpp"
#include "medfe/losses.hpp"
#include "medfe/metrics.hpp"
#include "medfe/network.hpp"
#include "medfe/optim.hpp"

namespace medfe {

struct RunConfig {
  std::string preset = "desk";
  std::int64_t image_size = 0;  // 0: preset default
  std::int64_t batch_size = 4;
  std::int64_t steps = 200;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 1;
  LossWeights weights;
  std::string manifest;    // empty: synthetic corpus
  std::string checkpoint;  // resume source for train, model for infer/evaluate/visualize
  std::string out_dir = "medfe_out";
  std::string extractor;   // optional extractor weights
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  std::int64_t dataset_size = 512;
  std::uint64_t data_seed = 0;
  std::string mask = "center";  // center | irregular | dataset
  int bucket = -1;              // irregular masks: fixed bucket, or -1 to cycle

  GeneratorConfig generator() const {
    GeneratorConfig g = GeneratorConfig::preset(parse_preset(preset));
    if (image_size > 0) g.image_size = image_size;
    return g;
  }

  void validate() const {
    require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "adam betas must lie in [0, 1)");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(steps >= 0, "steps must be non-negative");
    require(dataset_size >= 1, "dataset_size must be at least 1");
    require(mask == "center" || mask == "irregular" || mask == "dataset",
            "mask must be center, irregular or dataset");
    require(bucket >= -1 && bucket < static_cast<int>(mask_buckets().size()), "bucket out of range");
    weights.validate();
    const GeneratorConfig g = generator();
    require(g.image_size % g.size_multiple() == 0,
            "image size " + std::to_string(g.image_size) + " is not a multiple of " + std::to_string(g.size_multiple()) +
                "; pick a size such as " + std::to_string(g.size_multiple() * std::max<std::int64_t>(1, g.image_size / g.size_multiple())));
    g.validate();
  }
};

/// Synthetic samples with seeds mix_seed(data_seed, first + i) and center masks.
inline std::vector<Sample> synth_corpus(std::uint64_t data_seed, std::int64_t count, std::int64_t size,
                                        std::int64_t first = 0) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i)
    out.push_back(synth_sample(mix_seed(data_seed, static_cast<std::uint64_t>(first + i)), size));
  return out;
}

inline std::vector<Sample> load_manifest_samples(const std::string& path, std::int64_t size) {
  std::vector<Sample> out;
  for (const auto& e : read_manifest(path)) {
    Sample s{read_ppm(e.image), read_ppm(e.structure), read_pgm_mask(e.mask)};
    for (const Shape& sh : {s.image.shape(), s.structure.shape(), s.mask.shape()})
      if (sh.h() != size || sh.w() != size)
        throw ContractViolation("manifest sample " + e.image + " is " + std::to_string(sh.w()) + "x" +
                                std::to_string(sh.h()) + ", expected " + std::to_string(size) + "x" +
                                std::to_string(size));
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("manifest " + path + " lists no samples");
  return out;
}

inline std::vector<Sample> load_dataset(const RunConfig& cfg) {
  const std::int64_t size = cfg.generator().image_size;
  return cfg.manifest.empty() ? synth_corpus(cfg.data_seed, cfg.dataset_size, size)
                              : load_manifest_samples(cfg.manifest, size);
}

inline Tensor stack_images(const std::vector<Tensor>& images) { return concat(images, 0); }

struct Batch {
  Tensor image, structure;
  Mask mask;
  std::vector<std::int64_t> indices;
};

struct StepLog {
  std::int64_t step = 0;
  LossTerms<double> terms{};
  double total = 0;
  double discriminator = 0;
  double wall_ms = 0;
};

inline constexpr const char* kLogHeader = "step\tL_re\tL_prec\tL_style\tL_adv\tL_rst\tL_rte\tL_total\tL_D\twall_ms";

inline std::string format_log(const StepLog& s) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld\t%.12e\t%.12e\t%.12e\t%.12e\t%.12e\t%.12e\t%.12e\t%.12e\t%.1f",
                static_cast<long long>(s.step), s.terms.recon, s.terms.perceptual, s.terms.style, s.terms.adversarial,
                s.terms.structure, s.terms.texture, s.total, s.discriminator, s.wall_ms);
  return buf;
}

/// Checkpoint entries describing how to rebuild the model.
inline std::vector<NamedTensor> config_state(const RunConfig& cfg) {
  const double preset_code = static_cast<double>(static_cast<int>(parse_preset(cfg.preset)));
  return {{"meta.preset", Tensor::scalar(preset_code)},
          {"meta.image_size", Tensor::scalar(static_cast<double>(cfg.generator().image_size))}};
}

inline GeneratorConfig config_from_checkpoint(const std::map<std::string, Tensor>& entries) {
  auto p = entries.find("meta.preset");
  auto s = entries.find("meta.image_size");
  if (p == entries.end() || s == entries.end()) throw IoError("checkpoint lacks model metadata");
  const int code = static_cast<int>(p->second.item());
  if (code < 0 || code > 2) throw IoError("checkpoint has an unknown preset code");
  GeneratorConfig g = GeneratorConfig::preset(static_cast<Preset>(code));
  g.image_size = static_cast<std::int64_t>(s->second.item());
  g.validate();
  return g;
}

inline MEDFEModel load_model(const std::string& path) {
  const auto entries = checkpoint_map(load_checkpoint(path));
  MEDFEModel model = MEDFEModel::make(config_from_checkpoint(entries), 0);
  model.load_state(entries);
  return model;
}

/// Loss pair averaged over the global and local discriminators. Real and fake
/// images go through each discriminator as one batch.
inline AdversarialLosses adversarial_losses(MEDFEModel& model, const Tensor& real, const Tensor& fake,
                                            const Mask& mask, bool update_norms, bool trainable) {
  auto score = [&](Discriminator& d, const Tensor& r, const Tensor& f) {
    const std::int64_t n = r.shape().n();
    Tensor s = discriminator_forward(concat({r, f}, 0), d, update_norms, trainable);
    return adv_losses(slice_batch(s, 0, n), slice_batch(s, n, n));
  };
  auto g = score(model.global, real, fake);
  auto l = score(model.local, local_patches(real, mask), local_patches(fake, mask));
  return {scale(add(g.generator, l.generator), 0.5), scale(add(g.discriminator, l.discriminator), 0.5)};
}

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<Sample> data)
      : cfg_(std::move(cfg)),
        data_(std::move(data)),
        model_(MEDFEModel::make(cfg_.generator(), cfg_.seed)),
        fx_(cfg_.extractor.empty() ? FeatureExtractor::seeded(cfg_.seed)
                                   : FeatureExtractor::from_checkpoint(checkpoint_map(load_checkpoint(cfg_.extractor)))),
        adam_g_(model_.generator_parameters(), {cfg_.learning_rate, cfg_.beta1, cfg_.beta2}),
        adam_d_(model_.discriminator_parameters(), {cfg_.learning_rate, cfg_.beta1, cfg_.beta2}) {
    cfg_.validate();
    require(!data_.empty(), "training needs at least one sample");
    require(static_cast<std::int64_t>(data_.size()) >= cfg_.batch_size, "dataset is smaller than one batch");
  }

  MEDFEModel& model() { return model_; }
  const RunConfig& config() const { return cfg_; }
  std::int64_t current_step() const { return step_; }

  std::vector<NamedTensor> state() const {
    auto out = config_state(cfg_);
    for (auto& e : model_.state()) out.push_back(std::move(e));
    for (auto& e : adam_g_.state("adam_g")) out.push_back(std::move(e));
    for (auto& e : adam_d_.state("adam_d")) out.push_back(std::move(e));
    out.push_back({"train.step", Tensor::scalar(static_cast<double>(step_))});
    return out;
  }

  void save(const std::string& path) const { save_checkpoint(path, state()); }

  void resume(const std::string& path) {
    const auto entries = checkpoint_map(load_checkpoint(path));
    const GeneratorConfig g = config_from_checkpoint(entries);
    if (g.image_size != model_.cfg.image_size) throw ContractViolation("checkpoint image size differs from config");
    model_.load_state(entries);
    adam_g_.load_state(entries, "adam_g");
    adam_d_.load_state(entries, "adam_d");
    auto it = entries.find("train.step");
    if (it == entries.end()) throw IoError("checkpoint lacks train.step");
    step_ = static_cast<std::int64_t>(it->second.item());
  }

  /// Samples of the batch for `step`: epochs are seeded permutations of the dataset.
  Batch batch(std::int64_t step) {
    const auto n = static_cast<std::int64_t>(data_.size());
    const std::int64_t per_epoch = n / cfg_.batch_size;
    const std::int64_t epoch = step / per_epoch, pos = step % per_epoch;
    if (epoch != perm_epoch_) {
      perm_.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) perm_[i] = i;
      Rng rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(epoch), 0x62617463ULL));
      shuffle(perm_, rng);
      perm_epoch_ = epoch;
    }
    Batch b;
    std::vector<Tensor> imgs, sts;
    std::vector<Mask> masks;
    const std::int64_t size = model_.cfg.image_size;
    for (std::int64_t k = 0; k < cfg_.batch_size; ++k) {
      const std::int64_t idx = perm_[pos * cfg_.batch_size + k];
      const Sample& s = data_[idx];
      b.indices.push_back(idx);
      imgs.push_back(s.image);
      sts.push_back(s.structure);
      if (cfg_.mask == "dataset") {
        masks.push_back(s.mask);
      } else if (cfg_.mask == "center") {
        masks.push_back(gen_center_mask(size, size));
      } else {
        const int bucket = cfg_.bucket >= 0 ? cfg_.bucket : static_cast<int>((step + k) % 5);
        masks.push_back(gen_irregular_mask(size, size, bucket,
                                           mix_seed(cfg_.seed, static_cast<std::uint64_t>(step),
                                                    static_cast<std::uint64_t>(k))));
      }
    }
    b.image = stack_images(imgs);
    b.structure = stack_images(sts);
    b.mask = stack_masks(masks);
    return b;
  }

  /// One discriminator update followed by one generator update.
  StepLog step() {
    const auto t0 = std::chrono::steady_clock::now();
    Batch b = batch(step_);
    GeneratorOutput out = generator_forward(b.image, b.mask, model_.generator);
    const std::int64_t r = out.texture_image.shape().h();
    const Tensor texture_target = resize(b.image, r, r, ResizeMode::Bilinear);
    const Tensor structure_target = resize(b.structure, r, r, ResizeMode::Bilinear);

    adam_d_.zero_grad();
    Tensor d_loss = adversarial_losses(model_, b.image, out.out.detach(), b.mask, true, true).discriminator;
    check_finite(d_loss, b, "L_D");
    backward(d_loss);
    adam_d_.step();

    adam_g_.zero_grad();
    Tensor adv = adversarial_losses(model_, b.image, out.out, b.mask, false, false).generator;
    const auto out_maps = fx_.features(out.out);
    const auto truth_maps = fx_.features(b.image);
    LossTerms<Tensor> parts{recon_loss(out.out, b.image),
                            perceptual_loss(out_maps, truth_maps),
                            style_loss(out_maps, truth_maps),
                            adv,
                            l1_loss(out.structure_image, structure_target),
                            l1_loss(out.texture_image, texture_target)};
    Tensor total = total_loss(parts, cfg_.weights);
    check_finite(total, b, "L_total");
    backward(total);
    adam_g_.step();

    StepLog log;
    log.step = step_;
    log.terms = {parts.recon.item(),       parts.perceptual.item(), parts.style.item(),
                 parts.adversarial.item(), parts.structure.item(),  parts.texture.item()};
    log.total = total.item();
    log.discriminator = d_loss.item();
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++step_;
    return log;
  }

  /// Runs until cfg.steps, appending one line per step to `log` and writing
  /// out_dir/checkpoint.bin periodically and at the end.
  void run(std::ostream& log, bool write_header) {
    std::filesystem::create_directories(cfg_.out_dir);
    if (write_header) log << kLogHeader << '\n';
    const std::string ckpt = (std::filesystem::path(cfg_.out_dir) / "checkpoint.bin").string();
    while (step_ < cfg_.steps) {
      log << format_log(step()) << '\n' << std::flush;
      if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) save(ckpt);
    }
    save(ckpt);
  }

 private:
  void check_finite(const Tensor& loss, const Batch& b, const char* what) const {
    if (std::isfinite(loss.item())) return;
    const auto dir = std::filesystem::path(cfg_.out_dir) / ("nan_step" + std::to_string(step_));
    std::filesystem::create_directories(dir);
    for (std::int64_t i = 0; i < b.image.shape().n(); ++i) {
      const std::string stem = "sample" + std::to_string(b.indices[i]);
      write_ppm((dir / (stem + "_image.ppm")).string(), b.image, i);
      write_pgm_mask((dir / (stem + "_mask.pgm")).string(), b.mask, i);
    }
    throw NumericalError(std::string(what) + " is not finite at step " + std::to_string(step_) +
                         "; batch written to " + dir.string());
  }

  RunConfig cfg_;
  std::vector<Sample> data_;
  MEDFEModel model_;
  FeatureExtractor fx_;
  Adam adam_g_, adam_d_;
  std::int64_t step_ = 0;
  std::vector<std::int64_t> perm_;
  std::int64_t perm_epoch_ = -1;
};

struct Inference {
  GeneratorOutput raw;
  Tensor composite;  // I_comp
};

inline Inference infer(const MEDFEModel& model, const Tensor& image, const Mask& mask) {
  NoGradGuard guard;
  Inference r;
  r.raw = generator_forward(image, mask, model.generator);
  r.composite = composite(image, r.raw.out, mask);
  return r;
}

/// Returns the network output for an image and mask.
using Predictor = std::function<Tensor(const Tensor&, const Mask&)>;

inline Predictor model_predictor(const MEDFEModel& model) {
  return [&model](const Tensor& image, const Mask& mask) { return infer(model, image, mask).raw.out; };
}

struct BucketReport {
  std::string label;
  std::int64_t count = 0;
  double psnr = 0, ssim = 0;
};

/// Bucket index for a measured hole ratio, or -1 outside (0, 50%].
inline int bucket_of(double ratio) {
  const auto& b = mask_buckets();
  for (std::size_t i = 0; i < b.size(); ++i)
    if (ratio > b[i].lo && ratio <= b[i].hi) return static_cast<int>(i);
  return -1;
}

/// Mean PSNR/SSIM of the composited prediction per requested bucket. With
/// `dataset_masks` each sample is scored once in the bucket of its own mask;
/// otherwise every sample is scored with a generated irregular mask per bucket.
inline std::vector<BucketReport> evaluate(const std::vector<Sample>& samples, const std::vector<int>& buckets,
                                          const Predictor& predict, bool dataset_masks, std::uint64_t seed) {
  std::vector<BucketReport> rows;
  for (int bucket : buckets) {
    require(bucket >= 0 && bucket < static_cast<int>(mask_buckets().size()), "evaluate: bucket out of range");
    BucketReport row{mask_buckets()[static_cast<std::size_t>(bucket)].label};
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      Mask m;
      if (dataset_masks) {
        if (bucket_of(s.mask.hole_ratio()) != bucket) continue;
        m = s.mask;
      } else {
        m = gen_irregular_mask(s.image.shape().h(), s.image.shape().w(), bucket,
                               mix_seed(seed, static_cast<std::uint64_t>(i), 0x6576616cULL));
      }
      Tensor comp = composite(s.image, predict(s.image, m), m);
      row.psnr += psnr(comp, s.image);
      row.ssim += ssim(comp, s.image);
      ++row.count;
    }
    if (row.count > 0) {
      row.psnr /= static_cast<double>(row.count);
      row.ssim /= static_cast<double>(row.count);
    }
    rows.push_back(row);
  }
  return rows;
}

/// Tab-separated table plus a summary line; empty buckets print "absent".
inline std::string format_report(const std::vector<BucketReport>& rows) {
  std::string out = "bucket\tcount\tpsnr\tssim\n";
  double psnr_sum = 0, ssim_sum = 0;
  std::int64_t total = 0;
  char buf[128];
  for (const auto& r : rows) {
    if (r.count == 0) {
      out += r.label + "\t0\tabsent\tabsent\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "\t%lld\t%.4f\t%.6f\n", static_cast<long long>(r.count), r.psnr, r.ssim);
    out += r.label + buf;
    psnr_sum += r.psnr * static_cast<double>(r.count);
    ssim_sum += r.ssim * static_cast<double>(r.count);
    total += r.count;
  }
  if (total > 0)
    std::snprintf(buf, sizeof buf, "summary\t%lld\t%.4f\t%.6f\n", static_cast<long long>(total),
                  psnr_sum / static_cast<double>(total), ssim_sum / static_cast<double>(total));
  else
    std::snprintf(buf, sizeof buf, "summary\t0\tabsent\tabsent\n");
  out += buf;
  return out;
}

struct FeatureRendering {
  std::string name;
  Tensor image;  // (1, 3, h, w) at the input resolution
};

/// Input, the six intermediate feature maps rendered as color images, and the output.
inline std::vector<FeatureRendering> render_features(const MEDFEModel& model, const Tensor& image, const Mask& mask) {
  require(image.shape().n() == 1, "visualize expects a single image");
  const Inference r = infer(model, image, mask);
  const std::int64_t h = image.shape().h(), w = image.shape().w();
  NoGradGuard guard;
  auto up = [&](const Tensor& t) { return resize(t, h, w, ResizeMode::Nearest); };
  const auto& g = model.generator;
  return {{"input", mul_const(image, mask.tensor())},
          {"F_te", up(to_color(r.raw.texture, g.head_texture))},
          {"F_st", up(to_color(r.raw.structure, g.head_structure))},
          {"F_fte", up(to_color(r.raw.texture_filled, g.head_texture))},
          {"F_fst", up(to_color(r.raw.structure_filled, g.head_structure))},
          {"F_sf", up(channel_mean_image(r.raw.fused))},
          {"F_equal", up(channel_mean_image(r.raw.equalized))},
          {"output", r.composite}};
}

}  // namespace medfe
