// medfe: training, inference, evaluation, data generation, feature
// visualization and self-tests from the command line.
//
// Exit codes: 0 success, 1 contract violation or usage error, 2 IO or parse
// error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "medfe/config.hpp"
#include "medfe/medfe.hpp"

namespace fs = std::filesystem;
using namespace medfe;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed, data_seed;
  std::optional<std::string> preset, out, checkpoint, manifest, mask_kind, extractor;
  std::optional<std::int64_t> size, steps, batch, count, checkpoint_every;
  std::optional<double> lr;
  std::vector<std::string> buckets;
  std::string image, mask, resume;
};

void add_run_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Flat JSON config; flags override its fields");
  cmd->add_option("--seed", f.seed, "Model and training seed");
  cmd->add_option("--data-seed", f.data_seed, "Synthetic corpus seed");
  cmd->add_option("--preset", f.preset, "tiny, desk or full");
  cmd->add_option("--size", f.size, "Image size in pixels");
  cmd->add_option("--steps", f.steps, "Training steps");
  cmd->add_option("--batch", f.batch, "Batch size");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  cmd->add_option("--manifest", f.manifest, "Dataset manifest (image, structure, mask per line)");
  cmd->add_option("--count", f.count, "Number of synthetic samples");
  cmd->add_option("--bucket", f.buckets, "Hole-ratio bucket: 0-10, 10-20, 20-30, 30-40 or 40-50");
  cmd->add_option("--mask-kind", f.mask_kind, "center, irregular or dataset");
}

RunConfig resolve(const Flags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.data_seed) cfg.data_seed = *f.data_seed;
  if (f.preset) cfg.preset = *f.preset;
  if (f.size) cfg.image_size = *f.size;
  if (f.steps) cfg.steps = *f.steps;
  if (f.batch) cfg.batch_size = *f.batch;
  if (f.lr) cfg.learning_rate = *f.lr;
  if (f.out) cfg.out_dir = *f.out;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  if (f.manifest) cfg.manifest = *f.manifest;
  if (f.count) cfg.dataset_size = *f.count;
  if (f.extractor) cfg.extractor = *f.extractor;
  if (f.checkpoint_every) cfg.checkpoint_every = *f.checkpoint_every;
  if (f.mask_kind) cfg.mask = *f.mask_kind;
  if (!f.buckets.empty()) {
    cfg.bucket = parse_bucket(f.buckets.front());
    if (!f.mask_kind && cfg.mask == "center") cfg.mask = "irregular";
  }
  cfg.validate();
  return cfg;
}

std::vector<int> requested_buckets(const Flags& f) {
  std::vector<int> out;
  for (const auto& b : f.buckets) out.push_back(parse_bucket(b));
  if (out.empty())
    for (std::size_t i = 0; i < mask_buckets().size(); ++i) out.push_back(static_cast<int>(i));
  return out;
}

std::string numbered(const std::string& stem, std::int64_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%05lld", static_cast<long long>(i));
  return stem + buf + ext;
}

MEDFEModel model_for(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ContractViolation("--checkpoint is required");
  return load_model(cfg.checkpoint);
}

void check_size(const MEDFEModel& model, const Tensor& image) {
  const auto m = model.cfg.size_multiple();
  const auto h = image.shape().h(), w = image.shape().w();
  if (h % m != 0 || w % m != 0)
    throw ContractViolation("image is " + std::to_string(w) + "x" + std::to_string(h) + "; both sides must be multiples of " +
                            std::to_string(m) + " (crop or pad to " + std::to_string(std::max<std::int64_t>(m, h / m * m)) +
                            "x" + std::to_string(std::max<std::int64_t>(m, w / m * m)) + ")");
}

/// Image from --image, or a synthetic sample when absent; mask from --mask or centered.
std::pair<Tensor, Mask> input_pair(const Flags& f, const RunConfig& cfg, std::int64_t size) {
  Tensor image = f.image.empty() ? synth_image(mix_seed(cfg.data_seed, 0), size) : read_ppm(f.image);
  Mask mask = f.mask.empty() ? gen_center_mask(image.shape().h(), image.shape().w()) : read_pgm_mask(f.mask);
  if (mask.shape().h() != image.shape().h() || mask.shape().w() != image.shape().w())
    throw ContractViolation("mask and image sizes differ");
  return {image, mask};
}

int cmd_train(const Flags& f) {
  RunConfig cfg = resolve(f);
  Trainer trainer(cfg, load_dataset(cfg));
  if (!f.resume.empty()) trainer.resume(f.resume);
  fs::create_directories(cfg.out_dir);
  const fs::path log_path = fs::path(cfg.out_dir) / "train_log.tsv";
  std::ofstream log(log_path, f.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write " + log_path.string());
  detail::write_file((fs::path(cfg.out_dir) / "config.json").string(), config_json(cfg).dump(2) + "\n");
  trainer.run(log, f.resume.empty());
  std::cout << "trained " << trainer.current_step() << " steps; checkpoint "
            << (fs::path(cfg.out_dir) / "checkpoint.bin").string() << "\n";
  return 0;
}

int cmd_infer(const Flags& f) {
  RunConfig cfg = resolve(f);
  const MEDFEModel model = model_for(cfg);
  auto [image, mask] = input_pair(f, cfg, model.cfg.image_size);
  check_size(model, image);
  const Inference r = infer(model, image, mask);
  fs::create_directories(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  write_ppm((dir / "I_out.ppm").string(), r.raw.out);
  write_ppm((dir / "I_comp.ppm").string(), r.composite);
  write_ppm((dir / "I_ote.ppm").string(), r.raw.texture_image);
  write_ppm((dir / "I_ost.ppm").string(), r.raw.structure_image);
  std::cout << "wrote I_out, I_comp, I_ote, I_ost to " << dir.string() << "\n";
  return 0;
}

int cmd_evaluate(const Flags& f) {
  RunConfig cfg = resolve(f);
  const MEDFEModel model = model_for(cfg);
  const bool from_manifest = !cfg.manifest.empty();
  const auto samples = from_manifest ? load_manifest_samples(cfg.manifest, model.cfg.image_size)
                                     : synth_corpus(cfg.data_seed, cfg.dataset_size, model.cfg.image_size, 100000);
  std::cout << format_report(evaluate(samples, requested_buckets(f), model_predictor(model), from_manifest, cfg.seed));
  return 0;
}

int cmd_make_masks(const Flags& f) {
  RunConfig cfg = resolve(f);
  const std::int64_t size = cfg.generator().image_size;
  fs::create_directories(cfg.out_dir);
  const auto buckets = requested_buckets(f);
  for (std::int64_t i = 0; i < cfg.dataset_size; ++i) {
    const Mask m =
        cfg.mask == "center"
            ? gen_center_mask(size, size)
            : gen_irregular_mask(size, size, buckets[static_cast<std::size_t>(i) % buckets.size()],
                                 mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    write_pgm_mask((fs::path(cfg.out_dir) / numbered("mask", i, ".pgm")).string(), m);
  }
  std::cout << "wrote " << cfg.dataset_size << " masks to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_make_dataset(const Flags& f) {
  RunConfig cfg = resolve(f);
  const std::int64_t size = cfg.generator().image_size;
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  const auto buckets = requested_buckets(f);
  std::vector<ManifestEntry> entries;
  for (std::int64_t i = 0; i < cfg.dataset_size; ++i) {
    MaskSpec spec;
    if (cfg.mask != "center") {
      spec.kind = MaskKind::Irregular;
      spec.bucket = buckets[static_cast<std::size_t>(i) % buckets.size()];
      spec.seed = mix_seed(cfg.data_seed, static_cast<std::uint64_t>(i), 1);
    }
    const Sample s = synth_sample(mix_seed(cfg.data_seed, static_cast<std::uint64_t>(i)), size, spec);
    ManifestEntry e{numbered("image", i, ".ppm"), numbered("structure", i, ".ppm"), numbered("mask", i, ".pgm")};
    write_ppm((dir / e.image).string(), s.image);
    write_ppm((dir / e.structure).string(), s.structure);
    write_pgm_mask((dir / e.mask).string(), s.mask);
    entries.push_back(std::move(e));
  }
  write_manifest((dir / "manifest.tsv").string(), entries);
  std::cout << "wrote " << entries.size() << " samples and " << (dir / "manifest.tsv").string() << "\n";
  return 0;
}

int cmd_visualize(const Flags& f) {
  RunConfig cfg = resolve(f);
  const MEDFEModel model = model_for(cfg);
  auto [image, mask] = input_pair(f, cfg, model.cfg.image_size);
  check_size(model, image);
  fs::create_directories(cfg.out_dir);
  for (const auto& p : render_features(model, image, mask))
    write_ppm((fs::path(cfg.out_dir) / (p.name + ".ppm")).string(), p.image);
  std::cout << "wrote 8 panels to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_selftest() {
  bool all = true;
  for (const auto& r : selftest::run_all()) {
    std::printf("%s\t%s\t%.2fs\t%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    all = all && r.passed;
  }
  std::printf("%s\n", all ? "all suites passed" : "some suites failed");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mutual encoder-decoder inpainting with feature equalization"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "Train a model and write out/checkpoint.bin and out/train_log.tsv");
  add_run_flags(train, f);
  train->add_option("--resume", f.resume, "Continue from a training checkpoint");
  train->add_option("--extractor", f.extractor, "Feature extractor weights for the perceptual and style losses");
  train->add_option("--checkpoint-every", f.checkpoint_every, "Save every K steps");

  auto* infer_cmd = app.add_subcommand("infer", "Fill the hole of one image");
  add_run_flags(infer_cmd, f);
  infer_cmd->add_option("--image", f.image, "Input PPM (default: a synthetic sample)");
  infer_cmd->add_option("--mask", f.mask, "PGM mask, white = valid (default: centered hole)");

  auto* eval_cmd = app.add_subcommand("evaluate", "Per-bucket PSNR/SSIM report");
  add_run_flags(eval_cmd, f);

  auto* masks = app.add_subcommand("make-masks", "Write PGM masks");
  add_run_flags(masks, f);

  auto* dataset = app.add_subcommand("make-dataset", "Write a synthetic dataset and its manifest");
  add_run_flags(dataset, f);

  auto* vis = app.add_subcommand("visualize", "Render feature maps as color images");
  add_run_flags(vis, f);
  vis->add_option("--image", f.image, "Input PPM (default: a synthetic sample)");
  vis->add_option("--mask", f.mask, "PGM mask (default: centered hole)");

  auto* self = app.add_subcommand("selftest", "Run the oracle and gradient-check suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(f);
    if (*infer_cmd) return cmd_infer(f);
    if (*eval_cmd) return cmd_evaluate(f);
    if (*masks) return cmd_make_masks(f);
    if (*dataset) return cmd_make_dataset(f);
    if (*vis) return cmd_visualize(f);
    if (*self) return cmd_selftest();
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
