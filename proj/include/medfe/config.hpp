#pragma once

// Flat JSON run configuration. Keys mirror RunConfig field names; loss
// weights use weight_<term> and the Adam betas a two-element array.

#include <string>

#include "json.hpp"
#include "medfe/checkpoint.hpp"
#include "medfe/errors.hpp"
#include "medfe/train.hpp"

namespace medfe {

namespace detail {

template <class T>
T json_field(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ContractViolation("config field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline void apply_config_json(RunConfig& cfg, const nlohmann::json& doc) {
  if (!doc.is_object()) throw ContractViolation("config must be a JSON object");
  for (const auto& [key, v] : doc.items()) {
    using detail::json_field;
    if (key == "preset") cfg.preset = json_field<std::string>(v, key);
    else if (key == "image_size") cfg.image_size = json_field<std::int64_t>(v, key);
    else if (key == "batch_size") cfg.batch_size = json_field<std::int64_t>(v, key);
    else if (key == "steps") cfg.steps = json_field<std::int64_t>(v, key);
    else if (key == "learning_rate") cfg.learning_rate = json_field<double>(v, key);
    else if (key == "adam_betas") {
      const auto b = json_field<std::vector<double>>(v, key);
      if (b.size() != 2) throw ContractViolation("config field 'adam_betas' needs two values");
      cfg.beta1 = b[0];
      cfg.beta2 = b[1];
    } else if (key == "seed") cfg.seed = json_field<std::uint64_t>(v, key);
    else if (key == "data_seed") cfg.data_seed = json_field<std::uint64_t>(v, key);
    else if (key == "weight_recon") cfg.weights.recon = json_field<double>(v, key);
    else if (key == "weight_perceptual") cfg.weights.perceptual = json_field<double>(v, key);
    else if (key == "weight_style") cfg.weights.style = json_field<double>(v, key);
    else if (key == "weight_adversarial") cfg.weights.adversarial = json_field<double>(v, key);
    else if (key == "weight_structure") cfg.weights.structure = json_field<double>(v, key);
    else if (key == "weight_texture") cfg.weights.texture = json_field<double>(v, key);
    else if (key == "manifest") cfg.manifest = json_field<std::string>(v, key);
    else if (key == "checkpoint") cfg.checkpoint = json_field<std::string>(v, key);
    else if (key == "out_dir") cfg.out_dir = json_field<std::string>(v, key);
    else if (key == "extractor") cfg.extractor = json_field<std::string>(v, key);
    else if (key == "checkpoint_every") cfg.checkpoint_every = json_field<std::int64_t>(v, key);
    else if (key == "dataset_size") cfg.dataset_size = json_field<std::int64_t>(v, key);
    else if (key == "mask") cfg.mask = json_field<std::string>(v, key);
    else if (key == "bucket") {
      cfg.bucket = v.is_string() ? parse_bucket(v.get<std::string>()) : json_field<int>(v, key);
    } else {
      throw ContractViolation("unknown config field '" + key + "'");
    }
  }
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config: " + std::string(e.what()), e.byte);
  }
  RunConfig cfg;
  apply_config_json(cfg, doc);
  return cfg;
}

inline RunConfig load_config(const std::string& path) { return parse_config(detail::read_file(path)); }

inline nlohmann::json config_json(const RunConfig& cfg) {
  return {{"preset", cfg.preset},
          {"image_size", cfg.image_size},
          {"batch_size", cfg.batch_size},
          {"steps", cfg.steps},
          {"learning_rate", cfg.learning_rate},
          {"adam_betas", {cfg.beta1, cfg.beta2}},
          {"seed", cfg.seed},
          {"data_seed", cfg.data_seed},
          {"weight_recon", cfg.weights.recon},
          {"weight_perceptual", cfg.weights.perceptual},
          {"weight_style", cfg.weights.style},
          {"weight_adversarial", cfg.weights.adversarial},
          {"weight_structure", cfg.weights.structure},
          {"weight_texture", cfg.weights.texture},
          {"manifest", cfg.manifest},
          {"checkpoint", cfg.checkpoint},
          {"out_dir", cfg.out_dir},
          {"extractor", cfg.extractor},
          {"checkpoint_every", cfg.checkpoint_every},
          {"dataset_size", cfg.dataset_size},
          {"mask", cfg.mask},
          {"bucket", cfg.bucket}};
}

}  // namespace medfe
