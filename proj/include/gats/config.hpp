#pragma once

// Structured run configuration loaded from JSON. Every GATS hyperparameter
// (modalities with widths/windows/steering, shared width d, layer count K,
// heads, FFW width, gate bias) plus training schedule, seeds, paths, and the
// preset name. Unknown keys anywhere in the document are a hard error so a
// typo cannot silently fall back to a default.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gats/component.hpp"
#include "gats/gats_layer.hpp"

namespace gats {

struct TrainingConfig {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  double lr = 3e-3;
  std::size_t warmup_steps = 100;
  double lambda = 0.5;
  double mask_prob = 0.02;
  std::size_t checkpoint_every = 0;
};

struct EnvConfig {
  std::size_t episodes = 1000;       // dataset size for gen-data / training
  std::size_t eval_episodes = 500;
  std::uint64_t dataset_seed = 99;
  std::uint64_t eval_seed = 0x5eedULL;
};

struct RunConfig {
  std::string preset = "agent3";
  std::uint64_t seed = 1;
  std::string out_dir = ".";
  std::string metrics_path;
  std::string dataset_path;
  GatsConfig gats;
  std::vector<ComponentConfig> components;
  TrainingConfig training;
  EnvConfig env;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw Error("config", "unknown key '" + key + "' in " + where);
}

inline MaskMode mask_mode_from_name(const std::string& name) {
  if (name == "causal") return MaskMode::causal;
  if (name == "full") return MaskMode::full;
  if (name == "time_space") return MaskMode::time_space;
  throw Error("config", "unknown mask mode '" + name + "'");
}

}  // namespace detail

inline GatsConfig gats_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"d", "layers", "heads", "ffw_hidden", "gate_init_bias",
          "modalities"},
      "gats");
  GatsConfig cfg;
  cfg.d = j.value("d", cfg.d);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.ffw_hidden = j.value("ffw_hidden", cfg.ffw_hidden);
  cfg.gate_init_bias = j.value("gate_init_bias", cfg.gate_init_bias);
  if (j.contains("modalities")) {
    for (const auto& m : j.at("modalities")) {
      detail::reject_unknown_keys(m, {"id", "width", "window", "steered"},
                                  "gats.modalities[]");
      ModalitySpec spec;
      spec.modality_id = m.at("id").get<int>();
      spec.embed_dim = m.at("width").get<std::size_t>();
      spec.context_len = m.at("window").get<std::size_t>();
      spec.steered = m.value("steered", false);
      cfg.modalities.push_back(spec);
    }
  }
  return cfg;
}

inline nlohmann::json gats_config_to_json(const GatsConfig& cfg) {
  nlohmann::json j;
  j["d"] = cfg.d;
  j["layers"] = cfg.layers;
  j["heads"] = cfg.heads;
  j["ffw_hidden"] = cfg.ffw_hidden;
  j["gate_init_bias"] = cfg.gate_init_bias;
  j["modalities"] = nlohmann::json::array();
  for (const auto& m : cfg.modalities)
    j["modalities"].push_back({{"id", m.modality_id},
                               {"width", m.embed_dim},
                               {"window", m.context_len},
                               {"steered", m.steered}});
  return j;
}

inline ComponentConfig component_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"modality_id", "vocab", "embed_dim", "layers", "heads",
          "ffw_hidden", "mask", "tokens_per_frame", "max_len"},
      "components[]");
  ComponentConfig cfg;
  cfg.modality_id = j.at("modality_id").get<int>();
  cfg.vocab = j.value("vocab", cfg.vocab);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.ffw_hidden = j.value("ffw_hidden", cfg.ffw_hidden);
  if (j.contains("mask"))
    cfg.mask = detail::mask_mode_from_name(j.at("mask").get<std::string>());
  cfg.tokens_per_frame = j.value("tokens_per_frame", cfg.tokens_per_frame);
  cfg.max_len = j.value("max_len", cfg.max_len);
  return cfg;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"preset", "seed", "out_dir", "metrics_path", "dataset_path",
          "gats", "components", "training", "env"},
      "run config");
  RunConfig cfg;
  cfg.preset = j.value("preset", cfg.preset);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.metrics_path = j.value("metrics_path", cfg.metrics_path);
  cfg.dataset_path = j.value("dataset_path", cfg.dataset_path);
  if (j.contains("gats")) cfg.gats = gats_config_from_json(j.at("gats"));
  if (j.contains("components"))
    for (const auto& c : j.at("components"))
      cfg.components.push_back(component_config_from_json(c));
  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::reject_unknown_keys(
        t, {"steps", "batch", "lr", "warmup_steps", "lambda", "mask_prob",
            "checkpoint_every"},
        "training");
    cfg.training.steps = t.value("steps", cfg.training.steps);
    cfg.training.batch = t.value("batch", cfg.training.batch);
    cfg.training.lr = t.value("lr", cfg.training.lr);
    cfg.training.warmup_steps =
        t.value("warmup_steps", cfg.training.warmup_steps);
    cfg.training.lambda = t.value("lambda", cfg.training.lambda);
    cfg.training.mask_prob = t.value("mask_prob", cfg.training.mask_prob);
    cfg.training.checkpoint_every =
        t.value("checkpoint_every", cfg.training.checkpoint_every);
  }
  if (j.contains("env")) {
    const auto& e = j.at("env");
    detail::reject_unknown_keys(
        e, {"episodes", "eval_episodes", "dataset_seed", "eval_seed"}, "env");
    cfg.env.episodes = e.value("episodes", cfg.env.episodes);
    cfg.env.eval_episodes = e.value("eval_episodes", cfg.env.eval_episodes);
    cfg.env.dataset_seed = e.value("dataset_seed", cfg.env.dataset_seed);
    cfg.env.eval_seed = e.value("eval_seed", cfg.env.eval_seed);
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open config file " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw Error("config", "malformed JSON in config file " + path);
  return run_config_from_json(j);
}

}  // namespace gats
