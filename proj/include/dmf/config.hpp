// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dmf/data.hpp"
#include "dmf/model.hpp"
#include "dmf/serialize.hpp"
#include "dmf/train.hpp"

namespace dmf {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& field) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      field = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(concat("config: field '", key, "': ", e.what()));
    }
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(concat("config: ", where, " must be an object"));
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(concat("config: unknown field '", key, "' in ", where));
  }
}

}  // namespace detail

inline const char* to_string(OdeMethod m) { return m == OdeMethod::euler_fixed ? "euler_fixed" : "dopri5"; }
inline const char* to_string(FilterRefresh r) { return r == FilterRefresh::frozen ? "frozen" : "per_eval"; }
inline const char* to_string(Augment a) { return a == Augment::none ? "none" : "flip_crop"; }

inline OdeMethod parse_ode_method(const std::string& s) {
  if (s == "euler_fixed") return OdeMethod::euler_fixed;
  if (s == "dopri5") return OdeMethod::dopri5;
  throw ConfigError("config: ode.method must be euler_fixed or dopri5, got '" + s + "'");
}

inline FilterRefresh parse_filter_refresh(const std::string& s) {
  if (s == "frozen") return FilterRefresh::frozen;
  if (s == "per_eval") return FilterRefresh::per_eval;
  throw ConfigError("config: ode.filter_refresh must be frozen or per_eval, got '" + s + "'");
}

inline Augment parse_augment(const std::string& s) {
  if (s == "none") return Augment::none;
  if (s == "flip_crop") return Augment::flip_crop;
  throw ConfigError("config: augment must be none or flip_crop, got '" + s + "'");
}

inline nlohmann::json to_json(const OdeConfig& c) {
  return {{"method", to_string(c.method)}, {"depth_T", c.depth_T},   {"rtol", c.rtol},
          {"atol", c.atol},                {"max_evals", c.max_evals}, {"t_span", {c.t_start, c.t_end}},
          {"filter_refresh", to_string(c.filter_refresh)}};
}

inline OdeConfig ode_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"method", "depth_T", "rtol", "atol", "max_evals", "t_span", "filter_refresh"}, "ode");
  OdeConfig c;
  std::string method = to_string(c.method), refresh = to_string(c.filter_refresh);
  detail::read_opt(j, "method", method);
  detail::read_opt(j, "filter_refresh", refresh);
  c.method = parse_ode_method(method);
  c.filter_refresh = parse_filter_refresh(refresh);
  detail::read_opt(j, "depth_T", c.depth_T);
  detail::read_opt(j, "rtol", c.rtol);
  detail::read_opt(j, "atol", c.atol);
  detail::read_opt(j, "max_evals", c.max_evals);
  if (auto it = j.find("t_span"); it != j.end()) {
    if (!it->is_array() || it->size() != 2) throw ConfigError("config: ode.t_span must be [start, end]");
    c.t_start = (*it)[0].get<double>();
    c.t_end = (*it)[1].get<double>();
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"in_channels", c.in_channels},
          {"stage_channels", c.stage_channels},
          {"keep_last_pool", c.keep_last_pool},
          {"image_size", c.image_size}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"in_channels", "stage_channels", "keep_last_pool", "image_size"}, "backbone");
  BackboneConfig c;
  detail::read_opt(j, "in_channels", c.in_channels);
  detail::read_opt(j, "stage_channels", c.stage_channels);
  detail::read_opt(j, "keep_last_pool", c.keep_last_pool);
  detail::read_opt(j, "image_size", c.image_size);
  return c;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"backbone", to_json(m.backbone)},
          {"g", m.align.groups},
          {"k", m.align.kernel},
          {"dynamic_sampling", m.align.dynamic_sampling},
          {"ode", to_json(m.ode)},
          {"num_global_classes", m.num_global_classes}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.backbone = backbone_config_from_json(j.at("backbone"));
  detail::read_opt(j, "g", m.align.groups);
  detail::read_opt(j, "k", m.align.kernel);
  detail::read_opt(j, "dynamic_sampling", m.align.dynamic_sampling);
  m.ode = ode_config_from_json(j.at("ode"));
  detail::read_opt(j, "num_global_classes", m.num_global_classes);
  return m;
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes}, {"image_size", s.image_size},
          {"channels", s.channels},       {"samples_per_class", s.samples_per_class},
          {"jitter", s.jitter},           {"scale_min", s.scale_min},
          {"scale_max", s.scale_max},     {"distractors", s.distractors},
          {"distractor_scale", s.distractor_scale}, {"noise_sigma", s.noise_sigma},
          {"num_train", s.num_train},     {"num_val", s.num_val},
          {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"num_classes", "image_size", "channels", "samples_per_class", "jitter", "scale_min",
                          "scale_max", "distractors", "distractor_scale", "noise_sigma", "num_train", "num_val",
                          "seed"},
                         "synthetic spec");
  SyntheticSpec s;
  detail::read_opt(j, "num_classes", s.num_classes);
  detail::read_opt(j, "image_size", s.image_size);
  detail::read_opt(j, "channels", s.channels);
  detail::read_opt(j, "samples_per_class", s.samples_per_class);
  detail::read_opt(j, "jitter", s.jitter);
  detail::read_opt(j, "scale_min", s.scale_min);
  detail::read_opt(j, "scale_max", s.scale_max);
  detail::read_opt(j, "distractors", s.distractors);
  detail::read_opt(j, "distractor_scale", s.distractor_scale);
  detail::read_opt(j, "noise_sigma", s.noise_sigma);
  detail::read_opt(j, "num_train", s.num_train);
  detail::read_opt(j, "num_val", s.num_val);
  detail::read_opt(j, "seed", s.seed);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

/// Training run description: a TrainConfig plus where the data comes from
/// and where outputs go.
struct RunConfig {
  TrainConfig train;
  std::string dataset;               // directory written by gen-data; empty → synthetic
  SyntheticSpec synthetic;
  std::string out_dir = "run";
  index_t eval_episodes = 500;
  unsigned eval_threads = 1;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"weight_decay", c.weight_decay},
          {"momentum", c.momentum},
          {"epochs", c.epochs},
          {"episodes_per_epoch", c.episodes_per_epoch},
          {"N", c.N},
          {"K", c.K},
          {"Q", c.Q},
          {"g", c.g},
          {"k", c.k},
          {"dynamic_sampling", c.dynamic_sampling},
          {"ode", to_json(c.ode)},
          {"backbone", to_json(c.backbone)},
          {"seed", c.seed},
          {"augment", to_string(c.augment)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  detail::read_opt(j, "lr0", c.lr0);
  detail::read_opt(j, "weight_decay", c.weight_decay);
  detail::read_opt(j, "momentum", c.momentum);
  detail::read_opt(j, "epochs", c.epochs);
  detail::read_opt(j, "episodes_per_epoch", c.episodes_per_epoch);
  detail::read_opt(j, "N", c.N);
  detail::read_opt(j, "K", c.K);
  detail::read_opt(j, "Q", c.Q);
  detail::read_opt(j, "g", c.g);
  detail::read_opt(j, "k", c.k);
  detail::read_opt(j, "dynamic_sampling", c.dynamic_sampling);
  detail::read_opt(j, "seed", c.seed);
  if (auto it = j.find("ode"); it != j.end()) c.ode = ode_config_from_json(*it);
  if (auto it = j.find("backbone"); it != j.end()) c.backbone = backbone_config_from_json(*it);
  if (auto it = j.find("augment"); it != j.end()) c.augment = parse_augment(it->get<std::string>());
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"lr0", "weight_decay", "momentum", "epochs", "episodes_per_epoch", "N", "K", "Q", "g", "k",
                          "dynamic_sampling", "ode", "backbone", "seed", "augment", "dataset", "synthetic", "out_dir",
                          "eval_episodes", "eval_threads"},
                         "train config");
  RunConfig r;
  r.train = train_config_from_json(j);
  detail::read_opt(j, "dataset", r.dataset);
  if (auto it = j.find("synthetic"); it != j.end()) r.synthetic = synthetic_spec_from_json(*it);
  detail::read_opt(j, "out_dir", r.out_dir);
  detail::read_opt(j, "eval_episodes", r.eval_episodes);
  detail::read_opt(j, "eval_threads", r.eval_threads);
  return r;
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Where a run's episodes come from: a gen-data directory or a synthetic
/// spec regenerated on demand.
inline nlohmann::json data_source(const RunConfig& rc) {
  if (!rc.dataset.empty()) return {{"dataset", rc.dataset}};
  return {{"synthetic", to_json(rc.synthetic)}};
}

inline Dataset load_data_source(const nlohmann::json& source) {
  if (source.contains("dataset")) return load_dataset(source["dataset"].get<std::string>());
  if (source.contains("synthetic")) return generate_synthetic(synthetic_spec_from_json(source["synthetic"]));
  throw ConfigError("data source must name a dataset directory or a synthetic spec");
}

struct Checkpoint {
  ModelConfig model;
  ParamStore params;
  nlohmann::json data;  // data source, may be null
};

/// Checkpoint = parameter directory whose manifest "meta" holds the model
/// config and the data source.
inline void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& model, const ParamStore& params,
                            const nlohmann::json& data = nullptr) {
  save_params(dir, params, {{"model", to_json(model)}, {"data", data}});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  if (!manifest.contains("meta") || !manifest["meta"].contains("model")) {
    throw FormatError("checkpoint " + dir.string() + " carries no model config");
  }
  Checkpoint ck{model_config_from_json(manifest["meta"]["model"]), load_params(dir),
                manifest["meta"].value("data", nlohmann::json())};
  ck.model.validate();
  return ck;
}

}  // namespace dmf
