#pragma once

// Run configuration: one flat, serializable document that fully determines a
// run. Defaults mirror the published training recipe. Loading is strict —
// unknown keys and type mismatches are configuration errors naming the field.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "prolad/data.hpp"
#include "prolad/errors.hpp"
#include "prolad/nn.hpp"
#include "prolad/pipeline.hpp"
#include "prolad/serialize.hpp"

namespace prolad::config {

struct RunConfig {
  // Reproducibility.
  std::uint64_t seed = 7;

  // Backbone.
  std::vector<std::size_t> widths = {16, 32, 64, 64};
  std::vector<std::size_t> strides = {1, 2, 2, 1};

  // Synthetic data.
  std::size_t image_size = 16;
  std::size_t num_classes = 20;
  std::size_t pretrain_classes = 8;
  std::vector<double> domains = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};

  // Episodes.
  std::size_t episodes_per_domain = 20;
  std::size_t way_min = 2;
  std::size_t way_max = 5;
  std::size_t shot_min = 1;
  std::size_t shot_max = 5;
  std::size_t query_per_class = 10;

  // Method.
  std::string method = "prolad-sim";

  // Coefficients and losses.
  double beta = 1.5;
  double gamma = 0.02;
  double tau = 10.0;

  // Adapters.
  std::size_t group_size = 8;
  double sn_momentum = 0.8;

  // Fine-tuning.
  double adapter_lr = 0.5;
  double head_lr = 1.0;
  double acc_threshold = 0.99;
  std::size_t extra_iters = 25;
  std::size_t max_iters = 200;
  double seen_lr_scale = 0.1;
  bool query_batch_stats = false;

  // Pretraining.
  std::size_t pretrain_epochs = 30;
  double pretrain_lr = 0.03;
  double pretrain_momentum = 0.9;
  double weight_decay = 7e-4;
  std::size_t pretrain_batch = 64;
  std::size_t pretrain_samples_per_class = 25;
  std::size_t emd_samples_per_class = 6;      // per-domain embeddings behind the similarity table
  std::size_t profile_samples_per_class = 5;  // per-domain batch for statistics profiling

  // Report grouping by declared shift.
  double similar_max_shift = 0.4;
  double dissimilar_min_shift = 0.6;

  // Execution.
  std::size_t threads = 1;
  std::string out_dir;
  std::string checkpoint;  // stage-1 checkpoint directory; empty = <out_dir>/pretrain

  void validate() const {
    if (widths.empty()) throw ConfigError("config widths: need at least one block");
    if (strides.size() != widths.size()) {
      throw ConfigError("config strides: need one stride per width");
    }
    for (std::size_t s : strides) {
      if (s == 0) throw ConfigError("config strides: stride must be positive");
    }
    if (image_size < 2) throw ConfigError("config image_size: must be at least 2");
    if (num_classes < 2) throw ConfigError("config num_classes: need at least 2");
    if (pretrain_classes == 0 || pretrain_classes >= num_classes) {
      throw ConfigError("config pretrain_classes: must leave novel classes");
    }
    if (domains.empty()) throw ConfigError("config domains: need at least one shift");
    for (double s : domains) {
      if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("config domains: shifts must lie in [0,1]");
    }
    if (episodes_per_domain == 0) throw ConfigError("config episodes_per_domain: must be positive");
    if (way_min == 0 || way_min > way_max) throw ConfigError("config way_min/way_max: bad range");
    if (way_max > num_classes - pretrain_classes) {
      throw ConfigError("config way_max: exceeds the novel class count");
    }
    if (shot_min == 0 || shot_min > shot_max) {
      throw ConfigError("config shot_min/shot_max: bad range");
    }
    if (query_per_class == 0) throw ConfigError("config query_per_class: must be positive");
    if (beta <= 0.0) throw ConfigError("config beta: must be positive");
    if (gamma <= 0.0) throw ConfigError("config gamma: must be positive");
    if (tau <= 0.0) throw ConfigError("config tau: must be positive");
    if (group_size == 0) throw ConfigError("config group_size: must be positive");
    if (!(sn_momentum > 0.0 && sn_momentum <= 1.0)) {
      throw ConfigError("config sn_momentum: must lie in (0,1]");
    }
    if (adapter_lr <= 0.0) throw ConfigError("config adapter_lr: must be positive");
    if (head_lr <= 0.0) throw ConfigError("config head_lr: must be positive");
    if (!(acc_threshold > 0.0 && acc_threshold <= 1.0)) {
      throw ConfigError("config acc_threshold: must lie in (0,1]");
    }
    if (max_iters == 0) throw ConfigError("config max_iters: must be positive");
    if (seen_lr_scale <= 0.0) throw ConfigError("config seen_lr_scale: must be positive");
    if (pretrain_lr <= 0.0) throw ConfigError("config pretrain_lr: must be positive");
    if (!(pretrain_momentum >= 0.0 && pretrain_momentum < 1.0)) {
      throw ConfigError("config pretrain_momentum: must lie in [0,1)");
    }
    if (weight_decay < 0.0) throw ConfigError("config weight_decay: must be nonnegative");
    if (pretrain_batch == 0) throw ConfigError("config pretrain_batch: must be positive");
    if (pretrain_samples_per_class == 0) {
      throw ConfigError("config pretrain_samples_per_class: must be positive");
    }
    if (emd_samples_per_class == 0) {
      throw ConfigError("config emd_samples_per_class: must be positive");
    }
    if (profile_samples_per_class == 0) {
      throw ConfigError("config profile_samples_per_class: must be positive");
    }
    if (!(similar_max_shift >= 0.0 && similar_max_shift <= 1.0)) {
      throw ConfigError("config similar_max_shift: must lie in [0,1]");
    }
    if (!(dissimilar_min_shift >= 0.0 && dissimilar_min_shift <= 1.0)) {
      throw ConfigError("config dissimilar_min_shift: must lie in [0,1]");
    }
    if (similar_max_shift > dissimilar_min_shift) {
      throw ConfigError("config similar_max_shift: groups must not overlap");
    }
    if (threads == 0) throw ConfigError("config threads: must be positive");
  }

  // Views onto the module-level configurations.
  nn::BackboneConfig backbone_config() const {
    nn::BackboneConfig b;
    b.in_channels = 3;
    b.widths = widths;
    b.strides = strides;
    return b;
  }

  data::GeneratorConfig generator_config() const {
    data::GeneratorConfig g;
    g.height = image_size;
    g.width = image_size;
    g.num_classes = num_classes;
    g.num_pretrain_classes = pretrain_classes;
    return g;
  }

  data::EpisodeConfig episode_config() const {
    data::EpisodeConfig e;
    e.way_min = way_min;
    e.way_max = way_max;
    e.shot_min = shot_min;
    e.shot_max = shot_max;
    e.query_per_class = query_per_class;
    return e;
  }

  pipeline::FinetuneConfig finetune_config() const {
    pipeline::FinetuneConfig f;
    f.adapter_lr = adapter_lr;
    f.head_lr = head_lr;
    f.acc_threshold = acc_threshold;
    f.extra_iters = extra_iters;
    f.max_iters = max_iters;
    f.seen_lr_scale = seen_lr_scale;
    f.tau = tau;
    f.beta = beta;
    f.group_size = group_size;
    f.sn_momentum = sn_momentum;
    f.query_batch_stats = query_batch_stats;
    return f;
  }

  pipeline::PretrainConfig pretrain_config() const {
    pipeline::PretrainConfig p;
    p.epochs = pretrain_epochs;
    p.lr = pretrain_lr;
    p.momentum = pretrain_momentum;
    p.weight_decay = weight_decay;
    p.batch_size = pretrain_batch;
    return p;
  }

  // Novel (never pretrained) class ids.
  std::vector<long> novel_classes() const {
    std::vector<long> out;
    for (std::size_t c = pretrain_classes; c < num_classes; ++c) {
      out.push_back(static_cast<long>(c));
    }
    return out;
  }

  std::vector<long> source_classes() const {
    std::vector<long> out;
    for (std::size_t c = 0; c < pretrain_classes; ++c) out.push_back(static_cast<long>(c));
    return out;
  }

  std::filesystem::path checkpoint_dir() const {
    if (!checkpoint.empty()) return checkpoint;
    return std::filesystem::path(out_dir) / "pretrain";
  }
};

inline ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["widths"] = c.widths;
  j["strides"] = c.strides;
  j["image_size"] = c.image_size;
  j["num_classes"] = c.num_classes;
  j["pretrain_classes"] = c.pretrain_classes;
  j["domains"] = c.domains;
  j["episodes_per_domain"] = c.episodes_per_domain;
  j["way_min"] = c.way_min;
  j["way_max"] = c.way_max;
  j["shot_min"] = c.shot_min;
  j["shot_max"] = c.shot_max;
  j["query_per_class"] = c.query_per_class;
  j["method"] = c.method;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["tau"] = c.tau;
  j["group_size"] = c.group_size;
  j["sn_momentum"] = c.sn_momentum;
  j["adapter_lr"] = c.adapter_lr;
  j["head_lr"] = c.head_lr;
  j["acc_threshold"] = c.acc_threshold;
  j["extra_iters"] = c.extra_iters;
  j["max_iters"] = c.max_iters;
  j["seen_lr_scale"] = c.seen_lr_scale;
  j["query_batch_stats"] = c.query_batch_stats;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_lr"] = c.pretrain_lr;
  j["pretrain_momentum"] = c.pretrain_momentum;
  j["weight_decay"] = c.weight_decay;
  j["pretrain_batch"] = c.pretrain_batch;
  j["pretrain_samples_per_class"] = c.pretrain_samples_per_class;
  j["emd_samples_per_class"] = c.emd_samples_per_class;
  j["profile_samples_per_class"] = c.profile_samples_per_class;
  j["similar_max_shift"] = c.similar_max_shift;
  j["dissimilar_min_shift"] = c.dissimilar_min_shift;
  j["threads"] = c.threads;
  j["out_dir"] = c.out_dir;
  j["checkpoint"] = c.checkpoint;
  return j;
}

namespace detail {

template <typename T>
void read_field(const ordered_json& j, const std::string& key, T& target) {
  try {
    target = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + key + "': wrong type");
  }
}

}  // namespace detail

// Strict deserialization: every present key must be known and well-typed;
// absent keys keep their defaults.
inline RunConfig from_json(const ordered_json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  for (const auto& item : j.items()) {
    const std::string& k = item.key();
    if (k == "seed") detail::read_field(j, k, c.seed);
    else if (k == "widths") detail::read_field(j, k, c.widths);
    else if (k == "strides") detail::read_field(j, k, c.strides);
    else if (k == "image_size") detail::read_field(j, k, c.image_size);
    else if (k == "num_classes") detail::read_field(j, k, c.num_classes);
    else if (k == "pretrain_classes") detail::read_field(j, k, c.pretrain_classes);
    else if (k == "domains") detail::read_field(j, k, c.domains);
    else if (k == "episodes_per_domain") detail::read_field(j, k, c.episodes_per_domain);
    else if (k == "way_min") detail::read_field(j, k, c.way_min);
    else if (k == "way_max") detail::read_field(j, k, c.way_max);
    else if (k == "shot_min") detail::read_field(j, k, c.shot_min);
    else if (k == "shot_max") detail::read_field(j, k, c.shot_max);
    else if (k == "query_per_class") detail::read_field(j, k, c.query_per_class);
    else if (k == "method") detail::read_field(j, k, c.method);
    else if (k == "beta") detail::read_field(j, k, c.beta);
    else if (k == "gamma") detail::read_field(j, k, c.gamma);
    else if (k == "tau") detail::read_field(j, k, c.tau);
    else if (k == "group_size") detail::read_field(j, k, c.group_size);
    else if (k == "sn_momentum") detail::read_field(j, k, c.sn_momentum);
    else if (k == "adapter_lr") detail::read_field(j, k, c.adapter_lr);
    else if (k == "head_lr") detail::read_field(j, k, c.head_lr);
    else if (k == "acc_threshold") detail::read_field(j, k, c.acc_threshold);
    else if (k == "extra_iters") detail::read_field(j, k, c.extra_iters);
    else if (k == "max_iters") detail::read_field(j, k, c.max_iters);
    else if (k == "seen_lr_scale") detail::read_field(j, k, c.seen_lr_scale);
    else if (k == "query_batch_stats") detail::read_field(j, k, c.query_batch_stats);
    else if (k == "pretrain_epochs") detail::read_field(j, k, c.pretrain_epochs);
    else if (k == "pretrain_lr") detail::read_field(j, k, c.pretrain_lr);
    else if (k == "pretrain_momentum") detail::read_field(j, k, c.pretrain_momentum);
    else if (k == "weight_decay") detail::read_field(j, k, c.weight_decay);
    else if (k == "pretrain_batch") detail::read_field(j, k, c.pretrain_batch);
    else if (k == "pretrain_samples_per_class")
      detail::read_field(j, k, c.pretrain_samples_per_class);
    else if (k == "emd_samples_per_class") detail::read_field(j, k, c.emd_samples_per_class);
    else if (k == "profile_samples_per_class")
      detail::read_field(j, k, c.profile_samples_per_class);
    else if (k == "similar_max_shift") detail::read_field(j, k, c.similar_max_shift);
    else if (k == "dissimilar_min_shift") detail::read_field(j, k, c.dissimilar_min_shift);
    else if (k == "threads") detail::read_field(j, k, c.threads);
    else if (k == "out_dir") detail::read_field(j, k, c.out_dir);
    else if (k == "checkpoint") detail::read_field(j, k, c.checkpoint);
    else throw ConfigError("config field '" + k + "': unknown key");
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

inline void save_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream os(path);
  if (!os) throw IoError("config: cannot write " + path.string());
  os << to_json(c).dump(2) << "\n";
  if (!os) throw IoError("config: write failed for " + path.string());
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
  return to_json(a) == to_json(b);
}

}  // namespace prolad::config
