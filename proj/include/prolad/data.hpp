#pragma once

// Synthetic multi-domain episodic data.
//
// Classes are sinusoidal gratings parameterized by orientation, spatial
// frequency, and phase, spread over their ranges by low-discrepancy
// (irrational-multiplier) sequences. A domain is a point on a shift knob
// s in [0,1] applied per channel:
//
//     x_c = a_c(s) * u + b_c(s) + noise,   a_c = 1 + s*(kappa_c - 1),
//                                          b_c = s * delta_c,
//
// where u is the grating with its per-sample mean pinned exactly to 0.5, so
// the per-channel dataset mean is exactly 0.5 + s*(0.5*(kappa_c-1) + delta_c)
// up to noise. Above an inversion threshold the grating flips u -> 1-u, a
// mean-preserving structural shift. s=0 reproduces source statistics exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prolad/errors.hpp"
#include "prolad/rng.hpp"
#include "prolad/serialize.hpp"
#include "prolad/tensor.hpp"

namespace prolad::data {

namespace tags {
inline constexpr std::uint64_t kDataset = 11;
inline constexpr std::uint64_t kEpisode = 12;
}  // namespace tags

struct GeneratorConfig {
  std::size_t height = 16, width = 16, channels = 3;
  std::size_t num_classes = 20;
  std::size_t num_pretrain_classes = 8;
  double noise_std = 0.35;
  double phase_jitter = 1.6;        // radians, per-sample
  double orientation_jitter = 0.2;  // radians, per-sample: intra-class spread
                                    // on the discriminative cue itself
  double exposure_jitter = 0.25;    // per-sample scene illumination offset,
                                    // applied before the sensor map so gain
                                    // and saturation modulate how much of it
                                    // survives in shifted domains
  // Per-sample low-frequency background grating (random orientation, frequency
  // and phase), class-independent. Unlike white pixel noise, which the conv
  // stack averages away, structured clutter survives into the embedding and is
  // what makes single samples look less alike than class prototypes.
  double clutter = 0.35;
  double clutter_freq_min = 0.5, clutter_freq_max = 1.5;
  // Per-channel shift parameters at s=1 (delta: additive, kappa: scale);
  // chosen so each channel partially saturates at full shift.
  std::array<double, 3> channel_offset = {0.55, -0.15, 0.3};
  std::array<double, 3> channel_scale = {2.0, 0.35, 1.6};
  double invert_threshold = 0.7;  // structural flip for s strictly above

  void validate() const {
    if (height < 2 || width < 2) throw ConfigError("generator: images must be at least 2x2");
    if (channels != 3) throw ConfigError("generator: expected 3 channels");
    if (num_pretrain_classes >= num_classes) {
      throw ConfigError("generator: pretrain classes must leave novel classes");
    }
    if (noise_std < 0.0) throw ConfigError("generator: noise_std must be nonnegative");
    if (orientation_jitter < 0.0) {
      throw ConfigError("generator: orientation_jitter must be nonnegative");
    }
    if (exposure_jitter < 0.0) {
      throw ConfigError("generator: exposure_jitter must be nonnegative");
    }
  }

  std::vector<long> pretrain_classes() const {
    std::vector<long> out;
    for (std::size_t k = 0; k < num_pretrain_classes; ++k) out.push_back(static_cast<long>(k));
    return out;
  }
  std::vector<long> novel_classes() const {
    std::vector<long> out;
    for (std::size_t k = num_pretrain_classes; k < num_classes; ++k) {
      out.push_back(static_cast<long>(k));
    }
    return out;
  }
};

struct ClassTemplate {
  double orientation;  // [0, pi)
  double frequency;    // cycles per image
  double phase;        // [0, 2*pi)
};

// Low-discrepancy spread: golden ratio for orientation, sqrt(2) for frequency
// (deliberately unrelated to the golden ratio so orientation-close class
// pairs stay frequency-separated), plastic number for phase.
inline ClassTemplate class_template(std::size_t class_id) {
  const double k = static_cast<double>(class_id + 1);
  auto frac = [](double v) { return v - std::floor(v); };
  ClassTemplate t;
  t.orientation = 3.14159265358979323846 * frac(k * 0.61803398874989484820);
  t.frequency = 2.0 + 1.5 * frac(k * 0.41421356237309514547);
  t.phase = 2.0 * 3.14159265358979323846 * frac(k * 0.75487766624669276005);
  return t;
}

struct DomainSpec {
  int domain_id = 0;
  double shift = 0.0;
  bool invert = false;
  GeneratorConfig gen;

  static DomainSpec from_shift(int domain_id, double s, GeneratorConfig g = {}) {
    g.validate();
    if (!(s >= 0.0 && s <= 1.0)) {
      throw ConfigError("domain shift must lie in [0,1], got " + std::to_string(s));
    }
    DomainSpec d;
    d.domain_id = domain_id;
    d.shift = s;
    d.invert = s > g.invert_threshold;
    d.gen = g;
    return d;
  }

  double channel_gain(std::size_t c) const { return 1.0 + shift * (gen.channel_scale[c] - 1.0); }
  double channel_bias(std::size_t c) const { return shift * gen.channel_offset[c]; }
  // Per-channel mean of the affine map before sensor clipping: 0.5 maps
  // through gain/bias (the flip preserves the grating mean of 0.5 exactly).
  // Clipping pulls the realized mean back toward the [0,1] range, so this is
  // the drift direction, not the exact dataset mean.
  double expected_mean(std::size_t c) const { return 0.5 * channel_gain(c) + channel_bias(c); }
};

namespace detail {

// Renders one sample into out[C*H*W]. Draw order (phase, then orientation,
// then exposure, then per-channel row-major pixel noise) is part of the
// determinism contract.
inline void render_sample(const DomainSpec& d, std::size_t class_id, Rng& rng, double* out) {
  const GeneratorConfig& g = d.gen;
  const ClassTemplate t = class_template(class_id);
  const double phase = t.phase + rng.uniform(-g.phase_jitter, g.phase_jitter);
  const double orientation =
      t.orientation + rng.uniform(-g.orientation_jitter, g.orientation_jitter);
  const double exposure =
      g.exposure_jitter > 0.0 ? rng.uniform(-g.exposure_jitter, g.exposure_jitter) : 0.0;
  const double cx = std::cos(orientation), sx = std::sin(orientation);
  const std::size_t H = g.height, W = g.width, HW = H * W;
  std::vector<double> u(HW);
  double mean = 0.0;
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double x = static_cast<double>(i) / static_cast<double>(H);
      const double y = static_cast<double>(j) / static_cast<double>(W);
      const double v =
          0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * t.frequency * (x * cx + y * sx) +
                               phase);
      u[i * W + j] = v;
      mean += v;
    }
  }
  mean /= static_cast<double>(HW);
  for (double& v : u) v += 0.5 - mean;  // pin the sample mean to exactly 0.5
  if (d.invert) {
    for (double& v : u) v = 1.0 - v;  // structural flip; mean stays 0.5
  }
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double a = d.channel_gain(c), b = d.channel_bias(c);
    for (std::size_t i = 0; i < HW; ++i) {
      const double v =
          a * (u[i] + exposure) + b + (g.noise_std > 0.0 ? rng.normal(0.0, g.noise_std) : 0.0);
      // Physical sensor range. Saturation is the lossy part of the shift: a
      // strongly gained/offset channel clips, which no input-linear map can
      // undo, so high-shift domains genuinely destroy information.
      out[c * HW + i] = std::min(1.0, std::max(0.0, v));
    }
  }
}

}  // namespace detail

inline Tensor generate_images(const DomainSpec& d, const std::vector<long>& class_ids, Rng& rng) {
  const GeneratorConfig& g = d.gen;
  const std::size_t chw = g.channels * g.height * g.width;
  Tensor out = Tensor::zeros({class_ids.size(), g.channels, g.height, g.width});
  for (std::size_t n = 0; n < class_ids.size(); ++n) {
    if (class_ids[n] < 0 || static_cast<std::size_t>(class_ids[n]) >= g.num_classes) {
      throw InputError("generate_images: class id " + std::to_string(class_ids[n]) +
                       " outside [0," + std::to_string(g.num_classes) + ")");
    }
    detail::render_sample(d, static_cast<std::size_t>(class_ids[n]), rng,
                          out.data().data() + n * chw);
  }
  return out;
}

struct Dataset {
  Tensor images;             // [N, C, H, W]
  std::vector<long> labels;  // global class ids, size N
  std::vector<long> classes; // distinct classes, generation order
  int domain_id = 0;
  double shift = 0.0;
};

inline Dataset generate_dataset(const DomainSpec& d, const std::vector<long>& classes,
                                std::size_t samples_per_class, std::uint64_t seed) {
  if (classes.empty() || samples_per_class == 0) {
    throw ConfigError("generate_dataset: need at least one class and one sample per class");
  }
  Rng rng(derive_seed(seed, tags::kDataset, static_cast<std::uint64_t>(d.domain_id)));
  std::vector<long> ids;
  for (long k : classes) {
    for (std::size_t i = 0; i < samples_per_class; ++i) ids.push_back(k);
  }
  Dataset ds;
  ds.images = generate_images(d, ids, rng);
  ds.labels = std::move(ids);
  ds.classes = classes;
  ds.domain_id = d.domain_id;
  ds.shift = d.shift;
  return ds;
}

struct EpisodeConfig {
  std::size_t way_min = 5, way_max = 10;
  std::size_t shot_min = 1, shot_max = 10;
  std::size_t query_per_class = 10;

  void validate() const {
    if (way_min == 0 || way_min > way_max) throw ConfigError("episode: bad way range");
    if (shot_min == 0 || shot_min > shot_max) throw ConfigError("episode: bad shot range");
    if (query_per_class == 0) throw ConfigError("episode: query_per_class must be positive");
  }
};

struct Episode {
  Tensor support_images;
  std::vector<long> support_labels;  // local labels in [0, way)
  Tensor query_images;
  std::vector<long> query_labels;  // local labels in [0, way)
  std::size_t way = 0;
  std::vector<std::size_t> shots;  // per local class
  std::vector<long> class_ids;     // global ids, index = local label
  int domain_id = 0;
  double shift = 0.0;
  std::uint64_t seed = 0;
};

// Samples one episode: way uniform over the configured range (capped by the
// available classes), classes without replacement, per-class shots uniform,
// then support and query batches from one seeded stream.
inline Episode sample_episode(const DomainSpec& d, const std::vector<long>& novel_classes,
                              const EpisodeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (novel_classes.size() < cfg.way_min) {
    throw ConfigError("sample_episode: " + std::to_string(novel_classes.size()) +
                      " classes cannot support " + std::to_string(cfg.way_min) + "-way episodes");
  }
  Rng rng(derive_seed(seed, tags::kEpisode, static_cast<std::uint64_t>(d.domain_id)));
  const std::size_t way_cap = std::min(cfg.way_max, novel_classes.size());
  const std::size_t way =
      static_cast<std::size_t>(rng.uniform_int(static_cast<long>(cfg.way_min),
                                               static_cast<long>(way_cap)));
  std::vector<long> pool = novel_classes;
  rng.shuffle(pool);
  pool.resize(way);

  Episode ep;
  ep.way = way;
  ep.class_ids = pool;
  ep.domain_id = d.domain_id;
  ep.shift = d.shift;
  ep.seed = seed;

  std::vector<long> support_ids, query_ids;
  for (std::size_t k = 0; k < way; ++k) {
    const std::size_t shots = static_cast<std::size_t>(
        rng.uniform_int(static_cast<long>(cfg.shot_min), static_cast<long>(cfg.shot_max)));
    ep.shots.push_back(shots);
    for (std::size_t i = 0; i < shots; ++i) {
      support_ids.push_back(pool[k]);
      ep.support_labels.push_back(static_cast<long>(k));
    }
  }
  for (std::size_t k = 0; k < way; ++k) {
    for (std::size_t i = 0; i < cfg.query_per_class; ++i) {
      query_ids.push_back(pool[k]);
      ep.query_labels.push_back(static_cast<long>(k));
    }
  }
  ep.support_images = generate_images(d, support_ids, rng);
  ep.query_images = generate_images(d, query_ids, rng);
  return ep;
}

// ---- dataset cache ----

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_tensor(dir / "images.plad", ds.images);
  nlohmann::ordered_json index;
  index["domain_id"] = ds.domain_id;
  index["shift"] = ds.shift;
  index["classes"] = ds.classes;
  index["labels"] = ds.labels;
  index["count"] = ds.labels.size();
  std::ofstream os(dir / "index.json");
  os << index.dump(2) << "\n";
  if (!os) throw IoError("save_dataset: cannot write " + (dir / "index.json").string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "index.json");
  if (!is) throw IoError("load_dataset: cannot open " + (dir / "index.json").string());
  nlohmann::ordered_json index;
  try {
    is >> index;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_dataset: bad index: " + std::string(e.what()));
  }
  Dataset ds;
  ds.images = read_tensor(dir / "images.plad");
  ds.domain_id = index.at("domain_id").get<int>();
  ds.shift = index.at("shift").get<double>();
  ds.classes = index.at("classes").get<std::vector<long>>();
  ds.labels = index.at("labels").get<std::vector<long>>();
  if (ds.images.size(0) != ds.labels.size()) {
    throw IoError("load_dataset: image count and label count disagree");
  }
  return ds;
}

}  // namespace prolad::data
