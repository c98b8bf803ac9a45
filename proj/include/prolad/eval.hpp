#pragma once

// Episode-level evaluation: shared episode streams, per-method reports with
// 95% confidence intervals, similar/dissimilar domain grouping, and the
// ablation grids (adapters, training regime, lambda sweep, beta sweep,
// normalization-adapter variants). All grid cells see identical episodes
// under one master seed, so comparisons are paired.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "prolad/config.hpp"
#include "prolad/data.hpp"
#include "prolad/errors.hpp"
#include "prolad/nn.hpp"
#include "prolad/pipeline.hpp"
#include "prolad/rng.hpp"
#include "prolad/serialize.hpp"
#include "prolad/similarity.hpp"

namespace prolad::eval {

namespace tags {
inline constexpr std::uint64_t kEvalStream = 15;   // episode seeds for evaluation streams
inline constexpr std::uint64_t kEmdData = 17;      // datasets for the similarity table
inline constexpr std::uint64_t kSourceData = 18;   // pretraining source dataset
inline constexpr std::uint64_t kPretrainInit = 19; // backbone initialization
inline constexpr std::uint64_t kProfileData = 20;  // datasets for statistics profiling
}

inline constexpr const char* kEvalCsvHeader = "episode,domain_id,shift,seed,way,accuracy,lambda";
inline constexpr const char* kGridCsvHeader = "label,method,mean,ci95,count";

// ---------- report types ----------

struct EpisodeRecord {
  std::size_t index = 0;  // position in the evaluation stream
  int domain_id = 0;
  double shift = 0.0;
  std::uint64_t episode_seed = 0;
  std::size_t way = 0;
  double accuracy = 0.0;
  pipeline::LambdaInfo lambda;
};

struct GroupStats {
  std::size_t count = 0;
  double mean = 0.0;
  double ci95 = 0.0;
};

struct EvalReport {
  std::string method;  // canonical method tag
  std::string label;   // grid-cell label; equals the method tag for plain runs
  std::uint64_t seed = 0;
  std::vector<EpisodeRecord> episodes;
  double mean = 0.0;
  double ci95 = 0.0;  // half-width: 1.96 * sd / sqrt(N)
  GroupStats similar, dissimilar;
  ordered_json config;  // resolved configuration, embedded for replayability
};

// Mean and 95% CI half-width over a sample (sd with the N-1 denominator;
// fewer than two values give a zero interval).
inline GroupStats summarize(const std::vector<double>& values) {
  GroupStats g;
  g.count = values.size();
  if (values.empty()) return g;
  double sum = 0.0;
  for (double v : values) sum += v;
  g.mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return g;
  double ss = 0.0;
  for (double v : values) ss += (v - g.mean) * (v - g.mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  g.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
  return g;
}

// ---------- fixtures ----------

// Loads the stage-1 checkpoint into a backbone built from the configuration
// and freezes it. A missing checkpoint is a configuration error.
inline nn::Backbone load_pretrained_backbone(const config::RunConfig& cfg) {
  const std::filesystem::path dir = cfg.checkpoint_dir();
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw ConfigError("eval: no pretrained checkpoint at " + dir.string() +
                      " (run the pretrain command first)");
  }
  const Checkpoint ck = load_checkpoint(dir);
  Rng rng(derive_seed(cfg.seed, 16));  // placeholder init, fully overwritten
  nn::Backbone net(cfg.backbone_config(), rng);
  net.load_state(ck.tensors);
  net.set_requires_grad(false);
  return net;
}

// The deterministic evaluation stream: episodes ordered by (domain index,
// episode index), with seeds derived from the master seed alone — every grid
// cell under the same configuration sees identical episodes.
inline std::vector<data::Episode> episode_stream(const config::RunConfig& cfg) {
  const std::uint64_t root = derive_seed(cfg.seed, tags::kEvalStream);
  const std::vector<long> novel = cfg.novel_classes();
  const data::EpisodeConfig ec = cfg.episode_config();
  std::vector<data::Episode> out;
  out.reserve(cfg.domains.size() * cfg.episodes_per_domain);
  for (std::size_t di = 0; di < cfg.domains.size(); ++di) {
    const data::DomainSpec d =
        data::DomainSpec::from_shift(static_cast<int>(di), cfg.domains[di],
                                     cfg.generator_config());
    for (std::size_t j = 0; j < cfg.episodes_per_domain; ++j) {
      out.push_back(data::sample_episode(d, novel, ec,
                                         derive_seed(root, di, j)));
    }
  }
  return out;
}

// ---------- core evaluation ----------

// Runs one method over a fixed episode stream. Episode-parallel when
// threads > 1; results are written by stream index, so the report is
// independent of scheduling.
inline EvalReport evaluate_method(nn::Backbone& net, const std::vector<data::Episode>& episodes,
                                  const config::RunConfig& cfg, const std::string& method,
                                  const std::string& label = {}) {
  const pipeline::MethodPlan plan = pipeline::parse_method(method);
  const pipeline::FinetuneConfig fcfg = cfg.finetune_config();
  net.set_requires_grad(false);  // frozen before any parallel section

  std::vector<EpisodeRecord> records(episodes.size());
  const std::size_t workers =
      std::min<std::size_t>(std::max<std::size_t>(cfg.threads, 1), std::max<std::size_t>(episodes.size(), 1));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= episodes.size()) return;
      try {
        const data::Episode& ep = episodes[i];
        const pipeline::EpisodeOutcome out = pipeline::run_episode(net, ep, plan, fcfg);
        EpisodeRecord& r = records[i];
        r.index = i;
        r.domain_id = ep.domain_id;
        r.shift = ep.shift;
        r.episode_seed = ep.seed;
        r.way = ep.way;
        r.accuracy = out.query_acc;
        r.lambda = out.lambda;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  EvalReport report;
  report.method = method;
  report.label = label.empty() ? method : label;
  report.seed = cfg.seed;
  report.episodes = std::move(records);
  report.config = config::to_json(cfg);

  std::vector<double> all, sim, dis;
  for (const EpisodeRecord& r : report.episodes) {
    all.push_back(r.accuracy);
    if (r.shift <= cfg.similar_max_shift) sim.push_back(r.accuracy);
    if (r.shift >= cfg.dissimilar_min_shift) dis.push_back(r.accuracy);
  }
  const GroupStats overall = summarize(all);
  report.mean = overall.mean;
  report.ci95 = overall.ci95;
  report.similar = summarize(sim);
  report.dissimilar = summarize(dis);
  return report;
}

// ---------- persistence ----------

namespace detail {

inline std::string sanitize_label(const std::string& label) {
  std::string s = label;
  for (char& c : s) {
    if (c == ':' || c == '/' || c == '\\') c = '_';
  }
  return s;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("report: cannot open " + path.string());
  os << text;
  if (!os) throw IoError("report: write failed for " + path.string());
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline ordered_json report_to_json(const EvalReport& r) {
  ordered_json j;
  j["method"] = r.method;
  j["label"] = r.label;
  j["seed"] = r.seed;
  j["count"] = r.episodes.size();
  j["mean"] = r.mean;
  j["ci95"] = r.ci95;
  const auto group = [](const GroupStats& g) {
    ordered_json o;
    o["count"] = g.count;
    o["mean"] = g.mean;
    o["ci95"] = g.ci95;
    return o;
  };
  j["similar"] = group(r.similar);
  j["dissimilar"] = group(r.dissimilar);
  j["episodes"] = ordered_json::array();
  for (const EpisodeRecord& e : r.episodes) {
    ordered_json o;
    o["episode"] = e.index;
    o["domain_id"] = e.domain_id;
    o["shift"] = e.shift;
    o["seed"] = e.episode_seed;
    o["way"] = e.way;
    o["accuracy"] = e.accuracy;
    o["lambda"] = e.lambda.lambda;
    o["lambda_adaptive"] = e.lambda.adaptive;
    if (e.lambda.has_sim_inputs) o["abs_diff"] = e.lambda.abs_diff;
    if (e.lambda.has_loss_inputs) {
      o["support_loss"] = e.lambda.support_loss;
      o["support_acc"] = e.lambda.support_acc;
    }
    j["episodes"].push_back(std::move(o));
  }
  j["config"] = r.config;
  return j;
}

inline std::string episodes_csv(const EvalReport& r) {
  std::string out = kEvalCsvHeader;
  out += "\n";
  for (const EpisodeRecord& e : r.episodes) {
    out += std::to_string(e.index) + "," + std::to_string(e.domain_id) + "," +
           detail::fmt(e.shift) + "," + std::to_string(e.episode_seed) + "," +
           std::to_string(e.way) + "," + detail::fmt(e.accuracy) + "," +
           detail::fmt(e.lambda.lambda) + "\n";
  }
  return out;
}

// Writes <dir>/report.json and <dir>/episodes.csv.
inline void write_report(const std::filesystem::path& dir, const EvalReport& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("report: cannot create " + dir.string() + ": " + ec.message());
  detail::write_text(dir / "report.json", report_to_json(r).dump(2) + "\n");
  detail::write_text(dir / "episodes.csv", episodes_csv(r));
}

// ---------- entry points ----------

// Evaluates the configured method over the evaluation stream; writes the
// report under <out_dir>/reports/<method> when an output directory is set.
inline EvalReport run_eval(const config::RunConfig& cfg) {
  cfg.validate();
  nn::Backbone net = load_pretrained_backbone(cfg);
  const std::vector<data::Episode> episodes = episode_stream(cfg);
  EvalReport report = evaluate_method(net, episodes, cfg, cfg.method);
  if (!cfg.out_dir.empty()) {
    write_report(std::filesystem::path(cfg.out_dir) / "reports" /
                     detail::sanitize_label(report.label),
                 report);
  }
  return report;
}

struct GridCell {
  std::string label;
  std::string method;
  double beta = -1.0;  // >= 0 overrides the configured scaling factor
};

// The published grids. "adapters" and "training" reproduce the ablation
// tables' rows; "lambda_sweep" fixes the coefficient at 0.0..1.0 in steps of
// 0.1; "beta_sweep" scans the scaling factor over 0.5..2.5; "variants" covers
// all six normalization-adapter designs.
inline std::vector<GridCell> grid_cells(const std::string& kind, const config::RunConfig& cfg) {
  std::vector<GridCell> cells;
  if (kind == "adapters") {
    cells = {{"TA", "ta"}, {"TAN", "tan"}, {"TAN+TA", "scratch"}, {"ProLAD-sim", "prolad-sim"}};
  } else if (kind == "training") {
    cells = {{"S", "scratch"}, {"P", "p"}, {"D+A", "d+a"}, {"P+D+A", "prolad-sim"}};
  } else if (kind == "lambda_sweep") {
    for (int i = 0; i <= 10; ++i) {
      char val[8];
      std::snprintf(val, sizeof(val), "%.1f", 0.1 * i);
      cells.push_back({std::string("lambda=") + val, std::string("fixed-lambda:") + val});
    }
  } else if (kind == "beta_sweep") {
    const pipeline::MethodPlan plan = pipeline::parse_method(cfg.method);
    if (plan.distill != pipeline::MethodPlan::Distill::Sim &&
        plan.distill != pipeline::MethodPlan::Distill::Loss) {
      throw ConfigError("beta_sweep: method '" + cfg.method +
                        "' has no adaptive coefficient to scale");
    }
    for (double b : {0.5, 1.0, 1.5, 2.0, 2.5}) {
      char lbl[16];
      std::snprintf(lbl, sizeof(lbl), "beta=%.1f", b);
      cells.push_back({lbl, cfg.method, b});
    }
  } else if (kind == "variants") {
    for (const char* name :
         {"film", "conv1x1", "groupconv", "sn+film", "sn+conv1x1", "sn+groupconv"}) {
      cells.push_back({name, std::string("variant:") + name});
    }
  } else {
    throw ConfigError("ablation grid: unknown kind '" + kind + "'");
  }
  return cells;
}

// Runs every cell of the grid over one shared episode stream (paired
// comparison). Reports land under <out_dir>/ablate-<kind>/<label>, plus a
// summary CSV across cells.
inline std::vector<EvalReport> run_ablation_grid(const std::string& kind,
                                                 const config::RunConfig& cfg) {
  cfg.validate();
  const std::vector<GridCell> cells = grid_cells(kind, cfg);
  nn::Backbone net = load_pretrained_backbone(cfg);
  const std::vector<data::Episode> episodes = episode_stream(cfg);

  std::vector<EvalReport> reports;
  reports.reserve(cells.size());
  for (const GridCell& cell : cells) {
    config::RunConfig cell_cfg = cfg;
    cell_cfg.method = cell.method;
    if (cell.beta >= 0.0) cell_cfg.beta = cell.beta;
    reports.push_back(evaluate_method(net, episodes, cell_cfg, cell.method, cell.label));
  }

  if (!cfg.out_dir.empty()) {
    const std::filesystem::path base = std::filesystem::path(cfg.out_dir) / ("ablate-" + kind);
    std::string summary = kGridCsvHeader;
    summary += "\n";
    for (const EvalReport& r : reports) {
      write_report(base / detail::sanitize_label(r.label), r);
      summary += r.label + "," + r.method + "," + detail::fmt(r.mean) + "," +
                 detail::fmt(r.ci95) + "," + std::to_string(r.episodes.size()) + "\n";
    }
    std::error_code ec;
    std::filesystem::create_directories(base, ec);
    if (ec) throw IoError("report: cannot create " + base.string() + ": " + ec.message());
    detail::write_text(base / "summary.csv", summary);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Domain-similarity table: pairwise EMD between class-prototype sets drawn
// from each domain, embedded by the frozen pretrained extractor.
// ---------------------------------------------------------------------------

namespace detail {

// Batched inference embeddings for a full dataset, [N, feature_dim].
inline Tensor embed_dataset(nn::Backbone& net, const Tensor& images) {
  NoGrad guard;
  const std::size_t n = images.size(0);
  const std::size_t batch = 128;
  Tensor out;
  std::size_t dim = 0;
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(lo + batch, n);
    std::vector<std::size_t> idx(hi - lo);
    for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = lo + r;
    const Tensor emb = net.features(pipeline::detail::gather_rows(images, idx),
                                    nn::BnMode::Inference);
    if (!out.defined()) {
      dim = emb.size(1);
      out = Tensor::zeros({n, dim});
    }
    std::copy(emb.data().begin(), emb.data().end(), out.data().begin() + lo * dim);
  }
  return out;
}

// Mean embedding per class; row order follows ds.classes.
inline Tensor class_prototypes(nn::Backbone& net, const data::Dataset& ds) {
  const Tensor emb = embed_dataset(net, ds.images);
  std::vector<long> dense(ds.labels.size());
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const auto it = std::find(ds.classes.begin(), ds.classes.end(), ds.labels[i]);
    dense[i] = static_cast<long>(it - ds.classes.begin());
  }
  NoGrad guard;
  return ops::row_group_mean(emb, dense, ds.classes.size());
}

}  // namespace detail

struct SimilarityTable {
  std::vector<double> shifts;                   // one entry per domain, grid order
  std::vector<std::vector<double>> emd;         // pairwise distances, zero diagonal
  std::vector<std::vector<double>> similarity;  // exp(-gamma * emd), unit diagonal
};

inline SimilarityTable domain_similarity_table(nn::Backbone& net, const config::RunConfig& cfg) {
  cfg.validate();
  const std::size_t nd = cfg.domains.size();
  std::vector<long> all_classes(cfg.num_classes);
  for (std::size_t k = 0; k < all_classes.size(); ++k) all_classes[k] = static_cast<long>(k);
  const std::uint64_t seed = derive_seed(cfg.seed, tags::kEmdData);

  std::vector<Tensor> protos(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const data::DomainSpec spec =
        data::DomainSpec::from_shift(static_cast<int>(i), cfg.domains[i], cfg.generator_config());
    const data::Dataset ds =
        data::generate_dataset(spec, all_classes, cfg.emd_samples_per_class, seed);
    protos[i] = detail::class_prototypes(net, ds);
  }

  SimilarityTable t;
  t.shifts = cfg.domains;
  t.emd.assign(nd, std::vector<double>(nd, 0.0));
  t.similarity.assign(nd, std::vector<double>(nd, 1.0));
  for (std::size_t i = 0; i < nd; ++i) {
    for (std::size_t j = i + 1; j < nd; ++j) {
      const double d = similarity::solve_emd(
          similarity::TransportProblem::between(protos[i], protos[j])).emd;
      t.emd[i][j] = t.emd[j][i] = d;
      t.similarity[i][j] = t.similarity[j][i] = similarity::domain_similarity(d, cfg.gamma);
    }
  }
  return t;
}

// Square matrix CSV: header "shift,<s0>,<s1>,..."; one row per domain.
inline std::string matrix_csv(const std::vector<double>& shifts,
                              const std::vector<std::vector<double>>& m) {
  std::string out = "shift";
  for (double s : shifts) out += "," + detail::fmt(s);
  out += "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    out += detail::fmt(shifts[i]);
    for (double v : m[i]) out += "," + detail::fmt(v);
    out += "\n";
  }
  return out;
}

inline void write_similarity_table(const std::filesystem::path& dir, const SimilarityTable& t,
                                   const config::RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("report: cannot create " + dir.string() + ": " + ec.message());
  detail::write_text(dir / "similarity.csv", matrix_csv(t.shifts, t.similarity));
  detail::write_text(dir / "emd.csv", matrix_csv(t.shifts, t.emd));
  ordered_json j;
  j["command"] = "emd";
  j["seed"] = cfg.seed;
  j["shifts"] = t.shifts;
  j["emd"] = t.emd;
  j["similarity"] = t.similarity;
  j["config"] = config::to_json(cfg);
  detail::write_text(dir / "report.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Coefficient traces: both adaptive coefficients evaluated on the evaluation
// episode stream, written in the profiler's trace schemas.
// ---------------------------------------------------------------------------

struct CoeffTraces {
  std::vector<data::Episode> episodes;          // the stream the traces cover
  std::vector<pipeline::LambdaInfo> sim;        // similarity-based coefficient
  std::vector<pipeline::LambdaInfo> loss;       // loss-based coefficient
};

inline CoeffTraces coeff_traces(nn::Backbone& net, const std::vector<data::Episode>& episodes,
                                const config::RunConfig& cfg) {
  const pipeline::FinetuneConfig fcfg = cfg.finetune_config();
  const pipeline::MethodPlan sim_plan = pipeline::parse_method("prolad-sim");
  const pipeline::MethodPlan loss_plan = pipeline::parse_method("prolad-loss");
  CoeffTraces t;
  t.episodes = episodes;
  t.sim.reserve(episodes.size());
  t.loss.reserve(episodes.size());
  for (const data::Episode& ep : episodes) {
    t.sim.push_back(pipeline::compute_lambda(net, ep, sim_plan, fcfg));
    t.loss.push_back(pipeline::compute_lambda(net, ep, loss_plan, fcfg));
  }
  return t;
}

inline std::string sim_trace_csv(const CoeffTraces& t) {
  std::string out = similarity::kSimTraceCsvHeader;
  out += "\n";
  for (std::size_t i = 0; i < t.sim.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(t.episodes[i].domain_id) + "," +
           detail::fmt(t.sim[i].lambda) + "," + detail::fmt(t.sim[i].abs_diff) + "\n";
  }
  return out;
}

inline std::string loss_trace_csv(const CoeffTraces& t) {
  std::string out = similarity::kLossTraceCsvHeader;
  out += "\n";
  for (std::size_t i = 0; i < t.loss.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(t.episodes[i].domain_id) + "," +
           detail::fmt(t.loss[i].lambda) + "," + detail::fmt(t.loss[i].support_loss) + "," +
           detail::fmt(t.loss[i].support_acc) + "\n";
  }
  return out;
}

inline void write_coeff_traces(const std::filesystem::path& dir, const CoeffTraces& t,
                               const config::RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("report: cannot create " + dir.string() + ": " + ec.message());
  detail::write_text(dir / "sim_trace.csv", sim_trace_csv(t));
  detail::write_text(dir / "loss_trace.csv", loss_trace_csv(t));
  ordered_json j;
  j["command"] = "coeff";
  j["seed"] = cfg.seed;
  j["count"] = t.episodes.size();
  ordered_json rows = ordered_json::array();
  for (std::size_t i = 0; i < t.episodes.size(); ++i) {
    ordered_json r;
    r["episode"] = i;
    r["domain_id"] = t.episodes[i].domain_id;
    r["shift"] = t.episodes[i].shift;
    r["lambda_sim"] = t.sim[i].lambda;
    r["abs_diff"] = t.sim[i].abs_diff;
    r["lambda_loss"] = t.loss[i].lambda;
    r["support_loss"] = t.loss[i].support_loss;
    r["support_acc"] = t.loss[i].support_acc;
    rows.push_back(std::move(r));
  }
  j["episodes"] = std::move(rows);
  j["config"] = config::to_json(cfg);
  detail::write_text(dir / "report.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Per-domain normalization-statistics profiles plus KDE curves over the
// pooled channel means (one profile and one curve file per domain).
// ---------------------------------------------------------------------------

inline std::vector<similarity::BnProfile> write_domain_profiles(nn::Backbone& net,
                                                                const config::RunConfig& cfg,
                                                                const std::filesystem::path& dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("report: cannot create " + dir.string() + ": " + ec.message());

  std::vector<long> all_classes(cfg.num_classes);
  for (std::size_t k = 0; k < all_classes.size(); ++k) all_classes[k] = static_cast<long>(k);
  const std::uint64_t seed = derive_seed(cfg.seed, tags::kProfileData);

  std::vector<similarity::BnProfile> profiles;
  ordered_json files = ordered_json::array();
  for (std::size_t i = 0; i < cfg.domains.size(); ++i) {
    const data::DomainSpec spec =
        data::DomainSpec::from_shift(static_cast<int>(i), cfg.domains[i], cfg.generator_config());
    const data::Dataset ds =
        data::generate_dataset(spec, all_classes, cfg.profile_samples_per_class, seed);
    const similarity::BnProfile prof = similarity::profile_batch_stats(net, ds.images);
    const std::string stem = "domain_" + std::to_string(i);
    similarity::write_profile_csv(dir / (stem + ".csv"), prof);
    similarity::write_kde_csv(dir / (stem + "_kde.csv"),
                              similarity::gaussian_kde(prof.pooled_means()));
    ordered_json f;
    f["domain_id"] = i;
    f["shift"] = cfg.domains[i];
    f["profile"] = stem + ".csv";
    f["kde"] = stem + "_kde.csv";
    files.push_back(std::move(f));
    profiles.push_back(prof);
  }

  ordered_json j;
  j["command"] = "profile-stats";
  j["seed"] = cfg.seed;
  j["domains"] = std::move(files);
  j["config"] = config::to_json(cfg);
  detail::write_text(dir / "report.json", j.dump(2) + "\n");
  return profiles;
}

}  // namespace prolad::eval
