#include "prolad/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "prolad/config.hpp"
#include "prolad/data.hpp"
#include "prolad/errors.hpp"
#include "prolad/pipeline.hpp"
#include "prolad/rng.hpp"

namespace fs = std::filesystem;
using namespace prolad;
namespace cf = prolad::config;
namespace ev = prolad::eval;

namespace {

// A configuration small enough for unit-test budgets.
cf::RunConfig small_config() {
  cf::RunConfig c;
  c.seed = 7;
  c.widths = {8, 16};
  c.strides = {1, 2};
  c.image_size = 16;
  c.domains = {0.0, 1.0};
  c.episodes_per_domain = 3;
  c.way_min = c.way_max = 2;
  c.shot_min = c.shot_max = 2;
  c.query_per_class = 3;
  c.max_iters = 25;
  c.extra_iters = 5;
  c.pretrain_epochs = 2;
  c.pretrain_batch = 16;
  c.pretrain_samples_per_class = 6;
  return c;
}

// Pretrains once per process into a shared directory.
const fs::path& shared_checkpoint() {
  static const fs::path dir = [] {
    const fs::path d = fs::path{::testing::TempDir()} / "prolad_eval_ckpt";
    fs::remove_all(d);
    cf::RunConfig c = small_config();
    Rng rng(derive_seed(c.seed, 880));
    nn::Backbone net(c.backbone_config(), rng);
    const data::Dataset source =
        data::generate_dataset(data::DomainSpec::from_shift(0, 0.0, c.generator_config()),
                               c.source_classes(), c.pretrain_samples_per_class,
                               derive_seed(c.seed, 881));
    Rng prng(derive_seed(c.seed, 882));
    pipeline::stage1_pretrain(net, source, c.pretrain_config(), prng, d);
    return d;
  }();
  return dir;
}

cf::RunConfig ready_config() {
  cf::RunConfig c = small_config();
  c.checkpoint = shared_checkpoint().string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  EXPECT_TRUE(is.good()) << p;
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

// ---------- configuration ----------

TEST(Config, DefaultsValidateAndPinAppendixValues) {
  const cf::RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_DOUBLE_EQ(c.beta, 1.5);
  EXPECT_DOUBLE_EQ(c.gamma, 0.02);
  EXPECT_DOUBLE_EQ(c.tau, 10.0);
  EXPECT_EQ(c.group_size, 8u);
  EXPECT_DOUBLE_EQ(c.sn_momentum, 0.8);
  EXPECT_DOUBLE_EQ(c.adapter_lr, 0.5);
  EXPECT_DOUBLE_EQ(c.head_lr, 1.0);
  EXPECT_DOUBLE_EQ(c.acc_threshold, 0.99);
  EXPECT_EQ(c.extra_iters, 25u);
  EXPECT_EQ(c.max_iters, 200u);
  EXPECT_DOUBLE_EQ(c.seen_lr_scale, 0.1);
  EXPECT_DOUBLE_EQ(c.pretrain_lr, 0.03);
  EXPECT_DOUBLE_EQ(c.pretrain_momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.weight_decay, 7e-4);
  EXPECT_EQ(c.threads, 1u);
}

TEST(Config, JsonRoundTripIsIdentity) {
  cf::RunConfig c = small_config();
  c.method = "fixed-lambda:0.4";
  c.query_batch_stats = true;
  c.out_dir = "/tmp/somewhere";
  c.checkpoint = "ckpt";
  c.domains = {0.1, 0.35, 0.9};
  c.threads = 4;

  const cf::RunConfig back = cf::from_json(cf::to_json(c));
  EXPECT_TRUE(back == c);

  const fs::path file = fs::path{::testing::TempDir()} / "prolad_cfg_roundtrip.json";
  cf::save_config(file, c);
  const cf::RunConfig loaded = cf::load_config(file);
  EXPECT_TRUE(loaded == c);

  // Partial documents keep defaults for absent keys.
  const cf::RunConfig partial = cf::from_json(ordered_json{{"seed", 99}, {"beta", 2.0}});
  EXPECT_EQ(partial.seed, 99u);
  EXPECT_DOUBLE_EQ(partial.beta, 2.0);
  EXPECT_DOUBLE_EQ(partial.gamma, 0.02);
}

TEST(Config, StrictLoadingNamesTheField) {
  try {
    cf::from_json(ordered_json{{"betaa", 1.0}});
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("betaa"), std::string::npos);
  }
  try {
    cf::from_json(ordered_json{{"beta", "hot"}});
    FAIL() << "type mismatch accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
  EXPECT_THROW(cf::from_json(ordered_json{{"widths", 3}}), ConfigError);
  EXPECT_THROW(cf::from_json(ordered_json::array()), ConfigError);
  EXPECT_THROW(cf::load_config(fs::path{::testing::TempDir()} / "prolad_missing.json"), IoError);

  const fs::path bad = fs::path{::testing::TempDir()} / "prolad_bad.json";
  std::ofstream(bad) << "{not json";
  EXPECT_THROW(cf::load_config(bad), ConfigError);
}

TEST(Config, ValidationRejectsBadRanges) {
  const auto expect_bad = [](void (*mutate)(cf::RunConfig&)) {
    cf::RunConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](cf::RunConfig& c) { c.strides = {1}; });
  expect_bad([](cf::RunConfig& c) { c.way_max = c.num_classes; });  // exceeds novel pool
  expect_bad([](cf::RunConfig& c) { c.domains = {1.2}; });
  expect_bad([](cf::RunConfig& c) { c.domains.clear(); });
  expect_bad([](cf::RunConfig& c) { c.gamma = 0.0; });
  expect_bad([](cf::RunConfig& c) { c.similar_max_shift = 0.7; });  // overlaps dissimilar
  expect_bad([](cf::RunConfig& c) { c.threads = 0; });
  expect_bad([](cf::RunConfig& c) { c.pretrain_classes = c.num_classes; });
  expect_bad([](cf::RunConfig& c) { c.acc_threshold = 0.0; });
}

TEST(Config, ViewsMapOntoModuleConfigs) {
  cf::RunConfig c = small_config();
  c.beta = 2.5;
  c.query_batch_stats = true;

  const nn::BackboneConfig b = c.backbone_config();
  EXPECT_EQ(b.widths, c.widths);
  EXPECT_EQ(b.strides, c.strides);
  EXPECT_EQ(b.in_channels, 3u);

  const data::GeneratorConfig g = c.generator_config();
  EXPECT_EQ(g.height, 16u);
  EXPECT_EQ(g.num_classes, 20u);
  EXPECT_EQ(g.num_pretrain_classes, 8u);

  const data::EpisodeConfig e = c.episode_config();
  EXPECT_EQ(e.way_max, 2u);
  EXPECT_EQ(e.query_per_class, 3u);

  const pipeline::FinetuneConfig f = c.finetune_config();
  EXPECT_DOUBLE_EQ(f.beta, 2.5);
  EXPECT_DOUBLE_EQ(f.adapter_lr, 0.5);
  EXPECT_EQ(f.max_iters, 25u);
  EXPECT_TRUE(f.query_batch_stats);

  const pipeline::PretrainConfig p = c.pretrain_config();
  EXPECT_EQ(p.epochs, 2u);
  EXPECT_DOUBLE_EQ(p.weight_decay, 7e-4);

  EXPECT_EQ(c.novel_classes().front(), 8);
  EXPECT_EQ(c.novel_classes().back(), 19);
  EXPECT_EQ(c.source_classes(), (std::vector<long>{0, 1, 2, 3, 4, 5, 6, 7}));

  EXPECT_EQ(c.checkpoint_dir(), fs::path(c.out_dir) / "pretrain");
  c.checkpoint = "/elsewhere/ckpt";
  EXPECT_EQ(c.checkpoint_dir(), fs::path("/elsewhere/ckpt"));
}

// ---------- summaries ----------

TEST(Summarize, MatchesClosedForm) {
  EXPECT_EQ(ev::summarize({}).count, 0u);
  EXPECT_DOUBLE_EQ(ev::summarize({}).mean, 0.0);

  const ev::GroupStats single = ev::summarize({0.7});
  EXPECT_EQ(single.count, 1u);
  EXPECT_DOUBLE_EQ(single.mean, 0.7);
  EXPECT_DOUBLE_EQ(single.ci95, 0.0);

  const ev::GroupStats twin = ev::summarize({1.0, 1.0});
  EXPECT_DOUBLE_EQ(twin.mean, 1.0);
  EXPECT_DOUBLE_EQ(twin.ci95, 0.0);

  // 100 values engineered so the sample sd is exactly 0.1:
  // ci95 = 1.96 * 0.1 / sqrt(100) = 0.0196.
  std::vector<double> vals;
  const double d = 0.1 * std::sqrt(0.99);
  for (int i = 0; i < 50; ++i) {
    vals.push_back(0.5 - d);
    vals.push_back(0.5 + d);
  }
  const ev::GroupStats hundred = ev::summarize(vals);
  EXPECT_EQ(hundred.count, 100u);
  EXPECT_NEAR(hundred.mean, 0.5, 1e-12);
  EXPECT_NEAR(hundred.ci95, 0.0196, 1e-12);
}

// ---------- fixtures ----------

TEST(Stream, DeterministicPairedEpisodes) {
  const cf::RunConfig c = small_config();
  const std::vector<data::Episode> a = ev::episode_stream(c);
  const std::vector<data::Episode> b = ev::episode_stream(c);

  ASSERT_EQ(a.size(), c.domains.size() * c.episodes_per_domain);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].domain_id, b[i].domain_id);
    EXPECT_EQ(a[i].support_images.data(), b[i].support_images.data());
  }
  // Ordered by domain; shifts match the grid.
  EXPECT_DOUBLE_EQ(a.front().shift, 0.0);
  EXPECT_DOUBLE_EQ(a.back().shift, 1.0);
  EXPECT_EQ(a[0].domain_id, 0);
  EXPECT_EQ(a[c.episodes_per_domain].domain_id, 1);
  // Distinct seeds along the stream.
  EXPECT_NE(a[0].seed, a[1].seed);
  EXPECT_NE(a[0].seed, a[c.episodes_per_domain].seed);

  cf::RunConfig c2 = c;
  c2.seed = 8;
  const std::vector<data::Episode> other = ev::episode_stream(c2);
  EXPECT_NE(other[0].seed, a[0].seed);
}

TEST(Backbone, MissingCheckpointIsConfigError) {
  cf::RunConfig c = small_config();
  c.checkpoint = (fs::path{::testing::TempDir()} / "prolad_nowhere").string();
  EXPECT_THROW(ev::load_pretrained_backbone(c), ConfigError);
  EXPECT_THROW(ev::run_eval(c), ConfigError);
}

TEST(Backbone, LoadsCheckpointBitExactly) {
  const cf::RunConfig c = ready_config();
  nn::Backbone net = ev::load_pretrained_backbone(c);
  const Checkpoint ck = load_checkpoint(shared_checkpoint());
  for (auto& [name, t] : net.state()) {
    ASSERT_TRUE(ck.tensors.count(name)) << name;
    EXPECT_EQ(t.data(), ck.tensors.at(name).data()) << name;
    EXPECT_FALSE(t.requires_grad());
  }
}

// ---------- evaluation ----------

TEST(Eval, ReportContractsAndExactRecompute) {
  cf::RunConfig c = ready_config();
  c.out_dir = (fs::path{::testing::TempDir()} / "prolad_eval_out").string();
  fs::remove_all(c.out_dir);

  const ev::EvalReport r = ev::run_eval(c);
  EXPECT_EQ(r.method, "prolad-sim");
  EXPECT_EQ(r.label, "prolad-sim");
  EXPECT_EQ(r.seed, 7u);
  ASSERT_EQ(r.episodes.size(), 6u);
  EXPECT_GE(r.mean, 0.0);
  EXPECT_LE(r.mean, 1.0);
  EXPECT_GE(r.ci95, 0.0);

  // Grouping: three episodes at shift 0.0 (similar), three at 1.0 (dissimilar).
  EXPECT_EQ(r.similar.count, 3u);
  EXPECT_EQ(r.dissimilar.count, 3u);

  // Report arithmetic is exactly recomputable from the per-episode list.
  std::vector<double> all, sim, dis;
  for (const ev::EpisodeRecord& e : r.episodes) {
    all.push_back(e.accuracy);
    if (e.shift <= c.similar_max_shift) sim.push_back(e.accuracy);
    if (e.shift >= c.dissimilar_min_shift) dis.push_back(e.accuracy);
    EXPECT_TRUE(e.lambda.adaptive);
    EXPECT_GE(e.lambda.lambda, 0.0);
    EXPECT_LE(e.lambda.lambda, 1.0);
  }
  EXPECT_EQ(r.mean, ev::summarize(all).mean);
  EXPECT_EQ(r.ci95, ev::summarize(all).ci95);
  EXPECT_EQ(r.similar.mean, ev::summarize(sim).mean);
  EXPECT_EQ(r.dissimilar.ci95, ev::summarize(dis).ci95);

  // Resolved config and seed are embedded.
  EXPECT_EQ(r.config, cf::to_json(c));

  // Files: JSON summary and per-episode CSV.
  const fs::path dir = fs::path(c.out_dir) / "reports" / "prolad-sim";
  const std::string json_text = slurp(dir / "report.json");
  const ordered_json j = ordered_json::parse(json_text);
  EXPECT_EQ(j.at("count").get<std::size_t>(), 6u);
  EXPECT_DOUBLE_EQ(j.at("mean").get<double>(), r.mean);
  EXPECT_DOUBLE_EQ(j.at("ci95").get<double>(), r.ci95);
  EXPECT_EQ(j.at("episodes").size(), 6u);
  EXPECT_EQ(j.at("config"), r.config);

  const std::string csv = slurp(dir / "episodes.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), ev::kEvalCsvHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);  // header + 6 rows

  // Same seed twice: identical report, byte for byte.
  const ev::EvalReport again = ev::run_eval(c);
  EXPECT_EQ(ev::report_to_json(again).dump(2), ev::report_to_json(r).dump(2));
}

TEST(Eval, ThreadCountDoesNotChangeTheReport) {
  cf::RunConfig c = ready_config();
  const ev::EvalReport serial = ev::run_eval(c);
  cf::RunConfig c2 = c;
  c2.threads = 3;
  const ev::EvalReport parallel = ev::run_eval(c2);
  ASSERT_EQ(serial.episodes.size(), parallel.episodes.size());
  for (std::size_t i = 0; i < serial.episodes.size(); ++i) {
    EXPECT_EQ(serial.episodes[i].accuracy, parallel.episodes[i].accuracy);
    EXPECT_EQ(serial.episodes[i].lambda.lambda, parallel.episodes[i].lambda.lambda);
  }
  EXPECT_EQ(serial.mean, parallel.mean);
}

TEST(Eval, LambdaZeroCellEqualsNoDistillationPipeline) {
  const cf::RunConfig c = ready_config();
  nn::Backbone net = ev::load_pretrained_backbone(c);
  const std::vector<data::Episode> episodes = ev::episode_stream(c);

  const ev::EvalReport fixed0 = ev::evaluate_method(net, episodes, c, "fixed-lambda:0.0");
  const ev::EvalReport p = ev::evaluate_method(net, episodes, c, "p");
  ASSERT_EQ(fixed0.episodes.size(), p.episodes.size());
  for (std::size_t i = 0; i < p.episodes.size(); ++i) {
    EXPECT_EQ(fixed0.episodes[i].accuracy, p.episodes[i].accuracy);
  }
  EXPECT_EQ(fixed0.mean, p.mean);
}

// ---------- ablation grids ----------

TEST(Grid, CellDefinitionsMatchPublishedRows) {
  const cf::RunConfig c = ready_config();

  const std::vector<ev::GridCell> adapters = ev::grid_cells("adapters", c);
  ASSERT_EQ(adapters.size(), 4u);
  EXPECT_EQ(adapters[0].label, "TA");
  EXPECT_EQ(adapters[2].label, "TAN+TA");
  EXPECT_EQ(adapters[2].method, "scratch");
  EXPECT_EQ(adapters[3].method, "prolad-sim");

  const std::vector<ev::GridCell> training = ev::grid_cells("training", c);
  ASSERT_EQ(training.size(), 4u);
  EXPECT_EQ(training[0].label, "S");
  EXPECT_EQ(training[1].label, "P");
  EXPECT_EQ(training[2].label, "D+A");
  EXPECT_EQ(training[3].label, "P+D+A");
  EXPECT_EQ(training[3].method, "prolad-sim");

  const std::vector<ev::GridCell> lam = ev::grid_cells("lambda_sweep", c);
  ASSERT_EQ(lam.size(), 11u);
  EXPECT_EQ(lam.front().method, "fixed-lambda:0.0");
  EXPECT_EQ(lam[5].method, "fixed-lambda:0.5");
  EXPECT_EQ(lam.back().method, "fixed-lambda:1.0");

  const std::vector<ev::GridCell> beta = ev::grid_cells("beta_sweep", c);
  ASSERT_EQ(beta.size(), 5u);
  EXPECT_DOUBLE_EQ(beta.front().beta, 0.5);
  EXPECT_DOUBLE_EQ(beta.back().beta, 2.5);
  EXPECT_EQ(beta[2].method, "prolad-sim");

  cf::RunConfig nonadaptive = c;
  nonadaptive.method = "ta";
  EXPECT_THROW(ev::grid_cells("beta_sweep", nonadaptive), ConfigError);

  const std::vector<ev::GridCell> var = ev::grid_cells("variants", c);
  ASSERT_EQ(var.size(), 6u);
  EXPECT_EQ(var.front().method, "variant:film");
  EXPECT_EQ(var.back().method, "variant:sn+groupconv");

  EXPECT_THROW(ev::grid_cells("everything", c), ConfigError);
}

TEST(Grid, TrainingGridSharesEpisodesAndWritesSummary) {
  cf::RunConfig c = ready_config();
  c.episodes_per_domain = 2;  // 4 episodes x 4 cells
  c.max_iters = 15;
  c.out_dir = (fs::path{::testing::TempDir()} / "prolad_grid_out").string();
  fs::remove_all(c.out_dir);

  const std::vector<ev::EvalReport> reports = ev::run_ablation_grid("training", c);
  ASSERT_EQ(reports.size(), 4u);
  for (const ev::EvalReport& r : reports) {
    ASSERT_EQ(r.episodes.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      // Paired discipline: identical episode stream in every cell.
      EXPECT_EQ(r.episodes[i].episode_seed, reports[0].episodes[i].episode_seed);
    }
  }
  EXPECT_EQ(reports[0].label, "S");
  EXPECT_EQ(reports[0].method, "scratch");
  EXPECT_EQ(reports[3].label, "P+D+A");

  const fs::path base = fs::path(c.out_dir) / "ablate-training";
  const std::string summary = slurp(base / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), ev::kGridCsvHeader);
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 5);  // header + 4 cells
  EXPECT_NE(summary.find("P+D+A,prolad-sim,"), std::string::npos);
  EXPECT_TRUE(fs::exists(base / "S" / "report.json"));
  EXPECT_TRUE(fs::exists(base / "P+D+A" / "episodes.csv"));
}
