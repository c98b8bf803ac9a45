// Command-line entry point: binds a JSON config file and mirrored flags to
// the pretraining, evaluation, ablation, similarity-table, coefficient-trace,
// and statistics-profiling drivers. Flag values override file values; the
// PROLAD_OUT_DIR environment variable is the fallback for --out-dir.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prolad/config.hpp"
#include "prolad/data.hpp"
#include "prolad/errors.hpp"
#include "prolad/eval.hpp"
#include "prolad/nn.hpp"
#include "prolad/pipeline.hpp"
#include "prolad/rng.hpp"

namespace {

using prolad::config::RunConfig;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// The config file must be applied before CLI11 binds flag defaults, so the
// path is pre-scanned from argv ahead of the real parse.
std::string find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

void add_config_flags(CLI::App& app, RunConfig& c) {
  app.add_option("--seed", c.seed, "master seed for data, models, and episode streams");
  app.add_option("--widths", c.widths, "backbone stage widths")->delimiter(',');
  app.add_option("--strides", c.strides, "backbone stage strides")->delimiter(',');
  app.add_option("--image_size,--image-size", c.image_size, "generated image height/width");
  app.add_option("--num_classes,--num-classes", c.num_classes, "total generator classes");
  app.add_option("--pretrain_classes,--pretrain-classes", c.pretrain_classes,
                 "leading classes reserved for pretraining");
  app.add_option("--domains", c.domains, "domain shift grid")->delimiter(',');
  app.add_option("--episodes_per_domain,--episodes-per-domain", c.episodes_per_domain,
                 "evaluation episodes per domain");
  app.add_option("--way_min,--way-min", c.way_min, "minimum episode way");
  app.add_option("--way_max,--way-max", c.way_max, "maximum episode way");
  app.add_option("--shot_min,--shot-min", c.shot_min, "minimum support shots per class");
  app.add_option("--shot_max,--shot-max", c.shot_max, "maximum support shots per class");
  app.add_option("--query_per_class,--query-per-class", c.query_per_class,
                 "query samples per class");
  app.add_option("--method", c.method, "method tag for finetune-eval");
  app.add_option("--beta", c.beta, "scaling factor for the adaptive coefficients");
  app.add_option("--gamma", c.gamma, "similarity decay rate over the transport distance");
  app.add_option("--tau", c.tau, "logit temperature");
  app.add_option("--group_size,--group-size", c.group_size,
                 "grouped-convolution group size in the normalization adapter");
  app.add_option("--sn_momentum,--sn-momentum", c.sn_momentum,
                 "running-stat momentum of the specialized normalization");
  app.add_option("--adapter_lr,--adapter-lr", c.adapter_lr, "adapter learning rate");
  app.add_option("--head_lr,--head-lr", c.head_lr, "alignment-head learning rate");
  app.add_option("--acc_threshold,--acc-threshold", c.acc_threshold,
                 "support accuracy that arms the stopping rule");
  app.add_option("--extra_iters,--extra-iters", c.extra_iters,
                 "iterations to continue once the threshold is met");
  app.add_option("--max_iters,--max-iters", c.max_iters, "hard iteration cap per stage");
  app.add_option("--seen_lr_scale,--seen-lr-scale", c.seen_lr_scale,
                 "learning-rate scale on unshifted domains");
  app.add_option("--query_batch_stats,--query-batch-stats", c.query_batch_stats,
                 "use query batch statistics in the normalization adapter (true/false)");
  app.add_option("--pretrain_epochs,--pretrain-epochs", c.pretrain_epochs, "pretraining epochs");
  app.add_option("--pretrain_lr,--pretrain-lr", c.pretrain_lr, "pretraining learning rate");
  app.add_option("--pretrain_momentum,--pretrain-momentum", c.pretrain_momentum,
                 "pretraining SGD momentum");
  app.add_option("--weight_decay,--weight-decay", c.weight_decay, "pretraining weight decay");
  app.add_option("--pretrain_batch,--pretrain-batch", c.pretrain_batch, "pretraining batch size");
  app.add_option("--pretrain_samples_per_class,--pretrain-samples-per-class",
                 c.pretrain_samples_per_class, "source dataset size per class");
  app.add_option("--emd_samples_per_class,--emd-samples-per-class", c.emd_samples_per_class,
                 "per-domain samples per class behind the similarity table");
  app.add_option("--profile_samples_per_class,--profile-samples-per-class",
                 c.profile_samples_per_class, "per-domain samples per class when profiling");
  app.add_option("--similar_max_shift,--similar-max-shift", c.similar_max_shift,
                 "largest shift counted as a similar domain");
  app.add_option("--dissimilar_min_shift,--dissimilar-min-shift", c.dissimilar_min_shift,
                 "smallest shift counted as a dissimilar domain");
  app.add_option("--threads", c.threads, "episode-level worker count (1 = bit-exact)");
  app.add_option("--out_dir,--out-dir", c.out_dir, "report output directory");
  app.add_option("--checkpoint", c.checkpoint,
                 "stage-1 checkpoint directory (default <out_dir>/pretrain)");
}

int run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.checkpoint.empty() && cfg.out_dir.empty()) {
    throw prolad::ConfigError(
        "pretrain: no checkpoint destination; set --checkpoint, --out-dir, or PROLAD_OUT_DIR");
  }
  prolad::Rng rng(prolad::derive_seed(cfg.seed, prolad::eval::tags::kPretrainInit));
  prolad::nn::Backbone net(cfg.backbone_config(), rng);
  const prolad::data::DomainSpec source_spec =
      prolad::data::DomainSpec::from_shift(0, 0.0, cfg.generator_config());
  const prolad::data::Dataset source = prolad::data::generate_dataset(
      source_spec, cfg.source_classes(), cfg.pretrain_samples_per_class,
      prolad::derive_seed(cfg.seed, prolad::eval::tags::kSourceData));
  const prolad::pipeline::PretrainResult res =
      prolad::pipeline::stage1_pretrain(net, source, cfg.pretrain_config(), rng,
                                        cfg.checkpoint_dir());
  prolad::config::save_config(std::filesystem::path(cfg.checkpoint_dir()) / "config.json", cfg);
  std::printf("pretrain classes=%zu epochs=%zu steps=%zu final_loss=%s source_accuracy=%s\n",
              res.num_classes, res.epochs, res.steps, fmt(res.final_loss).c_str(),
              fmt(res.source_accuracy).c_str());
  std::printf("checkpoint: %s\n", cfg.checkpoint_dir().string().c_str());
  return 0;
}

int run_finetune_eval(const RunConfig& cfg) {
  const prolad::eval::EvalReport r = prolad::eval::run_eval(cfg);
  std::printf("method=%s episodes=%zu mean=%s ci95=%s\n", r.method.c_str(), r.episodes.size(),
              fmt(r.mean).c_str(), fmt(r.ci95).c_str());
  std::printf("similar count=%zu mean=%s ci95=%s\n", r.similar.count, fmt(r.similar.mean).c_str(),
              fmt(r.similar.ci95).c_str());
  std::printf("dissimilar count=%zu mean=%s ci95=%s\n", r.dissimilar.count,
              fmt(r.dissimilar.mean).c_str(), fmt(r.dissimilar.ci95).c_str());
  if (!cfg.out_dir.empty()) {
    const std::filesystem::path dir = std::filesystem::path(cfg.out_dir) / "reports" /
                                      prolad::eval::detail::sanitize_label(r.label);
    std::printf("report: %s\n", (dir / "report.json").string().c_str());
  }
  return 0;
}

int run_ablate(const RunConfig& cfg, const std::string& kind) {
  const std::vector<prolad::eval::EvalReport> reports = prolad::eval::run_ablation_grid(kind, cfg);
  for (const prolad::eval::EvalReport& r : reports) {
    std::printf("%s method=%s mean=%s ci95=%s count=%zu\n", r.label.c_str(), r.method.c_str(),
                fmt(r.mean).c_str(), fmt(r.ci95).c_str(), r.episodes.size());
  }
  if (!cfg.out_dir.empty()) {
    const std::filesystem::path base =
        std::filesystem::path(cfg.out_dir) / ("ablate-" + kind) / "summary.csv";
    std::printf("summary: %s\n", base.string().c_str());
  }
  return 0;
}

int run_emd(const RunConfig& cfg) {
  cfg.validate();
  prolad::nn::Backbone net = prolad::eval::load_pretrained_backbone(cfg);
  const prolad::eval::SimilarityTable t = prolad::eval::domain_similarity_table(net, cfg);
  std::fputs(prolad::eval::matrix_csv(t.shifts, t.similarity).c_str(), stdout);
  if (!cfg.out_dir.empty()) {
    const std::filesystem::path dir = std::filesystem::path(cfg.out_dir) / "emd";
    prolad::eval::write_similarity_table(dir, t, cfg);
    std::printf("report: %s\n", (dir / "report.json").string().c_str());
  }
  return 0;
}

int run_coeff(const RunConfig& cfg) {
  cfg.validate();
  prolad::nn::Backbone net = prolad::eval::load_pretrained_backbone(cfg);
  const std::vector<prolad::data::Episode> episodes = prolad::eval::episode_stream(cfg);
  const prolad::eval::CoeffTraces t = prolad::eval::coeff_traces(net, episodes, cfg);
  double sim_sum = 0.0, loss_sum = 0.0;
  for (const auto& info : t.sim) sim_sum += info.lambda;
  for (const auto& info : t.loss) loss_sum += info.lambda;
  const double n = t.episodes.empty() ? 1.0 : static_cast<double>(t.episodes.size());
  std::printf("episodes=%zu mean_lambda_sim=%s mean_lambda_loss=%s\n", t.episodes.size(),
              fmt(sim_sum / n).c_str(), fmt(loss_sum / n).c_str());
  if (!cfg.out_dir.empty()) {
    const std::filesystem::path dir = std::filesystem::path(cfg.out_dir) / "coeff";
    prolad::eval::write_coeff_traces(dir, t, cfg);
    std::printf("traces: %s\n", dir.string().c_str());
  }
  return 0;
}

int run_profile_stats(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.out_dir.empty()) {
    throw prolad::ConfigError(
        "profile-stats: output directory required; set --out-dir or PROLAD_OUT_DIR");
  }
  prolad::nn::Backbone net = prolad::eval::load_pretrained_backbone(cfg);
  const std::filesystem::path dir = std::filesystem::path(cfg.out_dir) / "profile-stats";
  const auto profiles = prolad::eval::write_domain_profiles(net, cfg, dir);
  std::printf("domains=%zu dir=%s\n", profiles.size(), dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  std::string config_path;
  std::string ablate_kind;

  CLI::App app{"Dual-adapter cross-domain few-shot adaptation toolkit"};
  app.require_subcommand(1);

  try {
    config_path = find_config_arg(argc, argv);
    if (!config_path.empty()) cfg = prolad::config::load_config(config_path);

    app.add_option("--config", config_path, "JSON config file; flags override its values");
    add_config_flags(app, cfg);

    CLI::App* cmd_pretrain =
        app.add_subcommand("pretrain", "train the source-domain backbone and save a checkpoint");
    CLI::App* cmd_eval =
        app.add_subcommand("finetune-eval", "evaluate one method over the episode stream");
    CLI::App* cmd_ablate = app.add_subcommand("ablate", "run a published ablation grid");
    cmd_ablate
        ->add_option("--kind", ablate_kind,
                     "grid: adapters | training | lambda_sweep | beta_sweep | variants")
        ->required();
    CLI::App* cmd_emd =
        app.add_subcommand("emd", "pairwise domain-similarity table over the shift grid");
    CLI::App* cmd_coeff =
        app.add_subcommand("coeff", "adaptive-coefficient traces over the episode stream");
    CLI::App* cmd_profile = app.add_subcommand(
        "profile-stats", "per-domain normalization-statistics profiles and KDE curves");
    for (CLI::App* sub : {cmd_pretrain, cmd_eval, cmd_ablate, cmd_emd, cmd_coeff, cmd_profile}) {
      sub->fallthrough();
    }

    app.parse(argc, argv);

    if (cfg.out_dir.empty()) {
      if (const char* env = std::getenv("PROLAD_OUT_DIR")) cfg.out_dir = env;
    }

    if (cmd_pretrain->parsed()) return run_pretrain(cfg);
    if (cmd_eval->parsed()) return run_finetune_eval(cfg);
    if (cmd_ablate->parsed()) return run_ablate(cfg, ablate_kind);
    if (cmd_emd->parsed()) return run_emd(cfg);
    if (cmd_coeff->parsed()) return run_coeff(cfg);
    if (cmd_profile->parsed()) return run_profile_stats(cfg);
    std::fprintf(stderr, "usage error: no command given\n");
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const prolad::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 3;
  } catch (const prolad::InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 4;
  } catch (const prolad::ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 4;
  } catch (const prolad::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 5;
  } catch (const prolad::TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 6;
  } catch (const prolad::Error& e) {
    std::fprintf(stderr, "%s error: %s\n", e.category(), e.what());
    return 7;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
}
