#pragma once

// Three-stage training pipeline: source pretraining, adapter fine-tuning with
// teacher capture, and joint fine-tuning with adaptive distillation — plus
// the cosine prototype classifier with pre-classifier alignment and the
// per-episode driver that realizes every method variant.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prolad/adapters.hpp"
#include "prolad/data.hpp"
#include "prolad/errors.hpp"
#include "prolad/nn.hpp"
#include "prolad/ops.hpp"
#include "prolad/rng.hpp"
#include "prolad/serialize.hpp"
#include "prolad/similarity.hpp"
#include "prolad/tape.hpp"
#include "prolad/tensor.hpp"

namespace prolad::pipeline {

namespace tags {
// Seed-derivation tags (dataset = 11 and episode = 12 live in data).
inline constexpr std::uint64_t kModel = 13;     // per-episode adapter/head init stream
inline constexpr std::uint64_t kPretrain = 14;  // pretraining shuffles and head init
}  // namespace tags

// ---------- prediction helpers ----------

// Argmax per row; ties resolve to the lowest index.
inline std::vector<long> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: need [N,K] logits");
  const std::size_t n = logits.size(0), k = logits.size(1);
  std::vector<long> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    out[i] = static_cast<long>(std::max_element(row, row + k) - row);
  }
  return out;
}

inline double accuracy(const Tensor& logits, const std::vector<long>& labels) {
  const std::vector<long> pred = argmax_rows(logits);
  if (pred.size() != labels.size()) {
    throw InputError("accuracy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(pred.size()) + " rows");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

// ---------- prototype head with pre-classifier alignment ----------

// Cosine prototype classifier: embeddings pass through a learned d x d
// alignment map c, prototypes are per-class means of aligned support
// embeddings, and logits_k = tau * cos(c f(x), prototype_k) — invariant
// under positive scaling of the embeddings.
class PrototypeHead {
 public:
  PrototypeHead(std::size_t dim, double tau, Rng& rng, double init_std = 1e-3)
      : tau_(tau), align_(Tensor::zeros({dim, dim}, true)) {
    if (dim == 0) throw ConfigError("PrototypeHead: embedding dim must be positive");
    if (tau <= 0.0) throw ConfigError("PrototypeHead: temperature must be positive");
    // Identity plus Gaussian noise; fresh draw per stage (row-major order).
    for (std::size_t i = 0; i < dim; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        align_.data()[i * dim + j] = (i == j ? 1.0 : 0.0) + init_std * rng.normal();
      }
    }
  }

  Tensor align(const Tensor& emb) const { return ops::matmul_nt(emb, align_); }

  // tau * cosine between aligned rows and prototype rows.
  Tensor logits(const Tensor& aligned, const Tensor& protos) const {
    return ops::mul_scalar(
        ops::matmul_nt(ops::row_normalize(aligned), ops::row_normalize(protos)), tau_);
  }

  // Training-path logits: prototypes rebuilt from the same (live) embeddings,
  // so gradients flow through both the samples and their class means.
  Tensor support_logits(const Tensor& emb, const std::vector<long>& labels,
                        std::size_t way) const {
    const Tensor aligned = align(emb);
    return logits(aligned, ops::row_group_mean(aligned, labels, way));
  }

  // Freezes prototypes from support embeddings for query-time prediction.
  void build_prototypes(const Tensor& emb, const std::vector<long>& labels, std::size_t way) {
    NoGrad guard;
    protos_ = ops::row_group_mean(align(emb), labels, way);
  }

  const Tensor& prototypes() const {
    if (!protos_.defined()) throw ContractError("PrototypeHead: prototypes not built");
    return protos_;
  }

  Tensor query_logits(const Tensor& emb) const {
    NoGrad guard;
    return logits(align(emb), prototypes());
  }

  Tensor& alignment() { return align_; }
  double tau() const { return tau_; }
  std::vector<Tensor> params() { return {align_}; }

 private:
  double tau_;
  Tensor align_;
  Tensor protos_;
};

// ---------- stage 1: source pretraining ----------

struct PretrainConfig {
  std::size_t epochs = 30;
  double lr = 0.03;  // cosine-annealed to 0 over all steps
  double momentum = 0.9;
  double weight_decay = 7e-4;
  std::size_t batch_size = 64;
};

struct PretrainResult {
  std::size_t epochs = 0;
  std::size_t steps = 0;
  double final_loss = 0.0;
  double source_accuracy = 0.0;  // training-set accuracy, inference mode
  std::size_t num_classes = 0;
};

namespace detail {

inline Tensor gather_rows(const Tensor& images, const std::vector<std::size_t>& idx) {
  const std::size_t c = images.size(1), h = images.size(2), w = images.size(3);
  const std::size_t stride = c * h * w;
  Tensor out = Tensor::zeros({idx.size(), c, h, w});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(images.data().data() + idx[r] * stride, stride, out.data().data() + r * stride);
  }
  return out;
}

}  // namespace detail

// Cross-entropy pretraining of the backbone with a disposable linear
// classifier: SGD momentum 0.9, cosine-annealed lr, weight decay 7e-4.
// epochs == 0 leaves the freshly initialized parameters untouched. When
// checkpoint_dir is nonempty the final backbone state is persisted together
// with a manifest of the training configuration.
inline PretrainResult stage1_pretrain(nn::Backbone& net, const data::Dataset& source,
                                      const PretrainConfig& cfg, Rng& rng,
                                      const std::filesystem::path& checkpoint_dir = {}) {
  if (!source.images.defined() || source.images.rank() != 4 || source.images.size(0) == 0) {
    throw InputError("stage1_pretrain: empty source dataset");
  }
  if (cfg.batch_size == 0) throw ConfigError("stage1_pretrain: batch_size must be positive");
  if (cfg.lr <= 0.0) throw ConfigError("stage1_pretrain: lr must be positive");
  const std::size_t n = source.images.size(0);
  if (source.labels.size() != n) throw InputError("stage1_pretrain: label count mismatch");

  // Contiguous label ids in the order of the dataset's class list.
  std::vector<long> dense(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = std::find(source.classes.begin(), source.classes.end(), source.labels[i]);
    if (it == source.classes.end()) {
      throw InputError("stage1_pretrain: label " + std::to_string(source.labels[i]) +
                       " missing from the dataset class list");
    }
    dense[i] = static_cast<long>(it - source.classes.begin());
  }
  const std::size_t num_classes = source.classes.size();
  const std::size_t dim = net.embedding_dim();

  Tensor head = Tensor::zeros({num_classes, dim}, true);
  const double head_std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : head.data()) v = head_std * rng.normal();

  std::vector<Tensor> everything = net.params();
  everything.push_back(head);
  nn::SgdMomentum opt({nn::ParamGroup{everything, cfg.lr}}, cfg.momentum, cfg.weight_decay);

  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;

  PretrainResult res;
  res.epochs = cfg.epochs;
  res.num_classes = num_classes;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, n);
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(lo),
                                   order.begin() + static_cast<long>(hi));
      std::vector<long> batch_labels(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) batch_labels[r] = dense[idx[r]];
      const Tensor batch = detail::gather_rows(source.images, idx);

      opt.set_lr(0, nn::cosine_lr(res.steps, total_steps, cfg.lr));
      {
        Tape tape;
        const Tensor emb = net.features(batch, nn::BnMode::Training);
        const Tensor logits = ops::matmul_nt(emb, head);
        const Tensor loss = ops::cross_entropy(logits, batch_labels);
        res.final_loss = loss.data()[0];
        if (!std::isfinite(res.final_loss)) {
          throw TrainingError("stage1_pretrain: loss diverged at epoch " + std::to_string(epoch));
        }
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
      }
      ++res.steps;
    }
  }

  // Monitor accuracy over the source set in inference mode, batched.
  {
    NoGrad guard;
    std::size_t correct = 0;
    for (std::size_t lo = 0; lo < n; lo += 128) {
      const std::size_t hi = std::min(lo + 128, n);
      std::vector<std::size_t> idx(hi - lo);
      for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = lo + r;
      const Tensor emb = net.features(detail::gather_rows(source.images, idx), nn::BnMode::Inference);
      const std::vector<long> pred = argmax_rows(ops::matmul_nt(emb, head));
      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (pred[r] == dense[lo + r]) ++correct;
      }
    }
    res.source_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }

  if (!checkpoint_dir.empty()) {
    ordered_json meta;
    meta["epochs"] = cfg.epochs;
    meta["lr"] = cfg.lr;
    meta["momentum"] = cfg.momentum;
    meta["weight_decay"] = cfg.weight_decay;
    meta["batch_size"] = cfg.batch_size;
    meta["num_classes"] = num_classes;
    meta["final_loss"] = res.final_loss;
    meta["source_accuracy"] = res.source_accuracy;
    save_checkpoint(checkpoint_dir, net.state(), meta);
  }
  return res;
}

// ---------- fine-tuning configuration and results ----------

struct FinetuneConfig {
  double adapter_lr = 0.5;  // Adadelta, both adapter families
  double head_lr = 1.0;     // alignment map c
  double rho = 0.9;
  double adadelta_eps = 1e-6;
  double acc_threshold = 0.99;
  std::size_t extra_iters = 25;  // after first crossing the threshold
  std::size_t max_iters = 200;   // hard cap
  double seen_lr_scale = 0.1;    // applied when the episode's domain shift is 0
  double tau = 10.0;
  double head_init_std = 1e-3;
  double beta = 1.5;  // adaptive-coefficient scale
  double ta_init_std = adapters::kTaInitStd;
  double tan_init_std = adapters::kTanInitStd;
  std::size_t group_size = adapters::kGroupSize;
  double sn_momentum = 0.8;
  bool query_batch_stats = false;  // normalization at query time: running (default) or batch stats
};

struct StageResult {
  int stage = 0;
  std::vector<std::pair<std::string, Tensor>> state;  // deep-copied parameter snapshot
  Tensor teacher;                                     // stage 2 with capture only: [|S|, d]
  double lambda = 0.0;                                // stage 3 only
  std::size_t iterations = 0;
  double final_support_acc = 0.0;
  bool cap_hit = false;
};

// Convex combination with exact endpoints: at lambda == 0 only the CE branch
// is built, at lambda == 1 only the distillation branch is; the other factory
// is never invoked.
inline Tensor blend_losses(double lambda, const std::function<Tensor()>& ce,
                           const std::function<Tensor()>& distill) {
  if (lambda < 0.0 || lambda > 1.0 || !std::isfinite(lambda)) {
    throw ContractError("blend_losses: lambda outside [0,1]");
  }
  if (lambda == 0.0) return ce();
  if (lambda == 1.0) return distill();
  return ops::add(ops::mul_scalar(ce(), 1.0 - lambda), ops::mul_scalar(distill(), lambda));
}

namespace detail {

inline std::vector<std::pair<std::string, Tensor>> snapshot(
    std::vector<std::pair<std::string, Tensor>> live) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(live.size());
  for (auto& [name, t] : live) {
    out.emplace_back(name, Tensor::from_data(t.shape(), t.data()));
  }
  return out;
}

// Shared fine-tuning loop. One iteration = one full-support forward, one
// backward, one Adadelta step. Stopping: run until support accuracy first
// reaches the threshold, then `extra_iters` more, bounded by `max_iters`;
// cap_hit marks episodes that never reached the threshold.
inline StageResult run_stage(int stage_id, adapters::AdaptedModel& model, PrototypeHead& head,
                             const data::Episode& ep, double lambda, const Tensor* teacher,
                             std::vector<nn::ParamGroup> groups, const FinetuneConfig& cfg) {
  if (lambda > 0.0 && (teacher == nullptr || !teacher->defined())) {
    throw ContractError("run_stage: distillation weight positive but no teacher");
  }
  nn::Adadelta opt(std::move(groups), cfg.rho, cfg.adadelta_eps);
  StageResult res;
  res.stage = stage_id;
  res.lambda = lambda;

  std::size_t threshold_iter = 0;
  bool hit = false;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    double acc = -1.0;
    {
      Tape tape;
      const Tensor emb = model.features(ep.support_images, nn::BnMode::Training);
      const Tensor total = blend_losses(
          lambda,
          [&]() {
            const Tensor logits = head.support_logits(emb, ep.support_labels, ep.way);
            acc = accuracy(logits, ep.support_labels);
            return ops::cross_entropy(logits, ep.support_labels);
          },
          [&]() {
            const Tensor cos = ops::cosine_batch(emb, *teacher);
            return ops::add_scalar(ops::mul_scalar(cos, -1.0), 1.0);
          });
      if (!std::isfinite(total.data()[0])) {
        throw TrainingError("stage " + std::to_string(stage_id) + ": loss diverged at iteration " +
                            std::to_string(it));
      }
      if (acc < 0.0) {  // pure-distillation iteration: monitor accuracy off-graph
        NoGrad guard;
        acc = accuracy(head.support_logits(emb, ep.support_labels, ep.way), ep.support_labels);
      }
      tape.backward(total);
      opt.step();
      opt.zero_grad();
    }
    res.iterations = it;
    res.final_support_acc = acc;
    if (!hit && acc >= cfg.acc_threshold) {
      hit = true;
      threshold_iter = it;
    }
    if (hit && it >= threshold_iter + cfg.extra_iters) break;
  }
  res.cap_hit = !hit;
  return res;
}

inline double lr_scale_for(const data::Episode& ep, const FinetuneConfig& cfg) {
  return ep.shift == 0.0 ? cfg.seen_lr_scale : 1.0;
}

}  // namespace detail

// ---------- stage 2: TA fine-tuning with teacher capture ----------

// Trains the weight adapter and a fresh head on the support set (frozen
// backbone), then captures teacher embeddings f_{backbone+TA}(support) —
// pre-alignment, gradient-free, immutable afterwards.
inline StageResult stage2_finetune(nn::Backbone& net, adapters::TAAdapter& ta, PrototypeHead& head,
                                   const data::Episode& ep, const FinetuneConfig& cfg,
                                   bool capture_teacher = true) {
  adapters::AdaptedModel model = adapters::attach(net, &ta, nullptr);
  const double scale = detail::lr_scale_for(ep, cfg);
  std::vector<nn::ParamGroup> groups{{ta.params(), cfg.adapter_lr * scale},
                                     {head.params(), cfg.head_lr * scale}};
  StageResult res =
      detail::run_stage(2, model, head, ep, 0.0, nullptr, std::move(groups), cfg);

  if (capture_teacher) {
    NoGrad guard;
    res.teacher = model.features(ep.support_images, nn::BnMode::Inference);
    const std::size_t d = res.teacher.size(1);
    for (std::size_t i = 0; i < res.teacher.size(0); ++i) {
      double norm2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double v = res.teacher.data()[i * d + k];
        if (!std::isfinite(v)) throw TrainingError("stage 2: non-finite teacher row");
        norm2 += v * v;
      }
      if (norm2 == 0.0) throw TrainingError("stage 2: zero-norm teacher row");
    }
  }

  auto state = ta.state();
  state.emplace_back("align", head.alignment());
  res.state = detail::snapshot(std::move(state));
  return res;
}

// ---------- stage 3: joint fine-tuning with adaptive distillation ----------

// Minimizes (1-lambda) * CE + lambda * (1 - mean cosine to the teacher) over
// both adapter families and a reinitialized head. `ta` may be null (norm-
// adapter-only training); `teacher` is required whenever lambda > 0.
inline StageResult stage3_finetune(nn::Backbone& net, adapters::TAAdapter* ta,
                                   adapters::TANAdapter& tan, PrototypeHead& head,
                                   const Tensor* teacher, double lambda, const data::Episode& ep,
                                   const FinetuneConfig& cfg) {
  adapters::AdaptedModel model = adapters::attach(net, ta, &tan);
  const double scale = detail::lr_scale_for(ep, cfg);
  std::vector<Tensor> adapter_params = tan.params();
  if (ta != nullptr) {
    std::vector<Tensor> tap = ta->params();
    adapter_params.insert(adapter_params.end(), tap.begin(), tap.end());
  }
  std::vector<nn::ParamGroup> groups{{std::move(adapter_params), cfg.adapter_lr * scale},
                                     {head.params(), cfg.head_lr * scale}};
  StageResult res = detail::run_stage(3, model, head, ep, lambda, teacher, std::move(groups), cfg);

  auto state = tan.state();
  if (ta != nullptr) {
    for (auto& entry : ta->state()) state.push_back(std::move(entry));
  }
  state.emplace_back("align", head.alignment());
  res.state = detail::snapshot(std::move(state));
  return res;
}

// ---------- prediction ----------

struct Prediction {
  Tensor logits;
  std::vector<long> labels;
};

// Query-time inference: logits = tau * cosine to the head's frozen
// prototypes; labels = argmax. Normalization layers run in the given mode
// (inference = running statistics).
inline Prediction predict(adapters::AdaptedModel& model, const PrototypeHead& head,
                          const Tensor& query_images,
                          nn::BnMode adapter_mode = nn::BnMode::Inference) {
  if (!query_images.defined() || query_images.rank() != 4 || query_images.size(0) == 0) {
    throw InputError("predict: empty query batch");
  }
  NoGrad guard;
  Prediction pred;
  pred.logits = head.query_logits(model.features(query_images, adapter_mode));
  pred.labels = argmax_rows(pred.logits);
  return pred;
}

// Builds prototypes from the final support embeddings and scores the query
// set. The same normalization mode is used for both forwards.
inline double evaluate_query_accuracy(adapters::AdaptedModel& model, PrototypeHead& head,
                                      const data::Episode& ep, const FinetuneConfig& cfg) {
  NoGrad guard;
  const nn::BnMode mode = cfg.query_batch_stats ? nn::BnMode::Training : nn::BnMode::Inference;
  head.build_prototypes(model.features(ep.support_images, mode), ep.support_labels, ep.way);
  const Prediction pred = predict(model, head, ep.query_images, mode);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    if (pred.labels[i] == ep.query_labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pred.labels.size());
}

// ---------- method plans ----------

// Canonical method tags: ta | tan | scratch | p | d+a | prolad-sim |
// prolad-loss | fixed-lambda:<v> | variant:<name>.
struct MethodPlan {
  enum class Distill { None, Sim, Loss, Fixed };

  std::string tag;
  bool train_ta = true;
  bool train_tan = true;
  bool progressive = true;  // stage-3 TA warm-started from stage 2
  Distill distill = Distill::Sim;
  double fixed_lambda = 0.0;
  adapters::AdapterVariant variant = adapters::AdapterVariant::SnGroupConv;

  // Stage 2 runs when TA trains and is needed for warm starts, for the
  // teacher, or as the method's only stage.
  bool needs_stage2() const {
    return train_ta && (progressive || distill != Distill::None || !train_tan);
  }
  bool needs_stage3() const { return train_tan; }
};

inline MethodPlan parse_method(const std::string& tag) {
  MethodPlan p;
  p.tag = tag;
  if (tag == "ta") {
    p.train_tan = false;
    p.distill = MethodPlan::Distill::None;
  } else if (tag == "tan") {
    p.train_ta = false;
    p.progressive = false;
    p.distill = MethodPlan::Distill::None;
  } else if (tag == "scratch") {
    p.progressive = false;
    p.distill = MethodPlan::Distill::None;
  } else if (tag == "p") {
    p.distill = MethodPlan::Distill::None;
  } else if (tag == "d+a") {
    p.progressive = false;
  } else if (tag == "prolad-sim") {
    // defaults
  } else if (tag == "prolad-loss") {
    p.distill = MethodPlan::Distill::Loss;
  } else if (tag.rfind("fixed-lambda:", 0) == 0) {
    p.distill = MethodPlan::Distill::Fixed;
    const std::string v = tag.substr(13);
    try {
      std::size_t used = 0;
      p.fixed_lambda = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw ConfigError("method tag: bad fixed lambda '" + v + "'");
    }
    if (!(p.fixed_lambda >= 0.0 && p.fixed_lambda <= 1.0)) {
      throw ConfigError("method tag: fixed lambda must lie in [0,1]");
    }
  } else if (tag.rfind("variant:", 0) == 0) {
    p.variant = adapters::variant_from_name(tag.substr(8));
  } else {
    throw ConfigError("unknown method tag '" + tag + "'");
  }
  return p;
}

// ---------- adaptive coefficient ----------

struct LambdaInfo {
  double lambda = 0.0;
  bool adaptive = false;
  bool has_sim_inputs = false;   // abs_diff valid
  bool has_loss_inputs = false;  // loss/acc valid
  double abs_diff = 0.0;
  double support_loss = 0.0;
  double support_acc = 0.0;
};

// Computed once per episode from the bare pretrained extractor (no adapters),
// before stage 3; never updated mid-training.
inline LambdaInfo compute_lambda(nn::Backbone& net, const data::Episode& ep,
                                 const MethodPlan& plan, const FinetuneConfig& cfg) {
  LambdaInfo info;
  switch (plan.distill) {
    case MethodPlan::Distill::None:
      return info;
    case MethodPlan::Distill::Fixed:
      info.lambda = plan.fixed_lambda;
      return info;
    case MethodPlan::Distill::Sim: {
      NoGrad guard;
      const Tensor emb = net.features(ep.support_images, nn::BnMode::Inference);
      const similarity::SimilarityStats stats =
          similarity::similarity_stats(emb, ep.support_labels, ep.way);
      info.lambda = similarity::coeff_sim(stats, cfg.beta);
      info.adaptive = true;
      info.has_sim_inputs = true;
      info.abs_diff = stats.abs_diff;
      return info;
    }
    case MethodPlan::Distill::Loss: {
      NoGrad guard;
      const Tensor emb = net.features(ep.support_images, nn::BnMode::Inference);
      const similarity::SupportFit fit =
          similarity::support_loss_acc(emb, ep.support_labels, ep.way, cfg.tau);
      info.lambda = similarity::coeff_loss(fit.loss, fit.acc, cfg.beta);
      info.adaptive = true;
      info.has_loss_inputs = true;
      info.support_loss = fit.loss;
      info.support_acc = fit.acc;
      return info;
    }
  }
  throw ContractError("compute_lambda: unreachable");
}

// ---------- per-episode driver ----------

struct EpisodeOutcome {
  std::string method;
  std::uint64_t seed = 0;
  int domain_id = 0;
  double shift = 0.0;
  std::size_t way = 0;
  double query_acc = 0.0;
  LambdaInfo lambda;
  StageResult stage2;
  StageResult stage3;
  bool ran_stage2 = false;
  bool ran_stage3 = false;
};

namespace detail {

inline ordered_json stage_manifest(const StageResult& s) {
  ordered_json j;
  j["iterations"] = s.iterations;
  j["final_support_acc"] = s.final_support_acc;
  j["cap_hit"] = s.cap_hit;
  return j;
}

inline void persist_episode(const std::filesystem::path& dir, const EpisodeOutcome& out) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("episode artifacts: cannot create " + dir.string() + ": " + ec.message());

  ordered_json manifest;
  manifest["method"] = out.method;
  manifest["seed"] = out.seed;
  manifest["domain_id"] = out.domain_id;
  manifest["shift"] = out.shift;
  manifest["way"] = out.way;
  manifest["lambda"] = out.lambda.lambda;
  manifest["lambda_adaptive"] = out.lambda.adaptive;
  if (out.lambda.has_sim_inputs) manifest["abs_diff"] = out.lambda.abs_diff;
  if (out.lambda.has_loss_inputs) {
    manifest["support_loss"] = out.lambda.support_loss;
    manifest["support_acc"] = out.lambda.support_acc;
  }
  if (out.ran_stage2) {
    manifest["stage2"] = stage_manifest(out.stage2);
    save_checkpoint(dir / "stage2", out.stage2.state, stage_manifest(out.stage2));
    if (out.stage2.teacher.defined()) {
      write_tensor(dir / "teacher.plad", out.stage2.teacher);
    }
  }
  if (out.ran_stage3) {
    manifest["stage3"] = stage_manifest(out.stage3);
    save_checkpoint(dir / "stage3", out.stage3.state, stage_manifest(out.stage3));
  }
  manifest["query_acc"] = out.query_acc;

  std::ofstream os(dir / "episode.json");
  if (!os) throw IoError("episode artifacts: cannot open manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

}  // namespace detail

// Runs one episode end to end for the given method plan. The backbone stays
// frozen and is shared read-only; all trainable state (adapters, heads) is
// local to this call. Initialization draws come from a stream derived from
// the episode seed, in a fixed documented order: TA, TAN, stage-2 head,
// stage-3 fresh TA (non-progressive plans only), stage-3 head.
inline EpisodeOutcome run_episode(nn::Backbone& net, const data::Episode& ep,
                                  const MethodPlan& plan, const FinetuneConfig& cfg,
                                  const std::filesystem::path& artifacts_dir = {}) {
  if (ep.way == 0 || !ep.support_images.defined() || ep.support_images.size(0) == 0) {
    throw InputError("run_episode: empty episode");
  }
  Rng rng(derive_seed(ep.seed, tags::kModel));
  const std::size_t dim = net.embedding_dim();

  EpisodeOutcome out;
  out.method = plan.tag;
  out.seed = ep.seed;
  out.domain_id = ep.domain_id;
  out.shift = ep.shift;
  out.way = ep.way;

  std::optional<adapters::TAAdapter> ta;
  std::optional<adapters::TANAdapter> tan;
  if (plan.train_ta) ta.emplace(net, rng, cfg.ta_init_std);
  if (plan.train_tan) {
    tan.emplace(net, rng, plan.variant, cfg.group_size, cfg.tan_init_std, cfg.sn_momentum);
  }

  if (plan.needs_stage2()) {
    PrototypeHead head2(dim, cfg.tau, rng, cfg.head_init_std);
    const bool capture = plan.distill != MethodPlan::Distill::None;
    out.stage2 = stage2_finetune(net, *ta, head2, ep, cfg, capture);
    out.ran_stage2 = true;

    if (!plan.needs_stage3()) {
      adapters::AdaptedModel model = adapters::attach(net, &*ta, nullptr);
      out.query_acc = evaluate_query_accuracy(model, head2, ep, cfg);
      if (!artifacts_dir.empty()) detail::persist_episode(artifacts_dir, out);
      return out;
    }
  }

  out.lambda = compute_lambda(net, ep, plan, cfg);

  // Non-progressive plans that ran stage 2 (teacher-only) discard the trained
  // adapter and start stage 3 from a fresh draw.
  if (plan.train_ta && !plan.progressive && out.ran_stage2) {
    ta.emplace(net, rng, cfg.ta_init_std);
  }
  PrototypeHead head3(dim, cfg.tau, rng, cfg.head_init_std);
  const Tensor* teacher = out.stage2.teacher.defined() ? &out.stage2.teacher : nullptr;
  out.stage3 = stage3_finetune(net, plan.train_ta ? &*ta : nullptr, *tan, head3, teacher,
                               out.lambda.lambda, ep, cfg);
  out.ran_stage3 = true;

  adapters::AdaptedModel model = adapters::attach(net, plan.train_ta ? &*ta : nullptr, &*tan);
  out.query_acc = evaluate_query_accuracy(model, head3, ep, cfg);

  if (!artifacts_dir.empty()) detail::persist_episode(artifacts_dir, out);
  return out;
}

}  // namespace prolad::pipeline
