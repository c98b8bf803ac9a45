#pragma once

// Neural-network building blocks: batch normalization with an explicit
// running-statistics convention, weight-initialized convolutions, the compact
// four-block convolutional feature extractor, and the two optimizers used by
// the training pipeline (SGD with momentum, Adadelta).

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "prolad/errors.hpp"
#include "prolad/ops.hpp"
#include "prolad/rng.hpp"
#include "prolad/tensor.hpp"

namespace prolad::nn {

enum class BnMode { Training, Inference };

// Per-channel batch normalization over [N,C,H,W].
//
// Training mode normalizes by the current batch's (biased) statistics and
// updates the running statistics as
//     running <- (1 - m) * running + m * batch,
// so a momentum of 0.8 weights the newest batch heavily and a momentum of
// 1.0 makes the running statistics equal the last batch's statistics exactly
// (the profiling configuration). Inference mode normalizes by the running
// statistics and never mutates them.
//
// When constructed without affine parameters the layer is a pure
// standardization layer (used as the normalization stage inside the
// normalization adapter).
class BatchNorm {
 public:
  BatchNorm(std::size_t channels, bool affine, double momentum = 0.8, double eps = 1e-5)
      : channels_(channels), affine_(affine), eps_(eps) {
    if (channels == 0) throw ConfigError("BatchNorm: channel count must be positive");
    set_momentum(momentum);
    running_mean_ = Tensor::zeros({channels});
    running_var_ = Tensor::full({channels}, 1.0);
    if (affine_) {
      gamma_ = Tensor::full({channels}, 1.0, true);
      beta_ = Tensor::zeros({channels}, true);
    }
  }

  Tensor forward(const Tensor& x, BnMode mode) {
    if (x.rank() != 4 || x.size(1) != channels_) {
      throw ShapeError("BatchNorm: expected [N," + std::to_string(channels_) +
                       ",H,W], got " + shape_str(x.shape()));
    }
    Tensor normalized;
    if (mode == BnMode::Training) {
      std::vector<double> bmean, bvar;
      normalized = ops::batch_norm_train(x, eps_, &bmean, &bvar);
      for (std::size_t c = 0; c < channels_; ++c) {
        running_mean_.data()[c] = (1.0 - momentum_) * running_mean_.data()[c] + momentum_ * bmean[c];
        running_var_.data()[c] = (1.0 - momentum_) * running_var_.data()[c] + momentum_ * bvar[c];
      }
    } else {
      Tensor scale = Tensor::zeros({channels_});
      Tensor shift = Tensor::zeros({channels_});
      for (std::size_t c = 0; c < channels_; ++c) {
        const double inv = 1.0 / std::sqrt(running_var_.data()[c] + eps_);
        scale.data()[c] = inv;
        shift.data()[c] = -running_mean_.data()[c] * inv;
      }
      normalized = ops::channel_affine(x, scale, shift);
    }
    if (!affine_) return normalized;
    return ops::channel_affine(normalized, gamma_, beta_);
  }

  std::size_t channels() const { return channels_; }
  bool affine() const { return affine_; }
  double momentum() const { return momentum_; }
  double eps() const { return eps_; }

  void set_momentum(double m) {
    if (!(m > 0.0 && m <= 1.0)) {
      throw ConfigError("BatchNorm: momentum must lie in (0,1], got " + std::to_string(m));
    }
    momentum_ = m;
  }

  Tensor& gamma() {
    check_affine();
    return gamma_;
  }
  Tensor& beta() {
    check_affine();
    return beta_;
  }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

  std::vector<Tensor> params() {
    if (!affine_) return {};
    return {gamma_, beta_};
  }

 private:
  void check_affine() const {
    if (!affine_) throw ContractError("BatchNorm: layer has no affine parameters");
  }

  std::size_t channels_;
  bool affine_;
  double momentum_ = 0.8;
  double eps_;
  Tensor gamma_, beta_;
  Tensor running_mean_, running_var_;
};

// Square-kernel 2-D convolution without bias (every convolution in this
// project is followed by a normalization layer or acts as a residual branch
// whose shift would break the near-identity initialization).
class Conv2d {
 public:
  // init_std < 0 selects He initialization, std = sqrt(2 / fan_in) with
  // fan_in = (cin / groups) * k * k; otherwise weights are drawn from
  // N(0, init_std^2) (used by the adapters' tiny initializations).
  Conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
         std::size_t padding, std::size_t groups, Rng& rng, double init_std = -1.0)
      : cin_(cin), cout_(cout), kernel_(kernel), stride_(stride), padding_(padding),
        groups_(groups) {
    if (cin == 0 || cout == 0 || kernel == 0 || stride == 0 || groups == 0) {
      throw ConfigError("Conv2d: channel counts, kernel, stride, groups must be positive");
    }
    if (cin % groups != 0 || cout % groups != 0) {
      throw ConfigError("Conv2d: groups=" + std::to_string(groups) +
                        " must divide cin=" + std::to_string(cin) +
                        " and cout=" + std::to_string(cout));
    }
    const std::size_t fan_in = (cin / groups) * kernel * kernel;
    const double sd = init_std < 0.0 ? std::sqrt(2.0 / static_cast<double>(fan_in)) : init_std;
    weight_ = Tensor::zeros({cout, cin / groups, kernel, kernel}, true);
    for (double& w : weight_.data()) w = rng.normal(0.0, sd);
  }

  Tensor forward(const Tensor& x) const {
    return ops::conv2d(x, weight_, stride_, padding_, groups_);
  }

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  std::size_t cin() const { return cin_; }
  std::size_t cout() const { return cout_; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }
  std::size_t padding() const { return padding_; }
  std::size_t groups() const { return groups_; }

 private:
  std::size_t cin_, cout_, kernel_, stride_, padding_, groups_;
  Tensor weight_;
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths = {16, 32, 64, 64};
  std::vector<std::size_t> strides = {1, 2, 2, 1};
  double bn_momentum = 0.8;
  double bn_eps = 1e-5;
};

// Compact convolutional feature extractor: a stack of
// conv3x3 -> batchnorm(affine) -> relu blocks with a residual skip wherever
// the block preserves shape (stride 1, equal widths), followed by global
// average pooling into an embedding of dimension widths.back().
//
// Forward hooks let adapter modules splice into the computation without
// duplicating the block structure:
//   - ConvHook(block, block_in, conv_out): replaces the 3x3 convolution's
//     output (used to add a parallel 1x1 branch on the block input);
//   - BlockHook(block, block_out): replaces the finished block output (used
//     to add a residual branch over it).
class Backbone {
 public:
  using ConvHook = std::function<Tensor(std::size_t block, const Tensor& block_in, Tensor conv_out)>;
  using BlockHook = std::function<Tensor(std::size_t block, Tensor block_out)>;

  // Widths must be divisible by 8 so the grouped-convolution adapters (group
  // size 8) can always attach.
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.widths.empty()) throw ConfigError("Backbone: widths must be non-empty");
    if (cfg.widths.size() != cfg.strides.size()) {
      throw ConfigError("Backbone: widths (" + std::to_string(cfg.widths.size()) +
                        ") and strides (" + std::to_string(cfg.strides.size()) +
                        ") must have equal length");
    }
    if (cfg.in_channels == 0) throw ConfigError("Backbone: in_channels must be positive");
    std::size_t cin = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      const std::size_t w = cfg.widths[i];
      if (w % 8 != 0) {
        throw ConfigError("Backbone: width " + std::to_string(w) +
                          " at block " + std::to_string(i) + " is not divisible by 8");
      }
      if (cfg.strides[i] == 0) throw ConfigError("Backbone: strides must be positive");
      convs_.emplace_back(cin, w, 3, cfg.strides[i], 1, 1, rng);
      bns_.emplace_back(w, true, cfg.bn_momentum, cfg.bn_eps);
      skip_.push_back(cfg.strides[i] == 1 && cin == w);
      in_widths_.push_back(cin);
      cin = w;
    }
  }

  std::size_t num_blocks() const { return convs_.size(); }
  std::size_t embedding_dim() const { return cfg_.widths.back(); }
  const BackboneConfig& config() const { return cfg_; }
  Conv2d& conv(std::size_t i) { return convs_.at(i); }
  BatchNorm& bn(std::size_t i) { return bns_.at(i); }
  bool has_skip(std::size_t i) const { return skip_.at(i); }
  std::size_t block_in_width(std::size_t i) const { return in_widths_.at(i); }
  std::size_t block_out_width(std::size_t i) const { return cfg_.widths.at(i); }

  // Feature maps after block i for an input x, or the pooled embedding.
  Tensor features(const Tensor& x, BnMode mode, const ConvHook& conv_hook = {},
                  const BlockHook& block_hook = {}) {
    return ops::global_avg_pool(feature_map(x, mode, conv_hook, block_hook));
  }

  Tensor feature_map(const Tensor& x, BnMode mode, const ConvHook& conv_hook = {},
                     const BlockHook& block_hook = {}) {
    if (x.rank() != 4 || x.size(1) != cfg_.in_channels) {
      throw ShapeError("Backbone: expected [N," + std::to_string(cfg_.in_channels) +
                       ",H,W], got " + shape_str(x.shape()));
    }
    Tensor h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = run_block(i, h, mode, conv_hook, block_hook);
    }
    return h;
  }

  Tensor run_block(std::size_t i, const Tensor& block_in, BnMode mode,
                   const ConvHook& conv_hook = {}, const BlockHook& block_hook = {}) {
    Tensor h = convs_[i].forward(block_in);
    if (conv_hook) h = conv_hook(i, block_in, std::move(h));
    h = bns_[i].forward(h, mode);
    if (skip_[i]) h = ops::add(h, block_in);
    h = ops::relu(h);
    if (block_hook) h = block_hook(i, std::move(h));
    return h;
  }

  // Trainable parameters (conv kernels, batchnorm affine); running statistics
  // are buffers and excluded.
  std::vector<Tensor> params() {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.push_back(convs_[i].weight());
      out.push_back(bns_[i].gamma());
      out.push_back(bns_[i].beta());
    }
    return out;
  }

  void set_requires_grad(bool on) {
    for (Tensor& p : params()) p.set_requires_grad(on);
  }

  // Full state (parameters and running statistics) under stable names, in a
  // stable order, for checkpointing.
  std::vector<std::pair<std::string, Tensor>> state() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      const std::string p = "backbone/block" + std::to_string(i) + "/";
      out.emplace_back(p + "conv", convs_[i].weight());
      out.emplace_back(p + "bn/gamma", bns_[i].gamma());
      out.emplace_back(p + "bn/beta", bns_[i].beta());
      out.emplace_back(p + "bn/running_mean", bns_[i].running_mean());
      out.emplace_back(p + "bn/running_var", bns_[i].running_var());
    }
    return out;
  }

  // Copies checkpointed values into this model. Missing names or shape
  // mismatches indicate a checkpoint for a different configuration.
  void load_state(const std::map<std::string, Tensor>& tensors) {
    for (auto& [name, dst] : state()) {
      auto it = tensors.find(name);
      if (it == tensors.end()) {
        throw IoError("backbone state: checkpoint is missing tensor '" + name + "'");
      }
      if (it->second.shape() != dst.shape()) {
        throw IoError("backbone state: tensor '" + name + "' has shape " +
                      shape_str(it->second.shape()) + ", model wants " + shape_str(dst.shape()));
      }
      Tensor d = dst;
      d.data() = it->second.data();
    }
  }

 private:
  BackboneConfig cfg_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm> bns_;
  std::vector<bool> skip_;
  std::vector<std::size_t> in_widths_;
};

// A set of parameters sharing one learning rate.
struct ParamGroup {
  std::vector<Tensor> params;
  double lr = 1.0;
};

namespace detail {

inline void check_param_state(const Tensor& p, std::size_t state_size, const char* opt) {
  if (!p.requires_grad()) {
    throw ContractError(std::string(opt) + ": parameter does not require gradients");
  }
  if (p.numel() != state_size || p.grad().size() != state_size) {
    throw ContractError(std::string(opt) + ": parameter/state size mismatch (state " +
                        std::to_string(state_size) + ", parameter " + std::to_string(p.numel()) +
                        ", gradient " + std::to_string(p.grad().size()) + ")");
  }
}

}  // namespace detail

// SGD with (heavy-ball) momentum and optional L2 weight decay folded into the
// gradient:
//     g' = g + decay * p,   v <- rho * v + g',   p <- p - lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(std::vector<ParamGroup> groups, double momentum = 0.9,
                       double weight_decay = 0.0)
      : groups_(std::move(groups)), rho_(momentum), wd_(weight_decay) {
    for (const ParamGroup& g : groups_) {
      auto& vel = velocity_.emplace_back();
      for (const Tensor& p : g.params) vel.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const double lr = groups_[gi].lr;
      for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
        Tensor& p = groups_[gi].params[pi];
        std::vector<double>& v = velocity_[gi][pi];
        detail::check_param_state(p, v.size(), "SgdMomentum");
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double g = p.grad()[i] + wd_ * p.data()[i];
          v[i] = rho_ * v[i] + g;
          p.data()[i] -= lr * v[i];
        }
      }
    }
  }

  void zero_grad() {
    for (ParamGroup& g : groups_) {
      for (Tensor& p : g.params) p.zero_grad();
    }
  }

  double lr(std::size_t group) const { return groups_.at(group).lr; }
  void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }
  std::size_t num_groups() const { return groups_.size(); }

 private:
  std::vector<ParamGroup> groups_;
  double rho_, wd_;
  std::vector<std::vector<std::vector<double>>> velocity_;
};

// Adadelta: per-element squared-gradient and squared-update accumulators,
//     E[g2] <- rho E[g2] + (1-rho) g2
//     dx    = -sqrt(E[dx2] + eps) / sqrt(E[g2] + eps) * g
//     E[dx2]<- rho E[dx2] + (1-rho) dx2
//     p     <- p + lr * dx.
// The recurrence is per-element, so updates are invariant to how parameters
// are partitioned into tensors or groups (given equal learning rates).
class Adadelta {
 public:
  explicit Adadelta(std::vector<ParamGroup> groups, double rho = 0.9, double eps = 1e-6)
      : groups_(std::move(groups)), rho_(rho), eps_(eps) {
    if (!(rho >= 0.0 && rho < 1.0)) {
      throw ConfigError("Adadelta: rho must lie in [0,1), got " + std::to_string(rho));
    }
    if (eps <= 0.0) throw ConfigError("Adadelta: eps must be positive");
    for (const ParamGroup& g : groups_) {
      auto& e1 = eg2_.emplace_back();
      auto& e2 = edx2_.emplace_back();
      for (const Tensor& p : g.params) {
        e1.emplace_back(p.numel(), 0.0);
        e2.emplace_back(p.numel(), 0.0);
      }
    }
  }

  void step() {
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const double lr = groups_[gi].lr;
      for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
        Tensor& p = groups_[gi].params[pi];
        std::vector<double>& eg2 = eg2_[gi][pi];
        std::vector<double>& edx2 = edx2_[gi][pi];
        detail::check_param_state(p, eg2.size(), "Adadelta");
        for (std::size_t i = 0; i < eg2.size(); ++i) {
          const double g = p.grad()[i];
          eg2[i] = rho_ * eg2[i] + (1.0 - rho_) * g * g;
          const double dx = -std::sqrt(edx2[i] + eps_) / std::sqrt(eg2[i] + eps_) * g;
          edx2[i] = rho_ * edx2[i] + (1.0 - rho_) * dx * dx;
          p.data()[i] += lr * dx;
        }
      }
    }
  }

  void zero_grad() {
    for (ParamGroup& g : groups_) {
      for (Tensor& p : g.params) p.zero_grad();
    }
  }

  double lr(std::size_t group) const { return groups_.at(group).lr; }
  void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }
  std::size_t num_groups() const { return groups_.size(); }

  // State inspection (diagnostics and tests).
  const std::vector<double>& sq_grad_avg(std::size_t group, std::size_t param) const {
    return eg2_.at(group).at(param);
  }
  const std::vector<double>& sq_update_avg(std::size_t group, std::size_t param) const {
    return edx2_.at(group).at(param);
  }

 private:
  std::vector<ParamGroup> groups_;
  double rho_, eps_;
  std::vector<std::vector<std::vector<double>>> eg2_, edx2_;
};

// Cosine annealing from lr_max at t=0 to lr_min at t=total.
inline double cosine_lr(std::size_t t, std::size_t total, double lr_max, double lr_min = 0.0) {
  if (total == 0) throw ConfigError("cosine_lr: total step count must be positive");
  const double frac = std::min(static_cast<double>(t) / static_cast<double>(total), 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

}  // namespace prolad::nn
