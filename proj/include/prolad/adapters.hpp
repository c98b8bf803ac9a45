#pragma once

// Task adapters attachable to a frozen feature extractor:
//   - TAAdapter: a 1x1 convolution in parallel with every 3x3 convolution,
//     initialized near zero so the adapted forward starts at the base forward;
//   - TANAdapter: a per-block residual branch, by default a standardization
//     layer (batchnorm without affine) followed by a grouped 3x3 convolution,
//     y = B(x) + GroupConv(SN(B(x)));
//   - AdapterVariant: the six-way family obtained by toggling the
//     standardization layer and swapping the branch transform (per-channel
//     affine, 1x1 convolution, grouped 3x3 convolution).

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "prolad/errors.hpp"
#include "prolad/nn.hpp"
#include "prolad/ops.hpp"
#include "prolad/rng.hpp"
#include "prolad/tensor.hpp"

namespace prolad::adapters {

inline constexpr std::size_t kGroupSize = 8;
inline constexpr double kTaInitStd = 1e-5;
inline constexpr double kTanInitStd = 1e-4;

enum class AdapterVariant { FiLM, Conv1x1, GroupConv, SnFiLM, SnConv1x1, SnGroupConv };

enum class BranchTransform { FiLM, Conv1x1, GroupConv };

inline bool variant_has_sn(AdapterVariant v) {
  return v == AdapterVariant::SnFiLM || v == AdapterVariant::SnConv1x1 ||
         v == AdapterVariant::SnGroupConv;
}

inline BranchTransform variant_transform(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::FiLM:
    case AdapterVariant::SnFiLM:
      return BranchTransform::FiLM;
    case AdapterVariant::Conv1x1:
    case AdapterVariant::SnConv1x1:
      return BranchTransform::Conv1x1;
    default:
      return BranchTransform::GroupConv;
  }
}

inline std::string variant_name(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::FiLM: return "film";
    case AdapterVariant::Conv1x1: return "conv1x1";
    case AdapterVariant::GroupConv: return "groupconv";
    case AdapterVariant::SnFiLM: return "sn+film";
    case AdapterVariant::SnConv1x1: return "sn+conv1x1";
    case AdapterVariant::SnGroupConv: return "sn+groupconv";
  }
  throw ContractError("variant_name: unreachable");
}

inline AdapterVariant variant_from_name(const std::string& name) {
  for (AdapterVariant v : {AdapterVariant::FiLM, AdapterVariant::Conv1x1,
                           AdapterVariant::GroupConv, AdapterVariant::SnFiLM,
                           AdapterVariant::SnConv1x1, AdapterVariant::SnGroupConv}) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown adapter variant '" + name +
                    "' (expected film|conv1x1|groupconv|sn+film|sn+conv1x1|sn+groupconv)");
}

namespace detail {

// Shape fingerprint of the extractor an adapter was built for, used to reject
// attaching an adapter to a differently-configured model.
struct NetFingerprint {
  std::vector<std::size_t> in_widths, out_widths, strides;

  static NetFingerprint of(nn::Backbone& net) {
    NetFingerprint fp;
    for (std::size_t i = 0; i < net.num_blocks(); ++i) {
      fp.in_widths.push_back(net.block_in_width(i));
      fp.out_widths.push_back(net.block_out_width(i));
      fp.strides.push_back(net.conv(i).stride());
    }
    return fp;
  }

  bool operator==(const NetFingerprint&) const = default;
};

}  // namespace detail

// Weight adapter: one 1x1 convolution per 3x3 convolution site, applied to
// the site's input and added to the 3x3 output. Strides mirror the host
// convolution so spatial shapes agree. Parameters phi_w.
class TAAdapter {
 public:
  TAAdapter(nn::Backbone& net, Rng& rng, double init_std = kTaInitStd)
      : fingerprint_(detail::NetFingerprint::of(net)) {
    for (std::size_t i = 0; i < net.num_blocks(); ++i) {
      convs_.emplace_back(net.block_in_width(i), net.block_out_width(i), 1,
                          net.conv(i).stride(), 0, 1, rng, init_std);
    }
  }

  std::size_t num_sites() const { return convs_.size(); }

  Tensor site_forward(std::size_t block, const Tensor& block_in) const {
    return convs_.at(block).forward(block_in);
  }

  std::size_t site_param_count(std::size_t block) const {
    return convs_.at(block).weight().numel();
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const nn::Conv2d& c : convs_) n += c.weight().numel();
    return n;
  }

  std::vector<Tensor> params() {
    std::vector<Tensor> out;
    for (nn::Conv2d& c : convs_) out.push_back(c.weight());
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> state() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.emplace_back("ta/site" + std::to_string(i), convs_[i].weight());
    }
    return out;
  }

  const detail::NetFingerprint& fingerprint() const { return fingerprint_; }

 private:
  detail::NetFingerprint fingerprint_;
  std::vector<nn::Conv2d> convs_;
};

// Normalization adapter: per-block residual branch T(S(B)) over the block
// output B, where S is a standardization layer (batchnorm without affine,
// present in the sn+* variants) and T is the variant's transform. The default
// sn+groupconv configuration is the normalization adapter proper. Parameters
// phi_n.
class TANAdapter {
 public:
  TANAdapter(nn::Backbone& net, Rng& rng, AdapterVariant variant = AdapterVariant::SnGroupConv,
             std::size_t group_size = kGroupSize, double conv_init_std = kTanInitStd,
             double sn_momentum = 0.8)
      : variant_(variant), fingerprint_(detail::NetFingerprint::of(net)) {
    const BranchTransform t = variant_transform(variant);
    for (std::size_t i = 0; i < net.num_blocks(); ++i) {
      const std::size_t c = net.block_out_width(i);
      if (t == BranchTransform::GroupConv && c % group_size != 0) {
        throw ConfigError("TANAdapter: width " + std::to_string(c) +
                          " is not divisible by group size " + std::to_string(group_size));
      }
      if (variant_has_sn(variant)) sns_.emplace_back(c, false, sn_momentum);
      switch (t) {
        case BranchTransform::FiLM:
          // Identity transform at init: scale 1, shift 0.
          film_scale_.push_back(Tensor::full({c}, 1.0, true));
          film_shift_.push_back(Tensor::zeros({c}, true));
          break;
        case BranchTransform::Conv1x1:
          convs_.emplace_back(c, c, 1, 1, 0, 1, rng, conv_init_std);
          break;
        case BranchTransform::GroupConv:
          convs_.emplace_back(c, c, 3, 1, 1, c / group_size, rng, conv_init_std);
          break;
      }
    }
  }

  AdapterVariant variant() const { return variant_; }
  std::size_t num_blocks() const { return fingerprint_.out_widths.size(); }

  // The residual branch value T(S(B)) for one block.
  Tensor branch(std::size_t block, const Tensor& block_out, nn::BnMode mode) {
    Tensor z = block_out;
    if (!sns_.empty()) z = sns_.at(block).forward(z, mode);
    switch (variant_transform(variant_)) {
      case BranchTransform::FiLM:
        return ops::channel_affine(z, film_scale_.at(block), film_shift_.at(block));
      default:
        return convs_.at(block).forward(z);
    }
  }

  nn::BatchNorm& sn(std::size_t block) {
    if (sns_.empty()) throw ContractError("TANAdapter: variant has no standardization layer");
    return sns_.at(block);
  }

  std::size_t block_param_count(std::size_t block) const {
    if (variant_transform(variant_) == BranchTransform::FiLM) {
      return film_scale_.at(block).numel() + film_shift_.at(block).numel();
    }
    return convs_.at(block).weight().numel();
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < num_blocks(); ++i) n += block_param_count(i);
    return n;
  }

  std::vector<Tensor> params() {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < num_blocks(); ++i) {
      if (variant_transform(variant_) == BranchTransform::FiLM) {
        out.push_back(film_scale_[i]);
        out.push_back(film_shift_[i]);
      } else {
        out.push_back(convs_[i].weight());
      }
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> state() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < num_blocks(); ++i) {
      const std::string p = "tan/block" + std::to_string(i) + "/";
      if (!sns_.empty()) {
        out.emplace_back(p + "sn/running_mean", sns_[i].running_mean());
        out.emplace_back(p + "sn/running_var", sns_[i].running_var());
      }
      switch (variant_transform(variant_)) {
        case BranchTransform::FiLM:
          out.emplace_back(p + "film_scale", film_scale_[i]);
          out.emplace_back(p + "film_shift", film_shift_[i]);
          break;
        case BranchTransform::Conv1x1:
          out.emplace_back(p + "conv1x1", convs_[i].weight());
          break;
        case BranchTransform::GroupConv:
          out.emplace_back(p + "gc", convs_[i].weight());
          break;
      }
    }
    return out;
  }

  const detail::NetFingerprint& fingerprint() const { return fingerprint_; }

 private:
  AdapterVariant variant_;
  detail::NetFingerprint fingerprint_;
  std::vector<nn::BatchNorm> sns_;
  std::vector<nn::Conv2d> convs_;
  std::vector<Tensor> film_scale_, film_shift_;
};

// A frozen extractor with adapters spliced into its forward pass. The model
// does not own the extractor or the adapters; the caller keeps them alive for
// the adaptation episode. The extractor's own normalization layers always run
// on their frozen running statistics, so with both adapters detached the
// forward is a function of the frozen parameters only; the mode argument of
// the forward methods applies to the adapter's standardization layers.
class AdaptedModel {
 public:
  AdaptedModel(nn::Backbone* net, TAAdapter* ta, TANAdapter* tan)
      : net_(net), ta_(ta), tan_(tan) {}

  Tensor features(const Tensor& x, nn::BnMode adapter_mode) {
    return ops::global_avg_pool(feature_map(x, adapter_mode));
  }

  Tensor feature_map(const Tensor& x, nn::BnMode adapter_mode) {
    nn::Backbone::ConvHook conv_hook;
    nn::Backbone::BlockHook block_hook;
    if (ta_) {
      conv_hook = [this](std::size_t i, const Tensor& block_in, Tensor conv_out) {
        return ops::add(conv_out, ta_->site_forward(i, block_in));
      };
    }
    if (tan_) {
      block_hook = [this, adapter_mode](std::size_t i, Tensor block_out) {
        return ops::add(block_out, tan_->branch(i, block_out, adapter_mode));
      };
    }
    return net_->feature_map(x, nn::BnMode::Inference, conv_hook, block_hook);
  }

  nn::Backbone& backbone() { return *net_; }
  TAAdapter* ta() { return ta_; }
  TANAdapter* tan() { return tan_; }

  void set_alignment(Tensor c) { alignment_ = std::move(c); }
  bool has_alignment() const { return alignment_.defined(); }
  Tensor& alignment() {
    if (!alignment_.defined()) throw ContractError("AdaptedModel: no alignment matrix set");
    return alignment_;
  }

  // Trainable parameter sets by name, in a stable order: the weight adapter
  // ("ta"), the normalization adapter ("tan"), the alignment matrix
  // ("align"); only the attached ones appear. The frozen extractor never
  // contributes.
  std::vector<std::pair<std::string, std::vector<Tensor>>> trainable_params() {
    std::vector<std::pair<std::string, std::vector<Tensor>>> out;
    if (ta_) out.emplace_back("ta", ta_->params());
    if (tan_) out.emplace_back("tan", tan_->params());
    if (alignment_.defined()) out.emplace_back("align", std::vector<Tensor>{alignment_});
    return out;
  }

 private:
  nn::Backbone* net_;
  TAAdapter* ta_;
  TANAdapter* tan_;
  Tensor alignment_;
};

// Validates adapter/extractor shape agreement, freezes the extractor's
// parameters, and returns the spliced model.
inline AdaptedModel attach(nn::Backbone& net, TAAdapter* ta, TANAdapter* tan) {
  const detail::NetFingerprint fp = detail::NetFingerprint::of(net);
  if (ta && !(ta->fingerprint() == fp)) {
    throw ConfigError("attach: weight adapter was built for a different extractor configuration");
  }
  if (tan && !(tan->fingerprint() == fp)) {
    throw ConfigError(
        "attach: normalization adapter was built for a different extractor configuration");
  }
  net.set_requires_grad(false);
  return AdaptedModel(&net, ta, tan);
}

}  // namespace prolad::adapters
