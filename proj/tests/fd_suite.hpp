#pragma once

// Central-finite-difference gradient suite shared by the unit tests and the
// acceptance runner. Every differentiable primitive and the composed layers
// get >= 20 seeded cases; the acceptance bound is
//   |analytic - fd| / max(|fd|, 1e-8) < 1e-4  with h = 1e-5.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "prolad/ops.hpp"
#include "prolad/rng.hpp"
#include "prolad/tape.hpp"
#include "prolad/tensor.hpp"
#include "test_util.hpp"

namespace fdsuite {

constexpr double kStep = 1e-5;
constexpr double kTolerance = 1e-4;

// Analytic grads via one taped backward, then per-element central differences.
inline double fd_max_rel_err(std::vector<prolad::Tensor> leaves,
                             const std::function<prolad::Tensor()>& f, double h = kStep) {
  for (auto& p : leaves) p.zero_grad();
  {
    prolad::Tape tape;
    prolad::Tensor loss = f();
    tape.backward(loss);
  }
  double max_err = 0.0;
  for (auto& p : leaves) {
    auto& data = p.data();
    const auto& grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = f().item();
      data[i] = orig - h;
      const double fm = f().item();
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(grad[i] - fd) / std::max(std::abs(fd), 1e-8);
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

namespace detail {

using prolad::Rng;
using prolad::Shape;
using prolad::Tensor;
namespace ops = prolad::ops;

// Scalarizes an arbitrary output with fixed random weights so every output
// element receives a distinct adjoint.
inline std::function<prolad::Tensor()> weighted(const std::function<Tensor()>& f, Rng& rng,
                                                const Shape& out_shape) {
  Tensor w = testutil::random_tensor(rng, out_shape, -1.0, 1.0);
  return [f, w]() { return ops::sum(ops::mul(f(), w)); };
}

inline double case_add(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 1));
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  return fd_max_rel_err({a, b}, weighted([a, b]() { return ops::add(a, b); }, rng, {3, 4}));
}

inline double case_sub(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 2));
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  return fd_max_rel_err({a, b}, weighted([a, b]() { return ops::sub(a, b); }, rng, {3, 4}));
}

inline double case_mul(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 3));
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  return fd_max_rel_err({a, b}, weighted([a, b]() { return ops::mul(a, b); }, rng, {3, 4}));
}

inline double case_mul_scalar(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 4));
  Tensor a = testutil::random_tensor(rng, {2, 5}, -1, 1, true);
  const double c = rng.uniform(-2.0, 2.0);
  return fd_max_rel_err({a}, weighted([a, c]() { return ops::mul_scalar(a, c); }, rng, {2, 5}));
}

inline double case_add_scalar(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 5));
  Tensor a = testutil::random_tensor(rng, {2, 5}, -1, 1, true);
  const double c = rng.uniform(-2.0, 2.0);
  return fd_max_rel_err({a}, weighted([a, c]() { return ops::add_scalar(a, c); }, rng, {2, 5}));
}

inline double case_log(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 6));
  Tensor a = testutil::random_tensor(rng, {3, 4}, 0.2, 2.0, true);
  return fd_max_rel_err({a}, weighted([a]() { return ops::log(a); }, rng, {3, 4}));
}

inline double case_exp(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 7));
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1.0, 1.0, true);
  return fd_max_rel_err({a}, weighted([a]() { return ops::exp(a); }, rng, {3, 4}));
}

inline double case_relu(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 8));
  Tensor a = testutil::random_tensor_off_zero(rng, {3, 4}, 0.1, 1.0, true);
  return fd_max_rel_err({a}, weighted([a]() { return ops::relu(a); }, rng, {3, 4}));
}

inline double case_sum(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 9));
  Tensor a = testutil::random_tensor(rng, {7}, -1, 1, true);
  return fd_max_rel_err({a}, [a]() { return ops::sum(a); });
}

inline double case_mean(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 10));
  Tensor a = testutil::random_tensor(rng, {7}, -1, 1, true);
  return fd_max_rel_err({a}, [a]() { return ops::mean(a); });
}

inline double case_reshape(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 11));
  Tensor a = testutil::random_tensor(rng, {2, 6}, -1, 1, true);
  return fd_max_rel_err(
      {a}, weighted([a]() { return ops::reshape(a, {3, 4}); }, rng, {3, 4}));
}

inline double case_concat(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 12));
  Tensor a = testutil::random_tensor(rng, {2, 3}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {2, 3}, -1, 1, true);
  const std::size_t axis = seed % 2;
  const Shape out = axis == 0 ? Shape{4, 3} : Shape{2, 6};
  return fd_max_rel_err(
      {a, b},
      weighted([a, b, axis]() { return ops::concat({a, b}, axis); }, rng, out));
}

inline double case_matmul(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 13));
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {4, 5}, -1, 1, true);
  return fd_max_rel_err({a, b}, weighted([a, b]() { return ops::matmul(a, b); }, rng, {3, 5}));
}

inline double case_matmul_nt(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 14));
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {5, 4}, -1, 1, true);
  return fd_max_rel_err({a, b}, weighted([a, b]() { return ops::matmul_nt(a, b); }, rng, {3, 5}));
}

inline double case_conv3x3(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 15));
  Tensor x = testutil::random_tensor(rng, {2, 3, 6, 6}, -1, 1, true);
  Tensor w = testutil::random_tensor(rng, {4, 3, 3, 3}, -1, 1, true);
  return fd_max_rel_err(
      {x, w}, weighted([x, w]() { return ops::conv2d(x, w, 1, 1, 1); }, rng, {2, 4, 6, 6}));
}

inline double case_conv3x3_stride2(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 16));
  Tensor x = testutil::random_tensor(rng, {2, 3, 7, 7}, -1, 1, true);
  Tensor w = testutil::random_tensor(rng, {4, 3, 3, 3}, -1, 1, true);
  return fd_max_rel_err(
      {x, w}, weighted([x, w]() { return ops::conv2d(x, w, 2, 1, 1); }, rng, {2, 4, 4, 4}));
}

inline double case_conv1x1(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 17));
  Tensor x = testutil::random_tensor(rng, {2, 4, 5, 5}, -1, 1, true);
  Tensor w = testutil::random_tensor(rng, {6, 4, 1, 1}, -1, 1, true);
  return fd_max_rel_err(
      {x, w}, weighted([x, w]() { return ops::conv2d(x, w, 1, 0, 1); }, rng, {2, 6, 5, 5}));
}

inline double case_conv1x1_stride2(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 18));
  Tensor x = testutil::random_tensor(rng, {2, 4, 5, 5}, -1, 1, true);
  Tensor w = testutil::random_tensor(rng, {6, 4, 1, 1}, -1, 1, true);
  return fd_max_rel_err(
      {x, w}, weighted([x, w]() { return ops::conv2d(x, w, 2, 0, 1); }, rng, {2, 6, 3, 3}));
}

inline double case_conv_grouped(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 19));
  Tensor x = testutil::random_tensor(rng, {2, 8, 5, 5}, -1, 1, true);
  Tensor w = testutil::random_tensor(rng, {8, 4, 3, 3}, -1, 1, true);
  return fd_max_rel_err(
      {x, w}, weighted([x, w]() { return ops::conv2d(x, w, 1, 1, 2); }, rng, {2, 8, 5, 5}));
}

inline double case_global_avg_pool(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 20));
  Tensor x = testutil::random_tensor(rng, {2, 5, 4, 4}, -1, 1, true);
  return fd_max_rel_err({x}, weighted([x]() { return ops::global_avg_pool(x); }, rng, {2, 5}));
}

inline double case_softmax(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 21));
  Tensor x = testutil::random_tensor(rng, {4, 5}, -2, 2, true);
  return fd_max_rel_err({x}, weighted([x]() { return ops::softmax(x); }, rng, {4, 5}));
}

inline double case_l2_norm_rows(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 22));
  Tensor x = testutil::random_tensor_off_zero(rng, {4, 6}, 0.2, 1.0, true);
  return fd_max_rel_err({x}, weighted([x]() { return ops::l2_norm(x, 1); }, rng, {4}));
}

inline double case_l2_norm_cols(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 23));
  Tensor x = testutil::random_tensor_off_zero(rng, {4, 6}, 0.2, 1.0, true);
  return fd_max_rel_err({x}, weighted([x]() { return ops::l2_norm(x, 0); }, rng, {6}));
}

inline double case_row_normalize(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 24));
  Tensor x = testutil::random_tensor_off_zero(rng, {4, 6}, 0.2, 1.0, true);
  return fd_max_rel_err({x}, weighted([x]() { return ops::row_normalize(x); }, rng, {4, 6}));
}

inline double case_add_rowvec(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 25));
  Tensor x = testutil::random_tensor(rng, {4, 5}, -1, 1, true);
  Tensor b = testutil::random_tensor(rng, {5}, -1, 1, true);
  return fd_max_rel_err({x, b},
                        weighted([x, b]() { return ops::add_rowvec(x, b); }, rng, {4, 5}));
}

inline double case_channel_affine(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 26));
  Tensor x = testutil::random_tensor(rng, {2, 4, 3, 3}, -1, 1, true);
  Tensor s = testutil::random_tensor_off_zero(rng, {4}, 0.3, 1.0, true);
  Tensor b = testutil::random_tensor(rng, {4}, -1, 1, true);
  return fd_max_rel_err(
      {x, s, b},
      weighted([x, s, b]() { return ops::channel_affine(x, s, b); }, rng, {2, 4, 3, 3}));
}

inline double case_batch_norm_train(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 27));
  Tensor x = testutil::random_tensor(rng, {3, 4, 3, 3}, -1, 1, true);
  return fd_max_rel_err(
      {x}, weighted([x]() { return ops::batch_norm_train(x, 1e-5, nullptr, nullptr); }, rng,
                    {3, 4, 3, 3}));
}

inline double case_cross_entropy(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 28));
  Tensor logits = testutil::random_tensor(rng, {5, 4}, -2, 2, true);
  const auto labels = testutil::random_labels(rng, 5, 4);
  return fd_max_rel_err({logits}, [logits, labels]() {
    return ops::cross_entropy(logits, labels);
  });
}

inline double case_cosine_batch(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 29));
  Tensor f = testutil::random_tensor_off_zero(rng, {4, 6}, 0.2, 1.0, true);
  Tensor t = testutil::random_tensor_off_zero(rng, {4, 6}, 0.2, 1.0, false);
  return fd_max_rel_err({f}, [f, t]() { return ops::cosine_batch(f, t); });
}

inline double case_row_group_mean(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 30));
  Tensor x = testutil::random_tensor(rng, {6, 4}, -1, 1, true);
  const auto labels = testutil::covering_labels(rng, 6, 3);
  return fd_max_rel_err(
      {x}, weighted([x, labels]() { return ops::row_group_mean(x, labels, 3); }, rng, {3, 4}));
}

// conv3x3 -> batchnorm(train) -> affine -> relu, the backbone block shape.
// Inputs are re-drawn until every pre-relu value clears the kink by 1e-3.
inline double case_block_conv_bn_relu(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(prolad::derive_seed(seed + 7919 * attempt, 31));
    Tensor x = testutil::random_tensor(rng, {2, 3, 4, 4}, -1, 1, true);
    Tensor w = testutil::random_tensor(rng, {4, 3, 3, 3}, -1, 1, true);
    Tensor gamma = testutil::random_tensor_off_zero(rng, {4}, 0.5, 0.5, true);
    Tensor beta = testutil::random_tensor(rng, {4}, -0.3, 0.3, true);
    auto pre_relu = [x, w, gamma, beta]() {
      Tensor y = ops::conv2d(x, w, 1, 1, 1);
      y = ops::batch_norm_train(y, 1e-5, nullptr, nullptr);
      return ops::channel_affine(y, gamma, beta);
    };
    const Tensor probe = pre_relu();  // keep alive: range-for over a temporary's data dangles
    double closest = 1e30;
    for (double v : probe.data()) closest = std::min(closest, std::abs(v));
    if (closest < 1e-3) continue;  // too near the relu kink for fd
    return fd_max_rel_err(
        {x, w, gamma, beta},
        weighted([pre_relu]() { return ops::relu(pre_relu()); }, rng, {2, 4, 4, 4}));
  }
}

// x + groupconv(batchnorm(x)): the normalize-then-convolve residual branch.
inline double case_block_residual_grouped(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 32));
  Tensor x = testutil::random_tensor(rng, {2, 8, 4, 4}, -1, 1, true);
  Tensor w = testutil::random_tensor(rng, {8, 4, 3, 3}, -0.5, 0.5, true);
  auto f = [x, w]() {
    Tensor y = ops::batch_norm_train(x, 1e-5, nullptr, nullptr);
    return ops::add(x, ops::conv2d(y, w, 1, 1, 2));
  };
  return fd_max_rel_err({x, w}, weighted(f, rng, {2, 8, 4, 4}));
}

// Aligned embeddings -> class prototypes -> scaled-cosine logits -> CE.
inline double case_proto_head_ce(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 33));
  Tensor emb = testutil::random_tensor_off_zero(rng, {6, 5}, 0.2, 1.0, true);
  Tensor align = testutil::random_tensor(rng, {5, 5}, -0.7, 0.7, true);
  const auto labels = testutil::covering_labels(rng, 6, 3);
  return fd_max_rel_err({emb, align}, [emb, align, labels]() {
    Tensor aligned = ops::matmul_nt(emb, align);
    Tensor protos = ops::row_group_mean(aligned, labels, 3);
    Tensor logits =
        ops::mul_scalar(ops::matmul_nt(ops::row_normalize(aligned), ops::row_normalize(protos)),
                        10.0);
    return ops::cross_entropy(logits, labels);
  });
}

// 1 - mean cosine to a fixed teacher through a linear feature map.
inline double case_cosine_loss_composed(std::uint64_t seed) {
  Rng rng(prolad::derive_seed(seed, 34));
  Tensor x = testutil::random_tensor(rng, {4, 3}, -1, 1, true);
  Tensor w = testutil::random_tensor_off_zero(rng, {6, 3}, 0.2, 0.8, true);
  Tensor t = testutil::random_tensor_off_zero(rng, {4, 6}, 0.2, 1.0, false);
  return fd_max_rel_err({x, w}, [x, w, t]() {
    Tensor emb = ops::matmul_nt(x, w);
    return ops::add_scalar(ops::mul_scalar(ops::cosine_batch(emb, t), -1.0), 1.0);
  });
}

}  // namespace detail

struct SuiteEntry {
  std::string name;
  std::function<double(std::uint64_t)> run;
};

inline const std::vector<SuiteEntry>& all_cases() {
  static const std::vector<SuiteEntry> cases = {
      {"add", detail::case_add},
      {"sub", detail::case_sub},
      {"mul", detail::case_mul},
      {"mul_scalar", detail::case_mul_scalar},
      {"add_scalar", detail::case_add_scalar},
      {"log", detail::case_log},
      {"exp", detail::case_exp},
      {"relu", detail::case_relu},
      {"sum", detail::case_sum},
      {"mean", detail::case_mean},
      {"reshape", detail::case_reshape},
      {"concat", detail::case_concat},
      {"matmul", detail::case_matmul},
      {"matmul_nt", detail::case_matmul_nt},
      {"conv2d_3x3", detail::case_conv3x3},
      {"conv2d_3x3_stride2", detail::case_conv3x3_stride2},
      {"conv2d_1x1", detail::case_conv1x1},
      {"conv2d_1x1_stride2", detail::case_conv1x1_stride2},
      {"conv2d_grouped", detail::case_conv_grouped},
      {"global_avg_pool", detail::case_global_avg_pool},
      {"softmax", detail::case_softmax},
      {"l2_norm_rows", detail::case_l2_norm_rows},
      {"l2_norm_cols", detail::case_l2_norm_cols},
      {"row_normalize", detail::case_row_normalize},
      {"add_rowvec", detail::case_add_rowvec},
      {"channel_affine", detail::case_channel_affine},
      {"batch_norm_train", detail::case_batch_norm_train},
      {"cross_entropy", detail::case_cross_entropy},
      {"cosine_batch", detail::case_cosine_batch},
      {"row_group_mean", detail::case_row_group_mean},
      {"block_conv_bn_relu", detail::case_block_conv_bn_relu},
      {"block_residual_grouped", detail::case_block_residual_grouped},
      {"proto_head_ce", detail::case_proto_head_ce},
      {"cosine_loss_composed", detail::case_cosine_loss_composed},
  };
  return cases;
}

struct SuiteResult {
  std::string name;
  std::size_t cases;
  double max_rel_err;
};

inline std::vector<SuiteResult> run_suite(std::size_t cases_per_entry = 20) {
  std::vector<SuiteResult> results;
  for (const auto& entry : all_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < cases_per_entry; ++seed) {
      worst = std::max(worst, entry.run(seed));
    }
    results.push_back({entry.name, cases_per_entry, worst});
  }
  return results;
}

}  // namespace fdsuite
