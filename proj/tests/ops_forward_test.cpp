#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "prolad/ops.hpp"
#include "prolad/rng.hpp"
#include "prolad/tensor.hpp"
#include "test_util.hpp"

namespace ops = prolad::ops;
using prolad::Rng;
using prolad::Shape;
using prolad::Tensor;

namespace {

// Direct seven-loop convolution, the independent oracle for the im2col path.
Tensor conv2d_naive(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                    std::size_t groups) {
  const std::size_t N = x.size(0), Cin = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Cout = w.size(0), KH = w.size(2), KW = w.size(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1;
  const std::size_t OW = (W + 2 * pad - KW) / stride + 1;
  const std::size_t CinG = Cin / groups, CoutG = Cout / groups;
  Tensor out = Tensor::zeros({N, Cout, OH, OW});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Cout; ++co) {
      const std::size_t g = co / CoutG;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < CinG; ++ci) {
            for (std::size_t r = 0; r < KH; ++r) {
              for (std::size_t s = 0; s < KW; ++s) {
                const long ih = static_cast<long>(oh * stride + r) - static_cast<long>(pad);
                const long iw = static_cast<long>(ow * stride + s) - static_cast<long>(pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W))
                  continue;
                acc += x.data()[((n * Cin + g * CinG + ci) * H + ih) * W + iw] *
                       w.data()[((co * CinG + ci) * KH + r) * KW + s];
              }
            }
          }
          out.data()[((n * Cout + co) * OH + oh) * OW + ow] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST(Forward, SoftmaxUniformRows) {
  Tensor x = Tensor::zeros({5});
  Tensor y = ops::softmax(x);
  for (double v : y.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Forward, SoftmaxSimplexProperty) {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x = testutil::random_tensor(rng, {6, 9}, -30, 30);
    Tensor y = ops::softmax(x);
    for (std::size_t n = 0; n < 6; ++n) {
      double s = 0.0;
      for (std::size_t k = 0; k < 9; ++k) {
        const double v = y.data()[n * 9 + k];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Forward, ConvIdentity1x1KernelPreservesInput) {
  Rng rng(3);
  Tensor x = testutil::random_tensor(rng, {2, 3, 5, 5}, -1, 1);
  // identity map: w[c,c,0,0] = 1
  Tensor w = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.data()[c * 3 + c] = 1.0;
  Tensor y = ops::conv2d(x, w, 1, 0, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Forward, ConvGroupedParameterCount) {
  // groups=2, channels 16->16: each group holds 8x8x3x3 weights, 1152 total.
  Tensor w = Tensor::zeros({16, 8, 3, 3});
  EXPECT_EQ(w.numel(), 1152u);
  EXPECT_EQ(8u * 8u * 3u * 3u, 576u);
  Tensor x = Tensor::zeros({1, 16, 4, 4});
  Tensor y = ops::conv2d(x, w, 1, 1, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 16, 4, 4}));
}

TEST(Forward, ConvMatchesNaiveReference) {
  Rng rng(17);
  struct Case {
    Shape x, w;
    std::size_t stride, pad, groups;
  };
  const std::vector<Case> cases = {
      {{2, 3, 6, 6}, {4, 3, 3, 3}, 1, 1, 1},   {{2, 3, 7, 7}, {4, 3, 3, 3}, 2, 1, 1},
      {{1, 4, 5, 5}, {6, 4, 1, 1}, 1, 0, 1},   {{2, 4, 5, 5}, {6, 4, 1, 1}, 2, 0, 1},
      {{2, 8, 5, 5}, {8, 4, 3, 3}, 1, 1, 2},   {{1, 8, 6, 6}, {16, 1, 3, 3}, 1, 1, 8},
      {{2, 6, 8, 8}, {6, 2, 5, 5}, 2, 2, 3},   {{1, 2, 4, 4}, {2, 2, 3, 3}, 1, 0, 1},
  };
  for (const auto& c : cases) {
    Tensor x = testutil::random_tensor(rng, c.x, -1, 1);
    Tensor w = testutil::random_tensor(rng, c.w, -1, 1);
    Tensor got = ops::conv2d(x, w, c.stride, c.pad, c.groups);
    Tensor want = conv2d_naive(x, w, c.stride, c.pad, c.groups);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) {
      EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
    }
  }
}

TEST(Forward, ConvErrorCases) {
  Tensor x = Tensor::zeros({1, 6, 4, 4});
  Tensor w_bad_groups = Tensor::zeros({4, 2, 3, 3});
  EXPECT_THROW(ops::conv2d(x, w_bad_groups, 1, 1, 4), prolad::ConfigError);
  Tensor w_bad_cin = Tensor::zeros({4, 5, 3, 3});
  EXPECT_THROW(ops::conv2d(x, w_bad_cin, 1, 1, 1), prolad::ShapeError);
  Tensor w_too_big = Tensor::zeros({4, 6, 7, 7});
  EXPECT_THROW(ops::conv2d(x, w_too_big, 1, 0, 1), prolad::ShapeError);
}

TEST(Forward, MatmulMatchesNaive) {
  Rng rng(5);
  Tensor a = testutil::random_tensor(rng, {3, 4}, -1, 1);
  Tensor b = testutil::random_tensor(rng, {4, 5}, -1, 1);
  Tensor y = ops::matmul(a, b);
  Tensor ynt = ops::matmul_nt(a, Tensor::from_data({5, 4}, [&] {
                                std::vector<double> t(20);
                                for (std::size_t i = 0; i < 4; ++i)
                                  for (std::size_t j = 0; j < 5; ++j) t[j * 4 + i] = b.data()[i * 5 + j];
                                return t;
                              }()));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += a.data()[i * 4 + k] * b.data()[k * 5 + j];
      EXPECT_NEAR(y.data()[i * 5 + j], acc, 1e-13);
      EXPECT_NEAR(ynt.data()[i * 5 + j], acc, 1e-13);
    }
  }
  EXPECT_THROW(ops::matmul(a, a), prolad::ShapeError);
}

TEST(Forward, GlobalAvgPoolAndReshape) {
  Tensor x = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor y = ops::global_avg_pool(x);
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(y.data()[0], 2.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 25.0);
  Tensor r = ops::reshape(x, {2, 4});
  EXPECT_EQ(r.shape(), (Shape{2, 4}));
  EXPECT_DOUBLE_EQ(r.data()[5], 20.0);
  EXPECT_THROW(ops::reshape(x, {3, 3}), prolad::ShapeError);
}

TEST(Forward, ConcatAxes) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor y0 = ops::concat({a, b}, 0);
  EXPECT_EQ(y0.shape(), (Shape{4, 2}));
  EXPECT_DOUBLE_EQ(y0.data()[4], 5.0);
  Tensor y1 = ops::concat({a, b}, 1);
  EXPECT_EQ(y1.shape(), (Shape{2, 4}));
  const std::vector<double> want = {1, 2, 5, 6, 3, 4, 7, 8};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_DOUBLE_EQ(y1.data()[i], want[i]);
  Tensor c = Tensor::zeros({3, 2});
  EXPECT_THROW(ops::concat({a, c}, 1), prolad::ShapeError);
}

TEST(Forward, L2NormValues) {
  Tensor x = Tensor::from_data({2, 2}, {3, 4, 6, 8});
  Tensor rows = ops::l2_norm(x, 1);
  EXPECT_DOUBLE_EQ(rows.data()[0], 5.0);
  EXPECT_DOUBLE_EQ(rows.data()[1], 10.0);
  Tensor cols = ops::l2_norm(x, 0);
  EXPECT_NEAR(cols.data()[0], std::sqrt(45.0), 1e-12);
  EXPECT_NEAR(cols.data()[1], std::sqrt(80.0), 1e-12);
  Tensor v = ops::l2_norm(Tensor::from_data({3}, {1, 2, 2}));
  EXPECT_DOUBLE_EQ(v.item(), 3.0);
}

TEST(Forward, CrossEntropyUniformIsLogK) {
  Tensor logits = Tensor::zeros({3, 5});
  Tensor loss = ops::cross_entropy(logits, {0, 2, 4});
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-12);
}

TEST(Forward, CrossEntropyMarginLimit) {
  double prev = 1e30;
  for (double margin : {2.0, 5.0, 10.0, 20.0}) {
    Tensor logits = Tensor::zeros({2, 4});
    logits.data()[0 * 4 + 1] = margin;
    logits.data()[1 * 4 + 3] = margin;
    const double loss = ops::cross_entropy(logits, {1, 3}).item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-8);  // loss -> 0 as the correct-class margin grows
}

TEST(Forward, CrossEntropyMatchesScalarEvaluation) {
  Rng rng(23);
  Tensor logits = testutil::random_tensor(rng, {3, 4}, -2, 2);
  const std::vector<long> labels = {2, 0, 3};
  double want = 0.0;
  for (std::size_t n = 0; n < 3; ++n) {
    double z = 0.0;
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits.data()[n * 4 + k]);
    want -= std::log(std::exp(logits.data()[n * 4 + labels[n]]) / z);
  }
  want /= 3.0;
  EXPECT_NEAR(ops::cross_entropy(logits, labels).item(), want, 1e-12);
  EXPECT_THROW(ops::cross_entropy(logits, {0, 1, 4}), prolad::InputError);
  EXPECT_THROW(ops::cross_entropy(logits, {0, 1}), prolad::InputError);
}

TEST(Forward, CosineBatchAnchors) {
  Tensor f = Tensor::from_data({2, 2}, {1, 0, 0, 2});
  EXPECT_NEAR(ops::cosine_batch(f, f).item(), 1.0, 1e-9);

  Tensor g = Tensor::from_data({2, 2}, {0, 1, 2, 0});
  EXPECT_NEAR(ops::cosine_batch(f, g).item(), 0.0, 1e-12);

  Tensor a = Tensor::from_data({1, 2}, {1, 0});
  Tensor b = Tensor::from_data({1, 2}, {1, 1});
  EXPECT_NEAR(ops::cosine_batch(a, b).item(), 1.0 / std::sqrt(2.0), 1e-12);

  EXPECT_THROW(ops::cosine_batch(f, Tensor::zeros({3, 2})), prolad::InputError);
  EXPECT_THROW(ops::cosine_batch(f, Tensor::zeros({2, 3})), prolad::ShapeError);
}

TEST(Forward, BatchNormTrainStandardizes) {
  Rng rng(29);
  // Spread the data wide so epsilon (1e-5) is negligible against the batch
  // variance; the output variance is sigma^2/(sigma^2+eps).
  Tensor x = testutil::random_tensor(rng, {4, 3, 5, 5}, -20, 30);
  std::vector<double> mu, var;
  Tensor y = ops::batch_norm_train(x, 1e-5, &mu, &var);
  const std::size_t HW = 25, C = 3, N = 4, m = N * HW;
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0, ss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < HW; ++i) {
        const double v = y.data()[(n * C + c) * HW + i];
        s += v;
        ss += v * v;
      }
    }
    const double mean = s / m;
    const double variance = ss / m - mean * mean;
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(variance, 1.0, 1e-6);
    EXPECT_GE(var[c], 0.0);
  }
  Tensor tiny = Tensor::zeros({1, 3, 1, 1});
  EXPECT_THROW(ops::batch_norm_train(tiny, 1e-5, nullptr, nullptr), prolad::TrainingError);
}

TEST(Forward, RowGroupMeanValues) {
  Tensor x = Tensor::from_data({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor protos = ops::row_group_mean(x, {0, 1, 0, 1}, 2);
  EXPECT_DOUBLE_EQ(protos.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(protos.data()[1], 4.0);
  EXPECT_DOUBLE_EQ(protos.data()[2], 5.0);
  EXPECT_DOUBLE_EQ(protos.data()[3], 6.0);
  EXPECT_THROW(ops::row_group_mean(x, {0, 0, 0, 0}, 2), prolad::InputError);
}

TEST(Forward, ElementwiseAndBroadcastHelpers) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {10, 20, 30, 40});
  EXPECT_DOUBLE_EQ(ops::add(a, b).data()[3], 44.0);
  EXPECT_DOUBLE_EQ(ops::sub(b, a).data()[0], 9.0);
  EXPECT_DOUBLE_EQ(ops::mul(a, b).data()[1], 40.0);
  EXPECT_DOUBLE_EQ(ops::mul_scalar(a, -2.0).data()[2], -6.0);
  EXPECT_DOUBLE_EQ(ops::add_scalar(a, 0.5).data()[0], 1.5);
  EXPECT_THROW(ops::add(a, Tensor::zeros({3})), prolad::ShapeError);

  Tensor bias = Tensor::from_data({2}, {100, 200});
  Tensor shifted = ops::add_rowvec(a, bias);
  EXPECT_DOUBLE_EQ(shifted.data()[0], 101.0);
  EXPECT_DOUBLE_EQ(shifted.data()[3], 204.0);

  Tensor nrm = ops::row_normalize(Tensor::from_data({1, 2}, {3, 4}));
  EXPECT_NEAR(nrm.data()[0], 0.6, 1e-12);
  EXPECT_NEAR(nrm.data()[1], 0.8, 1e-12);

  Tensor x4 = Tensor::from_data({1, 2, 1, 2}, {1, 2, 3, 4});
  Tensor scale = Tensor::from_data({2}, {2, 10});
  Tensor shift = Tensor::from_data({2}, {0.5, -1});
  Tensor y = ops::channel_affine(x4, scale, shift);
  EXPECT_DOUBLE_EQ(y.data()[0], 2.5);
  EXPECT_DOUBLE_EQ(y.data()[3], 39.0);
}
