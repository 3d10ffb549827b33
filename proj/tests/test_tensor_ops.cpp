#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "vidvisc/adam.hpp"
#include "vidvisc/ops.hpp"

using namespace vidvisc;
using V = Variable<double>;
using TD = Tensor<double>;

namespace {

V param(TD t) { return V(std::move(t), true); }
V constant(TD t) { return V(std::move(t), false); }

TD iota(Shape shape, double start = 0) {
  TD t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t[i] = start + static_cast<double>(i);
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndDataLengthMustAgree) {
  EXPECT_THROW(TD({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(TD({2, 0}), ShapeError);
  TD t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(TD::scalar(3.0).size(), 1u);
}

TEST(Conv3d, AllOnesCube) {
  auto out = conv3d(constant(TD::ones({1, 1, 3, 3, 3})), constant(TD::ones({1, 1, 3, 3, 3})),
                    constant(TD::zeros({1})));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(out.value()[0], 27.0);
}

TEST(Conv3d, FirstEncoderLayerShape) {
  Variable<float> x(Tensor<float>::zeros({1, 1, 12, 40, 100}));
  Variable<float> w(Tensor<float>::zeros({16, 1, 5, 5, 5}));
  Variable<float> b(Tensor<float>::zeros({16}));
  EXPECT_EQ(conv3d(x, w, b).shape(), (Shape{1, 16, 8, 36, 96}));
}

TEST(Conv3d, MatchesNaiveLoopsWithPadding) {
  std::mt19937_64 rng(11);
  auto x = oracle::random_tensor({2, 3, 5, 6, 7}, rng);
  auto w = oracle::random_tensor({4, 3, 3, 3, 3}, rng);
  auto b = oracle::random_tensor({4}, rng);
  auto got = conv3d(constant(x), constant(w), constant(b), {1, 1, 1});
  auto want = oracle::naive_conv3d(x, w, b, {1, 1, 1});
  ASSERT_EQ(got.shape(), want.shape());
  for (size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(got.value()[i], want[i], 1e-10);
}

TEST(Conv3d, RejectsChannelMismatch) {
  EXPECT_THROW(conv3d(constant(TD::zeros({1, 2, 4, 4, 4})), constant(TD::zeros({1, 3, 3, 3, 3})),
                      constant(TD::zeros({1}))),
               ShapeError);
  EXPECT_THROW(conv3d(constant(TD::zeros({1, 1, 2, 4, 4})), constant(TD::zeros({1, 1, 3, 3, 3})),
                      constant(TD::zeros({1}))),
               ShapeError);
}

TEST(ConvTranspose3d, SingleSiteScatterCopiesKernel) {
  std::mt19937_64 rng(3);
  auto k = oracle::random_tensor({1, 1, 3, 3, 3}, rng);
  auto out = conv_transpose3d(constant(TD({1, 1, 1, 1, 1}, {2.5})), constant(k), constant(TD::zeros({1})));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 3, 3, 3}));
  for (size_t i = 0; i < k.size(); ++i) EXPECT_DOUBLE_EQ(out.value()[i], 2.5 * k[i]);
}

TEST(ConvTranspose3d, InvertsValidConvShape) {
  Variable<float> x(Tensor<float>::zeros({1, 1, 8, 36, 96}));
  Variable<float> w(Tensor<float>::zeros({1, 1, 5, 5, 5}));
  Variable<float> b(Tensor<float>::zeros({1}));
  auto up = conv_transpose3d(x, w, b);
  EXPECT_EQ(up.shape(), (Shape{1, 1, 12, 40, 100}));
  EXPECT_EQ(conv3d(up, w, b).shape(), x.shape());
}

TEST(ConvTranspose3d, IsAdjointOfConv3d) {
  std::mt19937_64 rng(5);
  for (Extent3 pad : {Extent3{0, 0, 0}, Extent3{1, 1, 1}, Extent3{0, 1, 2}}) {
    auto k = oracle::random_tensor({3, 2, 3, 3, 3}, rng);
    auto x = oracle::random_tensor({2, 2, 4, 5, 6}, rng);
    auto zero = TD::zeros({3});
    auto cx = conv3d(constant(x), constant(k), constant(zero), pad);
    auto y = oracle::random_tensor(cx.shape(), rng);
    auto ty = conv_transpose3d(constant(y), constant(k), constant(TD::zeros({2})), pad);
    ASSERT_EQ(ty.shape(), x.shape());
    EXPECT_NEAR(oracle::dot(cx.value(), y), oracle::dot(x, ty.value()), 1e-10);
  }
}

TEST(MaxPool3d, BlockMaximum) {
  auto out = maxpool3d(constant(iota({1, 1, 2, 2, 2})));
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_EQ(out.value()[0], 7.0);
}

TEST(MaxPool3d, FloorShapes) {
  EXPECT_EQ(maxpool3d(constant(TD::zeros({1, 1, 8, 36, 96}))).shape(), (Shape{1, 1, 4, 18, 48}));
  EXPECT_EQ(maxpool3d(constant(TD::zeros({1, 1, 2, 9, 24}))).shape(), (Shape{1, 1, 1, 4, 12}));
  EXPECT_THROW(maxpool3d(constant(TD::zeros({1, 1, 1, 4, 4}))), ShapeError);
}

TEST(MaxPool3d, ConstantInputRoutesOneGradientPerCell) {
  auto x = param(TD({1, 2, 4, 4, 5}, 0.5));
  auto out = maxpool3d(x);
  for (double v : out.value().data()) EXPECT_EQ(v, 0.5);
  backward(sum(out));
  // First element of each window in scan order receives the gradient.
  const auto& g = x.grad();
  double total = 0;
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t d = 0; d < 4; ++d)
      for (int64_t h = 0; h < 4; ++h)
        for (int64_t w = 0; w < 5; ++w) {
          const double v = g[static_cast<size_t>(((c * 4 + d) * 4 + h) * 5 + w)];
          total += v;
          const bool first = d % 2 == 0 && h % 2 == 0 && w % 2 == 0 && w < 4;
          EXPECT_EQ(v, first ? 1.0 : 0.0);
        }
  EXPECT_EQ(total, static_cast<double>(out.size()));
}

TEST(MaxPool3d, OutputsAreInputValues) {
  std::mt19937_64 rng(9);
  auto x = oracle::random_tensor({2, 3, 5, 7, 6}, rng);
  auto out = maxpool3d(constant(x));
  for (double v : out.value().data()) {
    EXPECT_NE(std::find(x.data().begin(), x.data().end(), v), x.data().end());
  }
}

TEST(Upsample, ConstantStaysConstant) {
  auto out = upsample_trilinear(constant(TD({1, 2, 2, 3, 4}, 1.75)), {5, 7, 9});
  ASSERT_EQ(out.shape(), (Shape{1, 2, 5, 7, 9}));
  for (double v : out.value().data()) EXPECT_NEAR(v, 1.75, 1e-15);
}

TEST(Upsample, SameSizeIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor({1, 2, 3, 4, 5}, rng);
  auto out = upsample_trilinear(constant(x), {3, 4, 5});
  for (size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out.value()[i], x[i]);
}

TEST(Upsample, RampDoubling) {
  // src = (i + 0.5) * 0.5 - 0.5 clamped at 0, evaluated by hand.
  auto out = upsample_trilinear(constant(TD({1, 1, 1, 1, 4}, {0, 1, 2, 3})), {1, 1, 8});
  const std::vector<double> want{0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3};
  for (size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out.value()[i], want[i], 1e-15);
  for (size_t i = 1; i < want.size(); ++i) EXPECT_GE(out.value()[i], out.value()[i - 1]);
}

TEST(BatchNorm, ConstantChannelGoesToZero) {
  BatchNormStats<double> stats(1);
  auto out = batchnorm3d(constant(TD({2, 1, 2, 2, 2}, 4.0)), constant(TD::ones({1})), constant(TD::zeros({1})),
                         stats, NormMode::train);
  for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, AffineLawOnStandardizedInput) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  TD x({4, 2, 3, 4, 5});
  for (auto& v : x.data()) v = nd(rng);
  BatchNormStats<double> stats(2);
  auto out = batchnorm3d(constant(x), constant(TD({2}, 2.0)), constant(TD({2}, 3.0)), stats, NormMode::train,
                         0.1, 0.0);
  const int64_t spatial = 60;
  for (int64_t c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < spatial; ++i) s += out.value()[static_cast<size_t>((b * 2 + c) * spatial + i)];
    const double mean = s / 240;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < spatial; ++i) {
        const double d = out.value()[static_cast<size_t>((b * 2 + c) * spatial + i)] - mean;
        ss += d * d;
      }
    EXPECT_NEAR(mean, 3.0, 1e-6);
    EXPECT_NEAR(std::sqrt(ss / 240), 2.0, 1e-6);
  }
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  BatchNormStats<double> stats(1);
  stats.running_mean[0] = 2.0;
  stats.running_var[0] = 4.0;
  const double eps = 1e-5;
  TD x({1, 1, 1, 2, 2}, {1, 2, 3, 4});
  auto out = batchnorm3d(constant(x), constant(TD({1}, 1.5)), constant(TD({1}, -1.0)), stats, NormMode::eval,
                         0.1, eps);
  for (size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.value()[i], (x[i] - 2.0) / std::sqrt(4.0 + eps) * 1.5 - 1.0, 1e-14);
  EXPECT_EQ(stats.running_mean[0], 2.0);
}

TEST(BatchNorm, TrainUpdatesRunningStatistics) {
  BatchNormStats<double> stats(1);
  TD x({1, 1, 1, 1, 4}, {1, 2, 3, 6});
  batchnorm3d(constant(x), constant(TD::ones({1})), constant(TD::zeros({1})), stats, NormMode::train, 0.5);
  EXPECT_DOUBLE_EQ(stats.running_mean[0], 0.5 * 0 + 0.5 * 3.0);
  // Unbiased variance of {1,2,3,6} is 14/3.
  EXPECT_DOUBLE_EQ(stats.running_var[0], 0.5 * 1 + 0.5 * 14.0 / 3.0);
}

TEST(Activation, Relu) {
  auto out = relu(constant(TD({3}, {-1, 0, 2})));
  EXPECT_EQ(out.value().storage(), (std::vector<double>{0, 0, 2}));
}

TEST(Activation, SigmoidStableAndOpen) {
  auto out = sigmoid(constant(TD({3}, {0, 40, -40})));
  EXPECT_EQ(out.value()[0], 0.5);
  EXPECT_NEAR(out.value()[1], 1.0, 1e-12);
  EXPECT_NEAR(out.value()[2], 0.0, 1e-12);
  for (double v : out.value().data()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  auto extreme = sigmoid(Variable<float>(Tensor<float>({2}, {1e4f, -1e4f})));
  EXPECT_LT(extreme.value()[0], 1.0f);
  EXPECT_GT(extreme.value()[1], 0.0f);
}

TEST(Linear, IdentityWeight) {
  TD eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[static_cast<size_t>(i * 4)] = 1;
  TD x({2, 3}, {1, 2, 3, 4, 5, 6});
  auto out = linear(constant(x), constant(eye), constant(TD::zeros({3})));
  EXPECT_EQ(out.value(), x);
}

TEST(Linear, LatentProjectionShape) {
  Variable<float> x(Tensor<float>::zeros({1, 3072}));
  Variable<float> w(Tensor<float>::zeros({3072, 512}));
  Variable<float> b(Tensor<float>::zeros({512}));
  EXPECT_EQ(linear(x, w, b).shape(), (Shape{1, 512}));
}

TEST(Linear, MatchesManualProduct) {
  std::mt19937_64 rng(4);
  auto x = oracle::random_tensor({3, 4}, rng);
  auto w = oracle::random_tensor({4, 2}, rng);
  auto b = oracle::random_tensor({2}, rng);
  auto out = linear(constant(x), constant(w), constant(b));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) {
      double acc = b[static_cast<size_t>(c)];
      for (int k = 0; k < 4; ++k) acc += x[static_cast<size_t>(r * 4 + k)] * w[static_cast<size_t>(k * 2 + c)];
      EXPECT_NEAR(out.value()[static_cast<size_t>(r * 2 + c)], acc, 1e-12);
    }
  EXPECT_THROW(linear(constant(x), constant(TD::zeros({3, 2})), constant(b)), ShapeError);
}

TEST(Loss, MeanSquaredError) {
  auto x = constant(TD({2}, {0.3, -1.2}));
  EXPECT_EQ(mse_loss(x, x).value().item(), 0.0);
  EXPECT_EQ(mse_loss(constant(TD({2}, {0, 0})), constant(TD({2}, {1, 1}))).value().item(), 1.0);
  EXPECT_THROW(mse_loss(constant(TD({2})), constant(TD({3}))), ShapeError);
}

TEST(Loss, MseZeroOnlyForEqualInputs) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = oracle::random_tensor({7}, rng);
    auto b = a;
    const double same = mse_loss(constant(a), constant(b)).value().item();
    EXPECT_EQ(same, 0.0);
    b[static_cast<size_t>(trial % 7)] = std::nextafter(b[static_cast<size_t>(trial % 7)], 2.0);
    EXPECT_GT(mse_loss(constant(a), constant(b)).value().item(), 0.0);
  }
}

TEST(Loss, CrossEntropyUniformLogits) {
  auto loss = softmax_cross_entropy(constant(TD::zeros({3, 5})), {0, 2, 4});
  EXPECT_NEAR(loss.value().item(), std::log(5.0), 1e-12);
  EXPECT_THROW(softmax_cross_entropy(constant(TD::zeros({1, 5})), {5}), std::out_of_range);
  EXPECT_THROW(softmax_cross_entropy(constant(TD::zeros({1, 5})), {-1}), std::out_of_range);
}

TEST(Loss, CrossEntropyLargeLogitsFinite) {
  auto loss = softmax_cross_entropy(constant(TD({1, 3}, {1000, -1000, 0})), {1});
  EXPECT_NEAR(loss.value().item(), 2000.0, 1e-9);
}

TEST(Backward, SumGivesOnes) {
  auto x = param(TD({2, 3, 4}, 0.1));
  backward(sum(x));
  for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ScalarChainRule) {
  auto w = param(TD({1}, 2.0));
  auto loss = mse_loss(mul(w, constant(TD({1}, 3.0))), constant(TD({1}, 5.0)));
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 6.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto w = param(TD({1}, 2.0));
  auto loss = mse_loss(mul(w, constant(TD({1}, 3.0))), constant(TD({1}, 5.0)));
  backward(loss);
  backward(loss);
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Backward, RejectsNonScalar) {
  auto x = param(TD({2}, 1.0));
  EXPECT_THROW(backward(relu(x)), ShapeError);
}

TEST(Backward, ConstantsBuildNoGraph) {
  auto out = relu(constant(TD({3}, 1.0)));
  EXPECT_FALSE(out.requires_grad());
  EXPECT_TRUE(out.node()->parents.empty());
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto w = param(TD({3}, {1, -2, 3}));
  Adam<double> opt({w}, AdamConfig{.lr = 0.1});
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(w.value().storage(), (std::vector<double>{1, -2, 3}));
  EXPECT_EQ(opt.step_count(), 5);
}

TEST(Adam, MinimisesQuadraticLikeReferenceLoop) {
  // Reference: the textbook update written out for a scalar.
  double ref = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2 * ref;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  auto w = param(TD({1}, 1.0));
  Adam<double> opt({w}, AdamConfig{.lr = 0.1});
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    backward(mul(w, w));
    opt.step();
  }
  EXPECT_EQ(opt.step_count(), 200);
  EXPECT_NEAR(w.value()[0], ref, 1e-12);
  EXPECT_LT(std::abs(w.value()[0]), 0.05);
}

TEST(Adam, CoupledWeightDecayEntersMoments) {
  std::vector<double> p{2.0};
  std::vector<double> g{0.0};
  AdamMoments<double> mom;
  adam_step<double>(p, g, mom, AdamConfig{.lr = 0.01, .weight_decay = 0.5}, 1);
  EXPECT_DOUBLE_EQ(mom.first[0], 0.1 * 1.0);
  EXPECT_LT(p[0], 2.0);
}
