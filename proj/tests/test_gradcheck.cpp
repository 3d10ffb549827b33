#include <gtest/gtest.h>

#include "gradcheck_cases.hpp"

using namespace vidvisc;

class GradientOracle : public ::testing::TestWithParam<size_t> {};

TEST_P(GradientOracle, MatchesCentralDifferences) {
  const auto cases = oracle::gradient_cases();
  const auto& c = cases[GetParam()];
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto res = oracle::run_gradient_case(c, seed);
    EXPECT_LE(res.worst_relative_error, 1e-4) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradientOracle, ::testing::Range<size_t>(0, oracle::gradient_cases().size()),
                         [](const auto& info) { return oracle::gradient_cases()[info.param].name; });

TEST(GradientOracle, ComposedEncoderLikeStack) {
  using V = Variable<double>;
  oracle::GradCase stack{"stack",
                         [](std::vector<V>& v) {
                           BatchNormStats<double> stats(2);
                           auto h = conv3d(v[0], v[1], v[2], {1, 1, 1});
                           h = relu(batchnorm3d(h, v[3], v[4], stats, NormMode::train));
                           h = maxpool3d(h);
                           h = upsample_trilinear(h, {3, 3, 4});
                           return sigmoid(conv_transpose3d(h, v[5], v[6]));
                         },
                         {{2, 1, 4, 4, 5}, {2, 1, 3, 3, 3}, {2}, {2}, {2}, {2, 1, 2, 2, 2}, {1}}};
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    EXPECT_LE(oracle::run_gradient_case(stack, seed).worst_relative_error, 1e-4) << "seed " << seed;
  }
}
