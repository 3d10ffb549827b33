#pragma once

#include <array>
#include <vector>

#include "vidvisc/autograd.hpp"

namespace vidvisc {

using Extent3 = std::array<int64_t, 3>;

// All convolutions run at stride 1 without dilation.

// input [N,Cin,D,H,W], weight [Cout,Cin,kd,kh,kw], bias [Cout].
// Output extent per axis: D - kd + 1 + 2*pd.
template <typename T>
Variable<T> conv3d(const Variable<T>& input, const Variable<T>& weight, const Variable<T>& bias,
                   Extent3 padding = {0, 0, 0});

// input [N,Cin,D,H,W], weight [Cin,Cout,kd,kh,kw], bias [Cout].
// Output extent per axis: D + kd - 1 - 2*pd. With a zero bias this is the
// adjoint of conv3d evaluated with the same weight tensor.
template <typename T>
Variable<T> conv_transpose3d(const Variable<T>& input, const Variable<T>& weight, const Variable<T>& bias,
                             Extent3 padding = {0, 0, 0});

// 2x2x2 window, stride 2, floor semantics. Gradient goes to the first
// maximum in (d,h,w) scan order of each window.
template <typename T>
Variable<T> maxpool3d(const Variable<T>& input);

// Align-corners-false trilinear resize of [N,C,D,H,W] to `target`.
template <typename T>
Variable<T> upsample_trilinear(const Variable<T>& input, Extent3 target);

enum class NormMode { train, eval };

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  BatchNormStats() = default;
  explicit BatchNormStats(int64_t channels)
      : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::ones({channels})) {}
};

// Train mode normalises with the biased batch variance and folds the
// unbiased variance into the running estimate with weight `momentum`.
template <typename T>
Variable<T> batchnorm3d(const Variable<T>& input, const Variable<T>& gamma, const Variable<T>& beta,
                        BatchNormStats<T>& stats, NormMode mode, double momentum = 0.1, double eps = 1e-5);

template <typename T>
Variable<T> relu(const Variable<T>& x);

// Clamped to the open interval (0,1) so saturated inputs never produce 0 or 1.
template <typename T>
Variable<T> sigmoid(const Variable<T>& x);

// input [N,F], weight [F,G], bias [G].
template <typename T>
Variable<T> linear(const Variable<T>& input, const Variable<T>& weight, const Variable<T>& bias);

template <typename T>
Variable<T> mse_loss(const Variable<T>& prediction, const Variable<T>& target);

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Variable<T> softmax_cross_entropy(const Variable<T>& logits, const std::vector<int>& targets);

template <typename T>
Variable<T> sum(const Variable<T>& x);

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b);

template <typename T>
Variable<T> mul(const Variable<T>& a, const Variable<T>& b);

// y = x * scale + offset with constant scalars.
template <typename T>
Variable<T> affine(const Variable<T>& x, T scale, T offset);

template <typename T>
Variable<T> reshape(const Variable<T>& x, Shape shape);

// Numerically stable row softmax, used by inference paths.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace vidvisc
