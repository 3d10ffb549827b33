#include "vidvisc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace vidvisc {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// C[m,n] (+)= op(A) * op(B), all row-major with explicit leading dimensions.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a, int64_t lda, const T* b,
          int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  ConstMatMap<T> am(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
  ConstMatMap<T> bm(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
  MatMap<T> cm(c, m, n, Eigen::OuterStride<>(ldc));
  if (trans_a && trans_b) {
    if (accumulate) cm.noalias() += am.transpose() * bm.transpose();
    else cm.noalias() = am.transpose() * bm.transpose();
  } else if (trans_a) {
    if (accumulate) cm.noalias() += am.transpose() * bm;
    else cm.noalias() = am.transpose() * bm;
  } else if (trans_b) {
    if (accumulate) cm.noalias() += am * bm.transpose();
    else cm.noalias() = am * bm.transpose();
  } else {
    if (accumulate) cm.noalias() += am * bm;
    else cm.noalias() = am * bm;
  }
}

// Geometry of a stride-1 convolution: input C x (D,H,W), kernel k, padding p,
// output (Do,Ho,Wo). Transposed convolution reuses it with roles swapped.
struct ConvGeom {
  int64_t channels, d, h, w;
  int64_t kd, kh, kw;
  int64_t pd, ph, pw;
  int64_t od, oh, ow;

  int64_t rows() const { return channels * kd * kh * kw; }
  int64_t plane() const { return oh * ow; }
  int64_t out_size() const { return od * oh * ow; }
  int64_t in_size() const { return d * h * w; }
  // Output depth planes per chunk so the column buffer stays near 4M entries.
  int64_t chunk_planes() const {
    const int64_t per_plane = std::max<int64_t>(1, rows() * plane());
    return std::clamp<int64_t>((int64_t{1} << 22) / per_plane, 1, od);
  }
};

template <typename T, bool Accumulate>
void unfold_impl(std::conditional_t<Accumulate, T*, const T*> vol, const ConvGeom& g, int64_t d0, int64_t d1,
                 std::conditional_t<Accumulate, const T*, T*> col) {
  const int64_t cols = (d1 - d0) * g.plane();
  int64_t r = 0;
  for (int64_t c = 0; c < g.channels; ++c) {
    for (int64_t i = 0; i < g.kd; ++i) {
      for (int64_t j = 0; j < g.kh; ++j) {
        for (int64_t l = 0; l < g.kw; ++l, ++r) {
          auto* crow = col + r * cols;
          const int64_t lo = std::max<int64_t>(0, g.pw - l);
          const int64_t hi = std::min<int64_t>(g.ow, g.w + g.pw - l);
          for (int64_t zd = d0; zd < d1; ++zd) {
            const int64_t id = zd + i - g.pd;
            for (int64_t y = 0; y < g.oh; ++y) {
              auto* seg = crow + ((zd - d0) * g.oh + y) * g.ow;
              const int64_t ih = y + j - g.ph;
              const bool inside = id >= 0 && id < g.d && ih >= 0 && ih < g.h && hi > lo;
              if constexpr (Accumulate) {
                if (!inside) continue;
                T* dst = vol + ((c * g.d + id) * g.h + ih) * g.w;
                for (int64_t x = lo; x < hi; ++x) dst[x + l - g.pw] += seg[x];
              } else {
                if (!inside) {
                  std::fill(seg, seg + g.ow, T{0});
                  continue;
                }
                const T* src = vol + ((c * g.d + id) * g.h + ih) * g.w;
                std::fill(seg, seg + lo, T{0});
                for (int64_t x = lo; x < hi; ++x) seg[x] = src[x + l - g.pw];
                std::fill(seg + hi, seg + g.ow, T{0});
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const T* vol, const ConvGeom& g, int64_t d0, int64_t d1, T* col) {
  unfold_impl<T, false>(vol, g, d0, d1, col);
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, int64_t d0, int64_t d1, T* vol) {
  unfold_impl<T, true>(vol, g, d0, d1, col);
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <typename T>
void check_conv_args(const char* op, const Variable<T>& input, const Variable<T>& weight,
                     const Variable<T>& bias, int64_t in_channels_axis, int64_t out_channels_axis,
                     const Extent3& padding) {
  const std::string name(op);
  require(input.rank() == 5, name + ": input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 5, name + ": weight must be rank 5, got " + shape_str(weight.shape()));
  require(input.dim(1) == weight.dim(static_cast<int>(in_channels_axis)),
          name + ": input channels " + std::to_string(input.dim(1)) + " do not match weight " +
              shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(static_cast<int>(out_channels_axis)),
          name + ": bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  for (auto p : padding) require(p >= 0, name + ": negative padding");
}

template <typename T>
void add_channel_bias(T* out, int64_t n, int64_t channels, int64_t spatial, const T* bias) {
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      T* p = out + (b * channels + c) * spatial;
      const T v = bias[c];
      for (int64_t s = 0; s < spatial; ++s) p[s] += v;
    }
  }
}

template <typename T>
void accumulate_channel_sums(const T* grad, int64_t n, int64_t channels, int64_t spatial, T* dst) {
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      const T* p = grad + (b * channels + c) * spatial;
      double s = 0;
      for (int64_t i = 0; i < spatial; ++i) s += p[i];
      dst[c] += static_cast<T>(s);
    }
  }
}

}  // namespace

template <typename T>
Variable<T> conv3d(const Variable<T>& input, const Variable<T>& weight, const Variable<T>& bias,
                   Extent3 padding) {
  check_conv_args("conv3d", input, weight, bias, 1, 0, padding);
  ConvGeom g{input.dim(1), input.dim(2), input.dim(3), input.dim(4),
             weight.dim(2), weight.dim(3), weight.dim(4),
             padding[0], padding[1], padding[2], 0, 0, 0};
  g.od = g.d - g.kd + 1 + 2 * g.pd;
  g.oh = g.h - g.kh + 1 + 2 * g.ph;
  g.ow = g.w - g.kw + 1 + 2 * g.pw;
  require(g.od >= 1 && g.oh >= 1 && g.ow >= 1,
          "conv3d: kernel " + shape_str(weight.shape()) + " does not fit padded input " + shape_str(input.shape()));

  const int64_t n = input.dim(0);
  const int64_t cout = weight.dim(0);
  const int64_t osz = g.out_size();
  Tensor<T> out({n, cout, g.od, g.oh, g.ow});
  const int64_t step = g.chunk_planes();
  std::vector<T> col(static_cast<size_t>(g.rows() * step * g.plane()));
  const T* x = input.value().raw();
  const T* w = weight.value().raw();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t d0 = 0; d0 < g.od; d0 += step) {
      const int64_t d1 = std::min(g.od, d0 + step);
      const int64_t cols = (d1 - d0) * g.plane();
      im2col(x + b * g.channels * g.in_size(), g, d0, d1, col.data());
      gemm<T>(false, false, cout, cols, g.rows(), w, g.rows(), col.data(), cols,
              out.raw() + b * cout * osz + d0 * g.plane(), osz, false);
    }
  }
  add_channel_bias(out.raw(), n, cout, osz, bias.value().raw());

  return make_result<T>(std::move(out), {input.node(), weight.node(), bias.node()}, [g, n, cout](Node<T>& self) {
    auto& in = *self.parents[0];
    auto& wt = *self.parents[1];
    auto& bs = *self.parents[2];
    const T* dy = self.grad.raw();
    const int64_t osz = g.out_size();
    const int64_t step = g.chunk_planes();
    std::vector<T> col(static_cast<size_t>(g.rows() * step * g.plane()));
    T* dw = wt.requires_grad ? wt.grad_buffer().raw() : nullptr;
    T* dx = in.requires_grad ? in.grad_buffer().raw() : nullptr;
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t d0 = 0; d0 < g.od; d0 += step) {
        const int64_t d1 = std::min(g.od, d0 + step);
        const int64_t cols = (d1 - d0) * g.plane();
        const T* dyc = dy + b * cout * osz + d0 * g.plane();
        if (dw) {
          im2col(in.value.raw() + b * g.channels * g.in_size(), g, d0, d1, col.data());
          gemm<T>(false, true, cout, g.rows(), cols, dyc, osz, col.data(), cols, dw, g.rows(), true);
        }
        if (dx) {
          gemm<T>(true, false, g.rows(), cols, cout, wt.value.raw(), g.rows(), dyc, osz, col.data(), cols, false);
          col2im_add(col.data(), g, d0, d1, dx + b * g.channels * g.in_size());
        }
      }
    }
    if (bs.requires_grad) accumulate_channel_sums(dy, n, cout, osz, bs.grad_buffer().raw());
  });
}

template <typename T>
Variable<T> conv_transpose3d(const Variable<T>& input, const Variable<T>& weight, const Variable<T>& bias,
                             Extent3 padding) {
  check_conv_args("conv_transpose3d", input, weight, bias, 0, 1, padding);
  const int64_t n = input.dim(0);
  const int64_t cin = input.dim(1);
  const int64_t cout = weight.dim(1);
  // The adjoint conv3d maps the output volume (cout channels) back to the input volume.
  ConvGeom g{cout, 0, 0, 0, weight.dim(2), weight.dim(3), weight.dim(4),
             padding[0], padding[1], padding[2], input.dim(2), input.dim(3), input.dim(4)};
  g.d = g.od + g.kd - 1 - 2 * g.pd;
  g.h = g.oh + g.kh - 1 - 2 * g.ph;
  g.w = g.ow + g.kw - 1 - 2 * g.pw;
  require(g.d >= 1 && g.h >= 1 && g.w >= 1,
          "conv_transpose3d: padding " + std::to_string(padding[0]) + "," + std::to_string(padding[1]) + "," +
              std::to_string(padding[2]) + " leaves no output for input " + shape_str(input.shape()));

  const int64_t isz = g.out_size();
  const int64_t osz = g.in_size();
  Tensor<T> out({n, cout, g.d, g.h, g.w});
  const int64_t step = g.chunk_planes();
  std::vector<T> col(static_cast<size_t>(g.rows() * step * g.plane()));
  const T* y = input.value().raw();
  const T* w = weight.value().raw();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t d0 = 0; d0 < g.od; d0 += step) {
      const int64_t d1 = std::min(g.od, d0 + step);
      const int64_t cols = (d1 - d0) * g.plane();
      gemm<T>(true, false, g.rows(), cols, cin, w, g.rows(), y + b * cin * isz + d0 * g.plane(), isz, col.data(),
              cols, false);
      col2im_add(col.data(), g, d0, d1, out.raw() + b * cout * osz);
    }
  }
  add_channel_bias(out.raw(), n, cout, osz, bias.value().raw());

  return make_result<T>(std::move(out), {input.node(), weight.node(), bias.node()}, [g, n, cin, cout](Node<T>& self) {
    auto& in = *self.parents[0];
    auto& wt = *self.parents[1];
    auto& bs = *self.parents[2];
    const T* dout = self.grad.raw();
    const int64_t isz = g.out_size();
    const int64_t osz = g.in_size();
    const int64_t step = g.chunk_planes();
    std::vector<T> col(static_cast<size_t>(g.rows() * step * g.plane()));
    T* dw = wt.requires_grad ? wt.grad_buffer().raw() : nullptr;
    T* dx = in.requires_grad ? in.grad_buffer().raw() : nullptr;
    if (dw || dx) {
      for (int64_t b = 0; b < n; ++b) {
        for (int64_t d0 = 0; d0 < g.od; d0 += step) {
          const int64_t d1 = std::min(g.od, d0 + step);
          const int64_t cols = (d1 - d0) * g.plane();
          im2col(dout + b * cout * osz, g, d0, d1, col.data());
          if (dx) {
            gemm<T>(false, false, cin, cols, g.rows(), wt.value.raw(), g.rows(), col.data(), cols,
                    dx + b * cin * isz + d0 * g.plane(), isz, true);
          }
          if (dw) {
            gemm<T>(false, true, cin, g.rows(), cols, in.value.raw() + b * cin * isz + d0 * g.plane(), isz,
                    col.data(), cols, dw, g.rows(), true);
          }
        }
      }
    }
    if (bs.requires_grad) accumulate_channel_sums(dout, n, cout, osz, bs.grad_buffer().raw());
  });
}

template <typename T>
Variable<T> maxpool3d(const Variable<T>& input) {
  require(input.rank() == 5, "maxpool3d: input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  const int64_t n = input.dim(0), c = input.dim(1), d = input.dim(2), h = input.dim(3), w = input.dim(4);
  require(d >= 2 && h >= 2 && w >= 2, "maxpool3d: every pooled axis needs extent >= 2, got " + shape_str(input.shape()));
  const int64_t od = d / 2, oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, od, oh, ow});
  std::vector<int64_t> argmax(out.size());
  const T* x = input.value().raw();
  int64_t o = 0;
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* base = x + nc * d * h * w;
    for (int64_t zd = 0; zd < od; ++zd) {
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t z = 0; z < ow; ++z, ++o) {
          int64_t best = ((2 * zd) * h + 2 * y) * w + 2 * z;
          T best_v = base[best];
          for (int64_t i = 0; i < 2; ++i) {
            for (int64_t j = 0; j < 2; ++j) {
              for (int64_t l = 0; l < 2; ++l) {
                const int64_t idx = ((2 * zd + i) * h + 2 * y + j) * w + 2 * z + l;
                if (base[idx] > best_v || (std::isnan(base[idx]) && !std::isnan(best_v))) {
                  best_v = base[idx];
                  best = idx;
                }
              }
            }
          }
          out[static_cast<size_t>(o)] = best_v;
          argmax[static_cast<size_t>(o)] = nc * d * h * w + best;
        }
      }
    }
  }
  return make_result<T>(std::move(out), {input.node()}, [argmax = std::move(argmax)](Node<T>& self) {
    auto& in = *self.parents[0];
    T* dx = in.grad_buffer().raw();
    const T* dy = self.grad.raw();
    for (size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
  });
}

namespace {

struct AxisInterp {
  std::vector<int64_t> lo, hi;
  std::vector<double> frac;
};

AxisInterp axis_interp(int64_t in, int64_t out) {
  AxisInterp a;
  a.lo.resize(static_cast<size_t>(out));
  a.hi.resize(static_cast<size_t>(out));
  a.frac.resize(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int64_t i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(src)), in - 1);
    a.lo[static_cast<size_t>(i)] = i0;
    a.hi[static_cast<size_t>(i)] = std::min<int64_t>(i0 + 1, in - 1);
    a.frac[static_cast<size_t>(i)] = src - static_cast<double>(i0);
  }
  return a;
}

}  // namespace

template <typename T>
Variable<T> upsample_trilinear(const Variable<T>& input, Extent3 target) {
  require(input.rank() == 5, "upsample_trilinear: input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  require(target[0] >= 1 && target[1] >= 1 && target[2] >= 1, "upsample_trilinear: target extents must be >= 1");
  const int64_t nc = input.dim(0) * input.dim(1);
  const int64_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const auto [td, th, tw] = target;
  auto ad = axis_interp(d, td), ah = axis_interp(h, th), aw = axis_interp(w, tw);
  Tensor<T> out({input.dim(0), input.dim(1), td, th, tw});
  const T* x = input.value().raw();
  T* y = out.raw();
  for (int64_t p = 0; p < nc; ++p) {
    const T* src = x + p * d * h * w;
    for (int64_t i = 0; i < td; ++i) {
      const double fd = ad.frac[i];
      const int64_t d0 = ad.lo[i] * h * w, d1 = ad.hi[i] * h * w;
      for (int64_t j = 0; j < th; ++j) {
        const double fh = ah.frac[j];
        const int64_t h0 = ah.lo[j] * w, h1 = ah.hi[j] * w;
        for (int64_t k = 0; k < tw; ++k, ++y) {
          const double fw = aw.frac[k];
          const int64_t w0 = aw.lo[k], w1 = aw.hi[k];
          const double v00 = (1 - fw) * src[d0 + h0 + w0] + fw * src[d0 + h0 + w1];
          const double v01 = (1 - fw) * src[d0 + h1 + w0] + fw * src[d0 + h1 + w1];
          const double v10 = (1 - fw) * src[d1 + h0 + w0] + fw * src[d1 + h0 + w1];
          const double v11 = (1 - fw) * src[d1 + h1 + w0] + fw * src[d1 + h1 + w1];
          *y = static_cast<T>((1 - fd) * ((1 - fh) * v00 + fh * v01) + fd * ((1 - fh) * v10 + fh * v11));
        }
      }
    }
  }
  return make_result<T>(std::move(out), {input.node()},
                        [ad, ah, aw, nc, d, h, w, td, th, tw](Node<T>& self) {
                          T* dx = self.parents[0]->grad_buffer().raw();
                          const T* dy = self.grad.raw();
                          for (int64_t p = 0; p < nc; ++p) {
                            T* dst = dx + p * d * h * w;
                            for (int64_t i = 0; i < td; ++i) {
                              const double fd = ad.frac[i];
                              const int64_t d0 = ad.lo[i] * h * w, d1 = ad.hi[i] * h * w;
                              for (int64_t j = 0; j < th; ++j) {
                                const double fh = ah.frac[j];
                                const int64_t h0 = ah.lo[j] * w, h1 = ah.hi[j] * w;
                                for (int64_t k = 0; k < tw; ++k, ++dy) {
                                  const double fw = aw.frac[k];
                                  const int64_t w0 = aw.lo[k], w1 = aw.hi[k];
                                  const double g = *dy;
                                  const double g0 = g * (1 - fd), g1 = g * fd;
                                  dst[d0 + h0 + w0] += static_cast<T>(g0 * (1 - fh) * (1 - fw));
                                  dst[d0 + h0 + w1] += static_cast<T>(g0 * (1 - fh) * fw);
                                  dst[d0 + h1 + w0] += static_cast<T>(g0 * fh * (1 - fw));
                                  dst[d0 + h1 + w1] += static_cast<T>(g0 * fh * fw);
                                  dst[d1 + h0 + w0] += static_cast<T>(g1 * (1 - fh) * (1 - fw));
                                  dst[d1 + h0 + w1] += static_cast<T>(g1 * (1 - fh) * fw);
                                  dst[d1 + h1 + w0] += static_cast<T>(g1 * fh * (1 - fw));
                                  dst[d1 + h1 + w1] += static_cast<T>(g1 * fh * fw);
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Variable<T> batchnorm3d(const Variable<T>& input, const Variable<T>& gamma, const Variable<T>& beta,
                        BatchNormStats<T>& stats, NormMode mode, double momentum, double eps) {
  require(input.rank() == 5, "batchnorm3d: input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  const int64_t n = input.dim(0), c = input.dim(1);
  const int64_t spatial = input.dim(2) * input.dim(3) * input.dim(4);
  require(gamma.size() == static_cast<size_t>(c) && beta.size() == static_cast<size_t>(c),
          "batchnorm3d: gamma/beta must have " + std::to_string(c) + " entries");
  require(stats.running_mean.size() == static_cast<size_t>(c) && stats.running_var.size() == static_cast<size_t>(c),
          "batchnorm3d: running statistics must have " + std::to_string(c) + " entries");
  const int64_t count = n * spatial;
  if (mode == NormMode::train) {
    require(count >= 2, "batchnorm3d: train mode needs at least 2 values per channel");
  }

  const T* x = input.value().raw();
  const T* gm = gamma.value().raw();
  const T* bt = beta.value().raw();
  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<double> invstd(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == NormMode::train) {
      double s = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * spatial;
        for (int64_t i = 0; i < spatial; ++i) s += p[i];
      }
      mean = s / static_cast<double>(count);
      double ss = 0;
      for (int64_t b = 0; b < n; ++b) {
        const T* p = x + (b * c + ch) * spatial;
        for (int64_t i = 0; i < spatial; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / static_cast<double>(count);
      const double unbiased = ss / static_cast<double>(count - 1);
      stats.running_mean[ch] = static_cast<T>((1 - momentum) * stats.running_mean[ch] + momentum * mean);
      stats.running_var[ch] = static_cast<T>((1 - momentum) * stats.running_var[ch] + momentum * unbiased);
    } else {
      mean = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[static_cast<size_t>(ch)] = is;
    for (int64_t b = 0; b < n; ++b) {
      const int64_t off = (b * c + ch) * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        const double xh = (x[off + i] - mean) * is;
        xhat[off + i] = static_cast<T>(xh);
        out[off + i] = static_cast<T>(gm[ch] * xh + bt[ch]);
      }
    }
  }

  return make_result<T>(std::move(out), {input.node(), gamma.node(), beta.node()},
                        [xhat = std::move(xhat), invstd = std::move(invstd), n, c, spatial, count,
                         mode](Node<T>& self) {
                          auto& in = *self.parents[0];
                          auto& g = *self.parents[1];
                          auto& bt = *self.parents[2];
                          const T* dy = self.grad.raw();
                          const T* gm = g.value.raw();
                          T* dx = in.requires_grad ? in.grad_buffer().raw() : nullptr;
                          T* dg = g.requires_grad ? g.grad_buffer().raw() : nullptr;
                          T* db = bt.requires_grad ? bt.grad_buffer().raw() : nullptr;
                          for (int64_t ch = 0; ch < c; ++ch) {
                            double sum_dy = 0, sum_dy_xh = 0;
                            for (int64_t b = 0; b < n; ++b) {
                              const int64_t off = (b * c + ch) * spatial;
                              for (int64_t i = 0; i < spatial; ++i) {
                                sum_dy += dy[off + i];
                                sum_dy_xh += static_cast<double>(dy[off + i]) * xhat[off + i];
                              }
                            }
                            if (dg) dg[ch] += static_cast<T>(sum_dy_xh);
                            if (db) db[ch] += static_cast<T>(sum_dy);
                            if (!dx) continue;
                            const double scale = gm[ch] * invstd[static_cast<size_t>(ch)];
                            const double m = static_cast<double>(count);
                            for (int64_t b = 0; b < n; ++b) {
                              const int64_t off = (b * c + ch) * spatial;
                              for (int64_t i = 0; i < spatial; ++i) {
                                if (mode == NormMode::train) {
                                  dx[off + i] += static_cast<T>(
                                      scale * (dy[off + i] - sum_dy / m - xhat[off + i] * sum_dy_xh / m));
                                } else {
                                  dx[off + i] += static_cast<T>(scale * dy[off + i]);
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
Variable<T> relu(const Variable<T>& x) {
  Tensor<T> out(x.shape());
  const T* src = x.value().raw();
  // NaN passes through so divergence stays visible downstream.
  for (size_t i = 0; i < out.size(); ++i) out[i] = src[i] > T{0} || std::isnan(src[i]) ? src[i] : T{0};
  return make_result<T>(std::move(out), {x.node()}, [](Node<T>& self) {
    auto& in = *self.parents[0];
    T* dx = in.grad_buffer().raw();
    const T* v = in.value.raw();
    const T* dy = self.grad.raw();
    for (size_t i = 0; i < in.value.size(); ++i) {
      if (v[i] > T{0}) dx[i] += dy[i];
    }
  });
}

template <typename T>
Variable<T> sigmoid(const Variable<T>& x) {
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T{1}, T{0});
  Tensor<T> out(x.shape());
  const T* src = x.value().raw();
  for (size_t i = 0; i < out.size(); ++i) {
    const T v = src[i];
    T s;
    if (v >= T{0}) {
      s = T{1} / (T{1} + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T{1} + e);
    }
    out[i] = std::clamp(s, lo, hi);
  }
  return make_result<T>(out, {x.node()}, [out](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().raw();
    const T* dy = self.grad.raw();
    for (size_t i = 0; i < out.size(); ++i) dx[i] += dy[i] * out[i] * (T{1} - out[i]);
  });
}

template <typename T>
Variable<T> linear(const Variable<T>& input, const Variable<T>& weight, const Variable<T>& bias) {
  require(input.rank() == 2 && weight.rank() == 2 && bias.rank() == 1,
          "linear: expected input [N,F], weight [F,G], bias [G]; got " + shape_str(input.shape()) + ", " +
              shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
  const int64_t n = input.dim(0), f = input.dim(1), g = weight.dim(1);
  require(weight.dim(0) == f, "linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                                  shape_str(weight.shape()));
  require(bias.dim(0) == g, "linear: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                                shape_str(weight.shape()));
  Tensor<T> out({n, g});
  gemm<T>(false, false, n, g, f, input.value().raw(), f, weight.value().raw(), g, out.raw(), g, false);
  const T* b = bias.value().raw();
  for (int64_t r = 0; r < n; ++r) {
    for (int64_t j = 0; j < g; ++j) out[r * g + j] += b[j];
  }
  return make_result<T>(std::move(out), {input.node(), weight.node(), bias.node()}, [n, f, g](Node<T>& self) {
    auto& in = *self.parents[0];
    auto& wt = *self.parents[1];
    auto& bs = *self.parents[2];
    const T* dy = self.grad.raw();
    if (in.requires_grad) gemm<T>(false, true, n, f, g, dy, g, wt.value.raw(), g, in.grad_buffer().raw(), f, true);
    if (wt.requires_grad) gemm<T>(true, false, f, g, n, in.value.raw(), f, dy, g, wt.grad_buffer().raw(), g, true);
    if (bs.requires_grad) {
      T* db = bs.grad_buffer().raw();
      for (int64_t r = 0; r < n; ++r) {
        for (int64_t j = 0; j < g; ++j) db[j] += dy[r * g + j];
      }
    }
  });
}

template <typename T>
Variable<T> mse_loss(const Variable<T>& prediction, const Variable<T>& target) {
  require(prediction.shape() == target.shape(), "mse_loss: prediction " + shape_str(prediction.shape()) +
                                                    " and target " + shape_str(target.shape()) + " differ");
  const T* p = prediction.value().raw();
  const T* t = target.value().raw();
  const size_t count = prediction.size();
  double s = 0;
  for (size_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    s += d * d;
  }
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(count))),
                        {prediction.node(), target.node()}, [count](Node<T>& self) {
                          auto& pn = *self.parents[0];
                          auto& tn = *self.parents[1];
                          const double g = self.grad[0] * 2.0 / static_cast<double>(count);
                          const T* p = pn.value.raw();
                          const T* t = tn.value.raw();
                          if (pn.requires_grad) {
                            T* dp = pn.grad_buffer().raw();
                            for (size_t i = 0; i < count; ++i) dp[i] += static_cast<T>(g * (p[i] - t[i]));
                          }
                          if (tn.requires_grad) {
                            T* dt = tn.grad_buffer().raw();
                            for (size_t i = 0; i < count; ++i) dt[i] -= static_cast<T>(g * (p[i] - t[i]));
                          }
                        });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require(logits.rank() == 2, "softmax_rows: logits must be [N,K], got " + shape_str(logits.shape()));
  const int64_t n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (int64_t r = 0; r < n; ++r) {
    const T* z = logits.raw() + r * k;
    const T m = *std::max_element(z, z + k);
    double s = 0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - m));
    for (int64_t j = 0; j < k; ++j) out[r * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j] - m)) / s);
  }
  return out;
}

template <typename T>
Variable<T> softmax_cross_entropy(const Variable<T>& logits, const std::vector<int>& targets) {
  require(logits.rank() == 2, "softmax_cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
  const int64_t n = logits.dim(0), k = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == n, "softmax_cross_entropy: " + std::to_string(targets.size()) +
                                                          " targets for " + std::to_string(n) + " rows");
  for (int t : targets) {
    if (t < 0 || t >= k) {
      throw std::out_of_range("softmax_cross_entropy: class index " + std::to_string(t) + " outside [0," +
                              std::to_string(k) + ")");
    }
  }
  Tensor<T> probs = softmax_rows(logits.value());
  double loss = 0;
  for (int64_t r = 0; r < n; ++r) {
    const T* z = logits.value().raw() + r * k;
    const T m = *std::max_element(z, z + k);
    double s = 0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j] - m));
    loss += std::log(s) + m - z[targets[static_cast<size_t>(r)]];
  }
  loss /= static_cast<double>(n);
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(loss)), {logits.node()},
                        [probs = std::move(probs), targets, n, k](Node<T>& self) {
                          T* dz = self.parents[0]->grad_buffer().raw();
                          const double g = self.grad[0] / static_cast<double>(n);
                          for (int64_t r = 0; r < n; ++r) {
                            for (int64_t j = 0; j < k; ++j) {
                              const double onehot = j == targets[static_cast<size_t>(r)] ? 1.0 : 0.0;
                              dz[r * k + j] += static_cast<T>(g * (probs[r * k + j] - onehot));
                            }
                          }
                        });
}

template <typename T>
Variable<T> sum(const Variable<T>& x) {
  double s = 0;
  for (T v : x.value().data()) s += v;
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(s)), {x.node()}, [](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().raw();
    const T g = self.grad[0];
    for (size_t i = 0; i < self.parents[0]->value.size(); ++i) dx[i] += g;
  });
}

template <typename T>
Variable<T> add(const Variable<T>& a, const Variable<T>& b) {
  require(a.shape() == b.shape(), "add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& p : self.parents) p->accumulate(self.grad);
  });
}

template <typename T>
Variable<T> mul(const Variable<T>& a, const Variable<T>& b) {
  require(a.shape() == b.shape(), "mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out(a.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const size_t count = an.value.size();
    if (an.requires_grad) {
      T* da = an.grad_buffer().raw();
      for (size_t i = 0; i < count; ++i) da[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      T* db = bn.grad_buffer().raw();
      for (size_t i = 0; i < count; ++i) db[i] += self.grad[i] * an.value[i];
    }
  });
}

template <typename T>
Variable<T> affine(const Variable<T>& x, T scale, T offset) {
  Tensor<T> out(x.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * scale + offset;
  return make_result<T>(std::move(out), {x.node()}, [scale](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().raw();
    for (size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * scale;
  });
}

template <typename T>
Variable<T> reshape(const Variable<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x.node()}, [](Node<T>& self) {
    T* dx = self.parents[0]->grad_buffer().raw();
    for (size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

#define VIDVISC_INSTANTIATE_OPS(T)                                                                          \
  template Variable<T> conv3d(const Variable<T>&, const Variable<T>&, const Variable<T>&, Extent3);         \
  template Variable<T> conv_transpose3d(const Variable<T>&, const Variable<T>&, const Variable<T>&,         \
                                        Extent3);                                                           \
  template Variable<T> maxpool3d(const Variable<T>&);                                                       \
  template Variable<T> upsample_trilinear(const Variable<T>&, Extent3);                                     \
  template Variable<T> batchnorm3d(const Variable<T>&, const Variable<T>&, const Variable<T>&,              \
                                   BatchNormStats<T>&, NormMode, double, double);                           \
  template Variable<T> relu(const Variable<T>&);                                                            \
  template Variable<T> sigmoid(const Variable<T>&);                                                         \
  template Variable<T> linear(const Variable<T>&, const Variable<T>&, const Variable<T>&);                  \
  template Variable<T> mse_loss(const Variable<T>&, const Variable<T>&);                                    \
  template Variable<T> softmax_cross_entropy(const Variable<T>&, const std::vector<int>&);                  \
  template Variable<T> sum(const Variable<T>&);                                                             \
  template Variable<T> add(const Variable<T>&, const Variable<T>&);                                         \
  template Variable<T> mul(const Variable<T>&, const Variable<T>&);                                         \
  template Variable<T> affine(const Variable<T>&, T, T);                                                    \
  template Variable<T> reshape(const Variable<T>&, Shape);                                                  \
  template Tensor<T> softmax_rows(const Tensor<T>&);

VIDVISC_INSTANTIATE_OPS(float)
VIDVISC_INSTANTIATE_OPS(double)

}  // namespace vidvisc
