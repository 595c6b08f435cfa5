#pragma once

// Forward kernels and their adjoints for every layer the two-exit models use.
// All functions are pure except batch_norm in training mode, which updates
// the running statistics passed in by reference.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "trecx/tensor.hpp"

namespace trecx {

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

inline const char* to_string(Padding p) { return p == Padding::Same ? "same" : "valid"; }

inline constexpr double kBatchNormEpsilon = 1e-3;
inline constexpr double kBatchNormMomentum = 0.99;
inline constexpr double kCrossEntropyFloor = 1e-12;

// Output size and padding of one spatial axis.
struct AxisGeometry {
  std::size_t in = 0, kernel = 0, stride = 1, pad_before = 0, out = 0;
};

inline AxisGeometry axis_geometry(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("stride must be >= 1");
  AxisGeometry g{in, kernel, stride, 0, 0};
  if (padding == Padding::Same) {
    g.out = (in + stride - 1) / stride;
    const long total = static_cast<long>((g.out - 1) * stride + kernel) - static_cast<long>(in);
    g.pad_before = total > 0 ? static_cast<std::size_t>(total / 2) : 0;
  } else {
    if (in < kernel)
      throw ShapeError("valid padding needs input " + std::to_string(in) + " >= kernel " +
                       std::to_string(kernel));
    g.out = (in - kernel) / stride + 1;
  }
  return g;
}

struct ConvGeometry {
  std::size_t batch = 0, in_channels = 0;
  AxisGeometry h, w;
};

inline ConvGeometry conv_geometry(const Shape& input, std::size_t kh, std::size_t kw, std::size_t stride,
                                  Padding padding) {
  if (input.rank() != 4) throw ShapeError("expected rank-4 NHWC input, got " + input.str());
  return {input[0], input[3], axis_geometry(input[1], kh, stride, padding),
          axis_geometry(input[2], kw, stride, padding)};
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline bool is_plain_pointwise(const ConvGeometry& g) {
  return g.h.kernel == 1 && g.w.kernel == 1 && g.h.stride == 1 && g.w.stride == 1 && g.h.pad_before == 0 &&
         g.w.pad_before == 0;
}

// Rows are output pixels (n, oh, ow); columns follow the kernel layout (kh, kw, cin).
template <typename T>
std::vector<T> im2col(const Tensor<T>& x, const ConvGeometry& g) {
  const std::size_t cin = g.in_channels, kh = g.h.kernel, kw = g.w.kernel;
  const std::size_t cols = kh * kw * cin;
  std::vector<T> out(g.batch * g.h.out * g.w.out * cols, T{0});
  T* dst = out.data();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oh = 0; oh < g.h.out; ++oh)
      for (std::size_t ow = 0; ow < g.w.out; ++ow, dst += cols)
        for (std::size_t i = 0; i < kh; ++i) {
          const long ih = static_cast<long>(oh * g.h.stride + i) - static_cast<long>(g.h.pad_before);
          if (ih < 0 || ih >= static_cast<long>(g.h.in)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const long iw = static_cast<long>(ow * g.w.stride + j) - static_cast<long>(g.w.pad_before);
            if (iw < 0 || iw >= static_cast<long>(g.w.in)) continue;
            const T* src = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            std::copy(src, src + cin, dst + (i * kw + j) * cin);
          }
        }
  return out;
}

template <typename T>
void col2im_accumulate(const std::vector<T>& cols_data, const ConvGeometry& g, Tensor<T>& dx) {
  const std::size_t cin = g.in_channels, kh = g.h.kernel, kw = g.w.kernel;
  const std::size_t cols = kh * kw * cin;
  const T* src = cols_data.data();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oh = 0; oh < g.h.out; ++oh)
      for (std::size_t ow = 0; ow < g.w.out; ++ow, src += cols)
        for (std::size_t i = 0; i < kh; ++i) {
          const long ih = static_cast<long>(oh * g.h.stride + i) - static_cast<long>(g.h.pad_before);
          if (ih < 0 || ih >= static_cast<long>(g.h.in)) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const long iw = static_cast<long>(ow * g.w.stride + j) - static_cast<long>(g.w.pad_before);
            if (iw < 0 || iw >= static_cast<long>(g.w.in)) continue;
            T* d = &dx.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* s = src + (i * kw + j) * cin;
            for (std::size_t c = 0; c < cin; ++c) d[c] += s[c];
          }
        }
}

template <typename T>
void check_bias(const Tensor<T>& bias, std::size_t channels, const char* op) {
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != channels))
    throw ShapeError(std::string(op) + " bias", bias.shape(), Shape{channels});
}

// Sums rows of a (rows x cols) buffer into acc, in row order.
template <typename T>
void accumulate_rows(const T* data, std::size_t rows, std::size_t cols, T* acc) {
  for (std::size_t r = 0; r < rows; ++r, data += cols)
    for (std::size_t c = 0; c < cols; ++c) acc[c] += data[c];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard convolution. kernel is kh x kw x cin x cout; bias may be empty.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 Padding padding) {
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be rank 4, got " + kernel.shape().str());
  if (x.rank() != 4 || x.dim(3) != kernel.dim(2)) throw ShapeError("conv2d input/kernel", x.shape(), kernel.shape());
  const auto g = conv_geometry(x.shape(), kernel.dim(0), kernel.dim(1), stride, padding);
  const std::size_t cout = kernel.dim(3);
  detail::check_bias(bias, cout, "conv2d");

  Tensor<T> y(Shape{g.batch, g.h.out, g.w.out, cout});
  const std::size_t rows = g.batch * g.h.out * g.w.out;
  const std::size_t k = kernel.dim(0) * kernel.dim(1) * g.in_channels;
  detail::ConstMatMap<T> w(kernel.data(), static_cast<long>(k), static_cast<long>(cout));
  detail::MatMap<T> out(y.data(), static_cast<long>(rows), static_cast<long>(cout));
  if (detail::is_plain_pointwise(g)) {
    detail::ConstMatMap<T> in(x.data(), static_cast<long>(rows), static_cast<long>(k));
    out.noalias() = in * w;
  } else {
    const auto cols = detail::im2col(x, g);
    detail::ConstMatMap<T> in(cols.data(), static_cast<long>(rows), static_cast<long>(k));
    out.noalias() = in * w;
  }
  if (!bias.empty()) {
    T* p = y.data();
    for (std::size_t r = 0; r < rows; ++r, p += cout)
      for (std::size_t c = 0; c < cout; ++c) p[c] += bias[c];
  }
  debug_assert_finite(y, "conv2d");
  return y;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input, kernel, bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, bool has_bias, std::size_t stride,
                             Padding padding, const Tensor<T>& dy) {
  const auto g = conv_geometry(x.shape(), kernel.dim(0), kernel.dim(1), stride, padding);
  const std::size_t cout = kernel.dim(3);
  const std::size_t rows = g.batch * g.h.out * g.w.out;
  const std::size_t k = kernel.dim(0) * kernel.dim(1) * g.in_channels;
  if (dy.shape() != Shape{g.batch, g.h.out, g.w.out, cout})
    throw ShapeError("conv2d upstream gradient", dy.shape(), Shape{g.batch, g.h.out, g.w.out, cout});

  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(kernel.shape()), {}};
  detail::ConstMatMap<T> w(kernel.data(), static_cast<long>(k), static_cast<long>(cout));
  detail::ConstMatMap<T> up(dy.data(), static_cast<long>(rows), static_cast<long>(cout));
  detail::MatMap<T> dw(grads.kernel.data(), static_cast<long>(k), static_cast<long>(cout));
  if (detail::is_plain_pointwise(g)) {
    detail::ConstMatMap<T> in(x.data(), static_cast<long>(rows), static_cast<long>(k));
    dw.noalias() = in.transpose() * up;
    detail::MatMap<T> dx(grads.input.data(), static_cast<long>(rows), static_cast<long>(k));
    dx.noalias() = up * w.transpose();
  } else {
    const auto cols = detail::im2col(x, g);
    detail::ConstMatMap<T> in(cols.data(), static_cast<long>(rows), static_cast<long>(k));
    dw.noalias() = in.transpose() * up;
    std::vector<T> dcols(rows * k);
    detail::MatMap<T> dc(dcols.data(), static_cast<long>(rows), static_cast<long>(k));
    dc.noalias() = up * w.transpose();
    detail::col2im_accumulate(dcols, g, grads.input);
  }
  if (has_bias) {
    grads.bias = Tensor<T>(Shape{cout});
    detail::accumulate_rows(dy.data(), rows, cout, grads.bias.data());
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Depthwise convolution: kernel kh x kw x c, one filter per channel.

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                           std::size_t stride, Padding padding) {
  if (kernel.rank() != 3) throw ShapeError("depthwise kernel must be rank 3, got " + kernel.shape().str());
  if (x.rank() != 4 || x.dim(3) != kernel.dim(2))
    throw ShapeError("depthwise input/kernel", x.shape(), kernel.shape());
  const auto g = conv_geometry(x.shape(), kernel.dim(0), kernel.dim(1), stride, padding);
  const std::size_t c = g.in_channels;
  detail::check_bias(bias, c, "depthwise_conv2d");

  Tensor<T> y(Shape{g.batch, g.h.out, g.w.out, c});
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oh = 0; oh < g.h.out; ++oh)
      for (std::size_t ow = 0; ow < g.w.out; ++ow) {
        T* out = &y.at(n, oh, ow, 0);
        for (std::size_t i = 0; i < g.h.kernel; ++i) {
          const long ih = static_cast<long>(oh * g.h.stride + i) - static_cast<long>(g.h.pad_before);
          if (ih < 0 || ih >= static_cast<long>(g.h.in)) continue;
          for (std::size_t j = 0; j < g.w.kernel; ++j) {
            const long iw = static_cast<long>(ow * g.w.stride + j) - static_cast<long>(g.w.pad_before);
            if (iw < 0 || iw >= static_cast<long>(g.w.in)) continue;
            const T* in = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* kk = kernel.data() + (i * g.w.kernel + j) * c;
            for (std::size_t ch = 0; ch < c; ++ch) out[ch] += in[ch] * kk[ch];
          }
        }
        if (!bias.empty())
          for (std::size_t ch = 0; ch < c; ++ch) out[ch] += bias[ch];
      }
  debug_assert_finite(y, "depthwise_conv2d");
  return y;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, bool has_bias,
                                       std::size_t stride, Padding padding, const Tensor<T>& dy) {
  const auto g = conv_geometry(x.shape(), kernel.dim(0), kernel.dim(1), stride, padding);
  const std::size_t c = g.in_channels;
  if (dy.shape() != Shape{g.batch, g.h.out, g.w.out, c})
    throw ShapeError("depthwise upstream gradient", dy.shape(), Shape{g.batch, g.h.out, g.w.out, c});
  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(kernel.shape()), {}};
  if (has_bias) grads.bias = Tensor<T>(Shape{c});
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oh = 0; oh < g.h.out; ++oh)
      for (std::size_t ow = 0; ow < g.w.out; ++ow) {
        const T* up = &dy.at(n, oh, ow, 0);
        for (std::size_t i = 0; i < g.h.kernel; ++i) {
          const long ih = static_cast<long>(oh * g.h.stride + i) - static_cast<long>(g.h.pad_before);
          if (ih < 0 || ih >= static_cast<long>(g.h.in)) continue;
          for (std::size_t j = 0; j < g.w.kernel; ++j) {
            const long iw = static_cast<long>(ow * g.w.stride + j) - static_cast<long>(g.w.pad_before);
            if (iw < 0 || iw >= static_cast<long>(g.w.in)) continue;
            const std::size_t off = (i * g.w.kernel + j) * c;
            const T* in = &x.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            T* din = &grads.input.at(n, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), 0);
            const T* kk = kernel.data() + off;
            T* dk = grads.kernel.data() + off;
            for (std::size_t ch = 0; ch < c; ++ch) {
              din[ch] += up[ch] * kk[ch];
              dk[ch] += up[ch] * in[ch];
            }
          }
        }
        if (has_bias)
          for (std::size_t ch = 0; ch < c; ++ch) grads.bias[ch] += up[ch];
      }
  return grads;
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution; kernel is 1 x 1 x cin x cout.

template <typename T>
Tensor<T> pointwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  if (kernel.rank() != 4 || kernel.dim(0) != 1 || kernel.dim(1) != 1)
    throw ShapeError("pointwise kernel must be 1x1xCinxCout, got " + kernel.shape().str());
  return conv2d(x, kernel, bias, 1, Padding::Valid);
}

template <typename T>
ConvGrads<T> pointwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, bool has_bias,
                                       const Tensor<T>& dy) {
  return conv2d_backward(x, kernel, has_bias, 1, Padding::Valid, dy);
}

// ---------------------------------------------------------------------------
// Pooling.

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects NHWC, got " + x.shape().str());
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> y(Shape{n, c});
  const T scale = T{1} / static_cast<T>(hw);
  for (std::size_t b = 0; b < n; ++b) {
    T* out = &y.at(b, 0);
    detail::accumulate_rows(x.data() + b * hw * c, hw, c, out);
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] *= scale;
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& dy) {
  const std::size_t n = input_shape[0], hw = input_shape[1] * input_shape[2], c = input_shape[3];
  if (dy.shape() != Shape{n, c}) throw ShapeError("global_avg_pool upstream gradient", dy.shape(), Shape{n, c});
  Tensor<T> dx(input_shape);
  const T scale = T{1} / static_cast<T>(hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) dx[(b * hw + p) * c + ch] = dy.at(b, ch) * scale;
  return dx;
}

// Non-overlapping average pooling with window == stride.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 4) throw ShapeError("avg_pool expects NHWC, got " + x.shape().str());
  if (window == 0 || x.dim(1) % window || x.dim(2) % window)
    throw ShapeError("avg_pool window " + std::to_string(window) + " does not tile " + x.shape().str());
  const std::size_t oh = x.dim(1) / window, ow = x.dim(2) / window, c = x.dim(3);
  Tensor<T> y(Shape{x.dim(0), oh, ow, c});
  const T scale = T{1} / static_cast<T>(window * window);
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T* out = &y.at(n, i, j, 0);
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) {
            const T* in = &x.at(n, i * window + a, j * window + b, 0);
            for (std::size_t ch = 0; ch < c; ++ch) out[ch] += in[ch];
          }
        for (std::size_t ch = 0; ch < c; ++ch) out[ch] *= scale;
      }
  return y;
}

template <typename T>
Tensor<T> avg_pool_backward(const Shape& input_shape, std::size_t window, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const std::size_t c = input_shape[3];
  const T scale = T{1} / static_cast<T>(window * window);
  for (std::size_t n = 0; n < input_shape[0]; ++n)
    for (std::size_t h = 0; h < input_shape[1]; ++h)
      for (std::size_t w = 0; w < input_shape[2]; ++w) {
        const T* up = &dy.at(n, h / window, w / window, 0);
        T* d = &dx.at(n, h, w, 0);
        for (std::size_t ch = 0; ch < c; ++ch) d[ch] = up[ch] * scale;
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected: x is b x n, weights n x m, bias m (may be empty).
// The reduction over n runs in index order so zero-padded inputs add exactly nothing.

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (x.rank() != 2 || weights.rank() != 2 || x.dim(1) != weights.dim(0))
    throw ShapeError("dense input/weights", x.shape(), weights.shape());
  const std::size_t b = x.dim(0), n = x.dim(1), m = weights.dim(1);
  detail::check_bias(bias, m, "dense");
  Tensor<T> y(Shape{b, m});
  for (std::size_t r = 0; r < b; ++r) {
    T* out = &y.at(r, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const T xi = x.at(r, i);
      const T* wrow = weights.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) out[j] += xi * wrow[j];
    }
    if (!bias.empty())
      for (std::size_t j = 0; j < m; ++j) out[j] += bias[j];
  }
  debug_assert_finite(y, "dense");
  return y;
}

template <typename T>
struct DenseGrads {
  Tensor<T> input, weights, bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights, bool has_bias, const Tensor<T>& dy) {
  const std::size_t b = x.dim(0), n = x.dim(1), m = weights.dim(1);
  if (dy.shape() != Shape{b, m}) throw ShapeError("dense upstream gradient", dy.shape(), Shape{b, m});
  DenseGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weights.shape()), {}};
  for (std::size_t r = 0; r < b; ++r) {
    const T* up = &dy.at(r, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const T* wrow = weights.data() + i * m;
      T* dwrow = g.weights.data() + i * m;
      const T xi = x.at(r, i);
      T acc{0};
      for (std::size_t j = 0; j < m; ++j) {
        acc += up[j] * wrow[j];
        dwrow[j] += xi * up[j];
      }
      g.input.at(r, i) = acc;
    }
  }
  if (has_bias) {
    g.bias = Tensor<T>(Shape{m});
    detail::accumulate_rows(dy.data(), b, m, g.bias.data());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.vec()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  if (x.shape() != dy.shape()) throw ShapeError("relu upstream gradient", dy.shape(), x.shape());
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
  Tensor<T> y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

// Channel concatenation of two NHWC tensors with equal N, H, W.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_channels", a.shape(), b.shape());
  const std::size_t pixels = a.dim(0) * a.dim(1) * a.dim(2), ca = a.dim(3), cb = b.dim(3);
  Tensor<T> y(Shape{a.dim(0), a.dim(1), a.dim(2), ca + cb});
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(a.data() + p * ca, ca, y.data() + p * (ca + cb));
    std::copy_n(b.data() + p * cb, cb, y.data() + p * (ca + cb) + ca);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(std::size_t ca, const Tensor<T>& dy) {
  const std::size_t c = dy.dim(3), cb = c - ca, pixels = dy.dim(0) * dy.dim(1) * dy.dim(2);
  Tensor<T> da(Shape{dy.dim(0), dy.dim(1), dy.dim(2), ca});
  Tensor<T> db(Shape{dy.dim(0), dy.dim(1), dy.dim(2), cb});
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(dy.data() + p * c, ca, da.data() + p * ca);
    std::copy_n(dy.data() + p * c + ca, cb, db.data() + p * cb);
  }
  return {std::move(da), std::move(db)};
}

// Channels [first, first + count) of an NHWC tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t first, std::size_t count) {
  if (x.rank() != 4 || count == 0 || first + count > x.dim(3))
    throw ShapeError("slice_channels [" + std::to_string(first) + "," + std::to_string(first + count) +
                     ") out of range for " + x.shape().str());
  const std::size_t pixels = x.dim(0) * x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> y(Shape{x.dim(0), x.dim(1), x.dim(2), count});
  for (std::size_t p = 0; p < pixels; ++p) std::copy_n(x.data() + p * c + first, count, y.data() + p * count);
  return y;
}

template <typename T>
Tensor<T> slice_channels_backward(const Shape& input_shape, std::size_t first, const Tensor<T>& dy) {
  Tensor<T> dx(input_shape);
  const std::size_t pixels = input_shape[0] * input_shape[1] * input_shape[2], c = input_shape[3];
  const std::size_t count = dy.dim(3);
  for (std::size_t p = 0; p < pixels; ++p) std::copy_n(dy.data() + p * count, count, dx.data() + p * c + first);
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization over every axis but the last.

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Infer;
  Tensor<T> normalized;  // x-hat
  std::vector<T> inv_std;
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, Tensor<T>& running_mean,
                     Tensor<T>& running_var, Mode mode, BatchNormCache<T>* cache = nullptr,
                     T epsilon = static_cast<T>(kBatchNormEpsilon), T momentum = static_cast<T>(kBatchNormMomentum)) {
  const std::size_t c = x.dim(x.rank() - 1);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&scale, &shift, &running_mean, &running_var})
    if (p->shape() != Shape{c}) throw ShapeError("batch_norm parameter", p->shape(), Shape{c});
  const std::size_t rows = x.size() / c;

  std::vector<T> mean(c, T{0}), var(c, T{0});
  if (mode == Mode::Train) {
    detail::accumulate_rows(x.data(), rows, c, mean.data());
    for (auto& m : mean) m /= static_cast<T>(rows);
    const T* p = x.data();
    for (std::size_t r = 0; r < rows; ++r, p += c)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T d = p[ch] - mean[ch];
        var[ch] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(rows);
    for (std::size_t ch = 0; ch < c; ++ch) {
      running_mean[ch] = momentum * running_mean[ch] + (T{1} - momentum) * mean[ch];
      running_var[ch] = momentum * running_var[ch] + (T{1} - momentum) * var[ch];
    }
  } else {
    std::copy_n(running_mean.data(), c, mean.data());
    std::copy_n(running_var.data(), c, var.data());
  }

  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(var[ch] + epsilon);

  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
      y[i] = scale[ch] * xhat[i] + shift[ch];
    }
  if (cache) *cache = BatchNormCache<T>{mode, std::move(xhat), std::move(inv_std)};
  debug_assert_finite(y, "batch_norm");
  return y;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input, scale, shift;
};

// `training` marks a backward pass that feeds an optimizer step; it requires a train-mode forward.
template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const Tensor<T>& scale, const Tensor<T>& dy,
                                      bool training) {
  if (training && cache.mode != Mode::Train)
    throw std::logic_error("batch_norm backward during training requires a train-mode forward pass");
  if (dy.shape() != cache.normalized.shape())
    throw ShapeError("batch_norm upstream gradient", dy.shape(), cache.normalized.shape());
  const std::size_t c = scale.size(), rows = dy.size() / c;
  BatchNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>(Shape{c}), Tensor<T>(Shape{c})};
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      g.scale[ch] += dy[i] * cache.normalized[i];
      g.shift[ch] += dy[i];
    }
  if (cache.mode == Mode::Infer) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) g.input[r * c + ch] = dy[r * c + ch] * scale[ch] * cache.inv_std[ch];
    return g;
  }
  const T m = static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      const T dxhat = dy[i] * scale[ch];
      // sum(dxhat) = scale * sum(dy); sum(dxhat * xhat) = scale * dscale
      g.input[i] = cache.inv_std[ch] / m *
                   (m * dxhat - scale[ch] * g.shift[ch] - cache.normalized[i] * scale[ch] * g.scale[ch]);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy.

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects batch x classes, got " + logits.shape().str());
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t r = 0; r < b; ++r) {
    const T* z = &logits.at(r, 0);
    T* out = &p.at(r, 0);
    const T mx = *std::max_element(z, z + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += (out[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
  }
  return p;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dp) {
  const std::size_t b = probs.dim(0), k = probs.dim(1);
  Tensor<T> dz(probs.shape());
  for (std::size_t r = 0; r < b; ++r) {
    T dot{0};
    for (std::size_t j = 0; j < k; ++j) dot += dp.at(r, j) * probs.at(r, j);
    for (std::size_t j = 0; j < k; ++j) dz.at(r, j) = probs.at(r, j) * (dp.at(r, j) - dot);
  }
  return dz;
}

inline void check_labels(std::span<const int> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch)
    throw ShapeError("label count " + std::to_string(labels.size()) + " != batch " + std::to_string(batch));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw std::out_of_range("label " + std::to_string(l) + " outside [0," + std::to_string(classes) + ")");
}

// Mean over the batch of -log(max(p[label], 1e-12)).
template <typename T>
T cross_entropy(const Tensor<T>& probs, std::span<const int> labels) {
  check_labels(labels, probs.dim(0), probs.dim(1));
  const T floor = static_cast<T>(kCrossEntropyFloor);
  T total{0};
  for (std::size_t r = 0; r < labels.size(); ++r)
    total -= std::log(std::max(probs.at(r, static_cast<std::size_t>(labels[r])), floor));
  return total / static_cast<T>(labels.size());
}

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& probs, std::span<const int> labels) {
  check_labels(labels, probs.dim(0), probs.dim(1));
  const T floor = static_cast<T>(kCrossEntropyFloor);
  const T inv_b = T{1} / static_cast<T>(labels.size());
  Tensor<T> dp(probs.shape());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const T p = probs.at(r, static_cast<std::size_t>(labels[r]));
    if (p > floor) dp.at(r, static_cast<std::size_t>(labels[r])) = -inv_b / p;
  }
  return dp;
}

// Gradient of mean cross-entropy(softmax(z)) w.r.t. z: (p - onehot) / batch.
template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probs, std::span<const int> labels) {
  check_labels(labels, probs.dim(0), probs.dim(1));
  const T inv_b = T{1} / static_cast<T>(labels.size());
  Tensor<T> dz = probs;
  for (std::size_t r = 0; r < labels.size(); ++r) dz.at(r, static_cast<std::size_t>(labels[r])) -= T{1};
  for (auto& v : dz.vec()) v *= inv_b;
  return dz;
}

}  // namespace trecx
