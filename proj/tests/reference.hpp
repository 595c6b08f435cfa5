#pragma once

// Naive-loop reference kernels and a finite-difference gradient checker.
// These are deliberately written in the most literal form and share no code
// with include/trecx/ops.hpp beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "trecx/ops.hpp"
#include "trecx/tensor.hpp"

namespace trecx::ref {

using TensorD = Tensor<double>;

inline TensorD random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  TensorD t(std::move(s));
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

// Values bounded away from zero; keeps relu kinks out of finite-difference stencils.
inline TensorD random_tensor_away_from_zero(Shape s, std::mt19937_64& rng, double gap = 0.05) {
  std::uniform_real_distribution<double> d(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  TensorD t(std::move(s));
  for (auto& v : t.vec()) v = sign(rng) ? d(rng) : -d(rng);
  return t;
}

inline std::size_t out_dim(std::size_t in, std::size_t k, std::size_t s, Padding p) {
  if (p == Padding::Same) return static_cast<std::size_t>(std::ceil(static_cast<double>(in) / static_cast<double>(s)));
  return (in - k) / s + 1;
}

inline long pad_before(std::size_t in, std::size_t k, std::size_t s, Padding p) {
  if (p == Padding::Valid) return 0;
  const long out = static_cast<long>(out_dim(in, k, s, p));
  const long total = std::max(0L, (out - 1) * static_cast<long>(s) + static_cast<long>(k) - static_cast<long>(in));
  return total / 2;
}

// out[n,oh,ow,co] = b[co] + sum_{i,j,ci} x[n, oh*s+i-pt, ow*s+j-pl, ci] * k[i,j,ci,co]
inline TensorD conv2d(const TensorD& x, const TensorD& k, const TensorD& b, std::size_t s, Padding p) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t KH = k.dim(0), KW = k.dim(1), CO = k.dim(3);
  const std::size_t OH = out_dim(H, KH, s, p), OW = out_dim(W, KW, s, p);
  const long pt = pad_before(H, KH, s, p), pl = pad_before(W, KW, s, p);
  TensorD y(Shape{N, OH, OW, CO});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow)
        for (std::size_t co = 0; co < CO; ++co) {
          double acc = b.empty() ? 0.0 : b[co];
          for (std::size_t i = 0; i < KH; ++i)
            for (std::size_t j = 0; j < KW; ++j)
              for (std::size_t ci = 0; ci < C; ++ci) {
                const long ih = static_cast<long>(oh * s + i) - pt, iw = static_cast<long>(ow * s + j) - pl;
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
                acc += x[((n * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw)) * C + ci] *
                       k[((i * KW + j) * C + ci) * CO + co];
              }
          y[((n * OH + oh) * OW + ow) * CO + co] = acc;
        }
  return y;
}

inline TensorD depthwise_conv2d(const TensorD& x, const TensorD& k, const TensorD& b, std::size_t s, Padding p) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t KH = k.dim(0), KW = k.dim(1);
  const std::size_t OH = out_dim(H, KH, s, p), OW = out_dim(W, KW, s, p);
  const long pt = pad_before(H, KH, s, p), pl = pad_before(W, KW, s, p);
  TensorD y(Shape{N, OH, OW, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow)
        for (std::size_t c = 0; c < C; ++c) {
          double acc = b.empty() ? 0.0 : b[c];
          for (std::size_t i = 0; i < KH; ++i)
            for (std::size_t j = 0; j < KW; ++j) {
              const long ih = static_cast<long>(oh * s + i) - pt, iw = static_cast<long>(ow * s + j) - pl;
              if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
              acc += x[((n * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw)) * C + c] *
                     k[(i * KW + j) * C + c];
            }
          y[((n * OH + oh) * OW + ow) * C + c] = acc;
        }
  return y;
}

inline TensorD global_avg_pool(const TensorD& x) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  TensorD y(Shape{N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) acc += x[((n * H + h) * W + w) * C + c];
      y[n * C + c] = acc / static_cast<double>(H * W);
    }
  return y;
}

inline TensorD dense(const TensorD& x, const TensorD& w, const TensorD& b) {
  const std::size_t B = x.dim(0), N = x.dim(1), M = w.dim(1);
  TensorD y(Shape{B, M});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t j = 0; j < M; ++j) {
      double acc = b.empty() ? 0.0 : b[j];
      for (std::size_t i = 0; i < N; ++i) acc += x[r * N + i] * w[i * M + j];
      y[r * M + j] = acc;
    }
  return y;
}

inline TensorD relu(const TensorD& x) {
  TensorD y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : 0.0;
  return y;
}

// Train-mode batch norm from directly computed per-channel moments.
inline TensorD batch_norm_train(const TensorD& x, const TensorD& scale, const TensorD& shift, double eps) {
  const std::size_t C = x.dim(x.rank() - 1), R = x.size() / C;
  TensorD y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    for (std::size_t r = 0; r < R; ++r) mean += x[r * C + c];
    mean /= static_cast<double>(R);
    for (std::size_t r = 0; r < R; ++r) var += (x[r * C + c] - mean) * (x[r * C + c] - mean);
    var /= static_cast<double>(R);
    for (std::size_t r = 0; r < R; ++r)
      y[r * C + c] = scale[c] * (x[r * C + c] - mean) / std::sqrt(var + eps) + shift[c];
  }
  return y;
}

inline TensorD batch_norm_infer(const TensorD& x, const TensorD& scale, const TensorD& shift, const TensorD& mean,
                                const TensorD& var, double eps) {
  const std::size_t C = x.dim(x.rank() - 1), R = x.size() / C;
  TensorD y(x.shape());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c)
      y[r * C + c] = scale[c] * (x[r * C + c] - mean[c]) / std::sqrt(var[c] + eps) + shift[c];
  return y;
}

inline TensorD softmax(const TensorD& z) {
  const std::size_t B = z.dim(0), K = z.dim(1);
  TensorD p(z.shape());
  for (std::size_t r = 0; r < B; ++r) {
    double denom = 0;
    for (std::size_t j = 0; j < K; ++j) denom += std::exp(z[r * K + j]);
    for (std::size_t j = 0; j < K; ++j) p[r * K + j] = std::exp(z[r * K + j]) / denom;
  }
  return p;
}

inline double cross_entropy(const TensorD& p, const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t r = 0; r < labels.size(); ++r)
    total += -std::log(std::max(p[r * p.dim(1) + static_cast<std::size_t>(labels[r])], 1e-12));
  return total / static_cast<double>(labels.size());
}

// Elementwise relative error with denominator max(|a|, |b|, floor).
inline double max_rel_error(const TensorD& a, const TensorD& b, double floor = 1e-8) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return worst;
}

// max |a - b| / max |b|: the error measure used for single-precision kernels, where
// cancellation in individual outputs makes per-element relative error meaningless.
inline double normwise_rel_error(const TensorD& a, const TensorD& b) {
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    err = std::max(err, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale > 0 ? err / scale : err;
}

// Central finite differences of a scalar function w.r.t. every entry of `x`.
inline TensorD finite_difference(const std::function<double()>& loss, TensorD& x, double h = 1e-5) {
  TensorD g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = loss();
    x[i] = saved - h;
    const double down = loss();
    x[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double weighted_sum(const TensorD& y, const TensorD& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

}  // namespace trecx::ref
