#pragma once

// Random small problem instances for every layer op, plus forward-oracle and
// gradient-oracle checks over them. Shared by the unit and acceptance suites.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "reference.hpp"
#include "trecx/ops.hpp"

namespace trecx::cases {

using ref::TensorD;

struct ConvCase {
  TensorD x, kernel, bias;
  std::size_t stride;
  Padding padding;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline ConvCase conv_case(std::mt19937_64& rng, bool depthwise, bool pointwise = false) {
  const std::size_t n = pick(rng, 1, 2), h = pick(rng, 3, 7), w = pick(rng, 3, 7), c = pick(rng, 1, 4);
  const std::size_t kh = pointwise ? 1 : pick(rng, 1, 3), kw = pointwise ? 1 : pick(rng, 1, 3);
  const std::size_t stride = pointwise ? 1 : pick(rng, 1, 2);
  const Padding pad = pointwise || pick(rng, 0, 1) ? Padding::Same : Padding::Valid;
  ConvCase cs{ref::random_tensor(Shape{n, h, w, c}, rng), {}, {}, stride, pad};
  if (depthwise) {
    cs.kernel = ref::random_tensor(Shape{kh, kw, c}, rng);
    cs.bias = ref::random_tensor(Shape{c}, rng);
  } else {
    const std::size_t co = pick(rng, 1, 5);
    cs.kernel = ref::random_tensor(Shape{kh, kw, c, co}, rng);
    if (pick(rng, 0, 3)) cs.bias = ref::random_tensor(Shape{co}, rng);
  }
  return cs;
}

struct Result {
  bool ok = true;
  double worst = 0;
  std::string detail;

  void record(double err, double tol, const std::string& what) {
    if (err > worst) worst = err;
    if (err > tol && ok) {
      ok = false;
      detail = what + " error " + std::to_string(err);
    }
  }
};

// ---------------------------------------------------------------------------
// Forward oracles: double-precision run compared elementwise, single-precision run
// compared normwise, both against the naive loops.

inline void compare_forward(Result& r, const TensorD& impl_double, const Tensor<float>& impl_float,
                            const TensorD& reference, const std::string& op, double tol) {
  r.record(ref::max_rel_error(impl_double, reference), tol, op + " (double, elementwise)");
  r.record(ref::normwise_rel_error(impl_float.cast<double>(), reference), tol, op + " (single, normwise)");
}

inline Result forward_conv2d(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto c = conv_case(rng, false);
    const auto expected = ref::conv2d(c.x, c.kernel, c.bias, c.stride, c.padding);
    compare_forward(r, conv2d(c.x, c.kernel, c.bias, c.stride, c.padding),
                    conv2d(c.x.cast<float>(), c.kernel.cast<float>(), c.bias.cast<float>(), c.stride, c.padding),
                    expected, "conv2d", tol);
  }
  return r;
}

inline Result forward_depthwise(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto c = conv_case(rng, true);
    const auto expected = ref::depthwise_conv2d(c.x, c.kernel, c.bias, c.stride, c.padding);
    compare_forward(r, depthwise_conv2d(c.x, c.kernel, c.bias, c.stride, c.padding),
                    depthwise_conv2d(c.x.cast<float>(), c.kernel.cast<float>(), c.bias.cast<float>(), c.stride,
                                     c.padding),
                    expected, "depthwise_conv2d", tol);
  }
  return r;
}

inline Result forward_pointwise(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto c = conv_case(rng, false, true);
    const auto expected = ref::conv2d(c.x, c.kernel, c.bias, 1, Padding::Valid);
    compare_forward(r, pointwise_conv2d(c.x, c.kernel, c.bias),
                    pointwise_conv2d(c.x.cast<float>(), c.kernel.cast<float>(), c.bias.cast<float>()), expected,
                    "pointwise_conv2d", tol);
  }
  return r;
}

inline Result forward_pool(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto x = ref::random_tensor(Shape{pick(rng, 1, 3), pick(rng, 1, 6), pick(rng, 1, 6), pick(rng, 1, 5)}, rng);
    compare_forward(r, global_avg_pool(x), global_avg_pool(x.cast<float>()), ref::global_avg_pool(x),
                    "global_avg_pool", tol);
  }
  return r;
}

inline Result forward_dense(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::size_t b = pick(rng, 1, 4), n = pick(rng, 1, 12), m = pick(rng, 1, 8);
    const auto x = ref::random_tensor(Shape{b, n}, rng);
    const auto w = ref::random_tensor(Shape{n, m}, rng);
    const auto bias = ref::random_tensor(Shape{m}, rng);
    compare_forward(r, dense(x, w, bias), dense(x.cast<float>(), w.cast<float>(), bias.cast<float>()),
                    ref::dense(x, w, bias), "dense", tol);
  }
  return r;
}

inline Result forward_relu(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto x = ref::random_tensor(Shape{pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 4)}, rng);
    compare_forward(r, relu(x), relu(x.cast<float>()), ref::relu(x), "relu", tol);
  }
  return r;
}

inline Result forward_batch_norm(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::size_t c = pick(rng, 1, 4);
    const auto x = ref::random_tensor(Shape{pick(rng, 2, 3), pick(rng, 2, 5), pick(rng, 2, 5), c}, rng);
    const auto scale = ref::random_tensor(Shape{c}, rng, 0.5, 1.5);
    const auto shift = ref::random_tensor(Shape{c}, rng);
    TensorD rm(Shape{c}), rv(Shape{c}, 1.0);
    Tensor<float> rmf(Shape{c}), rvf(Shape{c}, 1.0f);
    const auto train_d = batch_norm(x, scale, shift, rm, rv, Mode::Train);
    const auto train_f = batch_norm(x.cast<float>(), scale.cast<float>(), shift.cast<float>(), rmf, rvf, Mode::Train);
    compare_forward(r, train_d, train_f, ref::batch_norm_train(x, scale, shift, kBatchNormEpsilon),
                    "batch_norm(train)", tol);
    const auto mean = ref::random_tensor(Shape{c}, rng), var = ref::random_tensor(Shape{c}, rng, 0.2, 2.0);
    TensorD m2 = mean, v2 = var;
    Tensor<float> m2f = mean.cast<float>(), v2f = var.cast<float>();
    compare_forward(r, batch_norm(x, scale, shift, m2, v2, Mode::Infer),
                    batch_norm(x.cast<float>(), scale.cast<float>(), shift.cast<float>(), m2f, v2f, Mode::Infer),
                    ref::batch_norm_infer(x, scale, shift, mean, var, kBatchNormEpsilon), "batch_norm(infer)", tol);
  }
  return r;
}

inline Result forward_softmax(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto z = ref::random_tensor(Shape{pick(rng, 1, 4), pick(rng, 2, 12)}, rng, -4, 4);
    compare_forward(r, softmax(z), softmax(z.cast<float>()), ref::softmax(z), "softmax", tol);
  }
  return r;
}

inline Result forward_cross_entropy(std::size_t n_cases, std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::size_t b = pick(rng, 1, 5), k = pick(rng, 2, 10);
    const auto p = ref::softmax(ref::random_tensor(Shape{b, k}, rng, -3, 3));
    std::vector<int> labels(b);
    for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
    const double expected = ref::cross_entropy(p, labels);
    const double got_d = cross_entropy(p, labels);
    const double got_f = cross_entropy(p.cast<float>(), labels);
    r.record(std::abs(got_d - expected) / std::max(std::abs(expected), 1e-8), tol, "cross_entropy (double)");
    r.record(std::abs(got_f - expected) / std::max(std::abs(expected), 1e-8), tol, "cross_entropy (single)");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient oracles: L = sum(op(inputs) * R) for a random R; analytic adjoints vs
// central finite differences in double precision.

inline constexpr double kGradTol = 1e-4;

inline void compare_grad(Result& r, const TensorD& analytic, const std::function<double()>& loss, TensorD& wrt,
                         const std::string& what, double tol) {
  r.record(ref::max_rel_error(analytic, ref::finite_difference(loss, wrt)), tol, what);
}

inline Result grad_conv2d(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto c = conv_case(rng, false);
    const auto y = conv2d(c.x, c.kernel, c.bias, c.stride, c.padding);
    const auto R = ref::random_tensor(y.shape(), rng);
    auto loss = [&] { return ref::weighted_sum(conv2d(c.x, c.kernel, c.bias, c.stride, c.padding), R); };
    auto g = conv2d_backward(c.x, c.kernel, !c.bias.empty(), c.stride, c.padding, R);
    compare_grad(r, g.input, loss, c.x, "conv2d dx", tol);
    compare_grad(r, g.kernel, loss, c.kernel, "conv2d dkernel", tol);
    if (!c.bias.empty()) compare_grad(r, g.bias, loss, c.bias, "conv2d dbias", tol);
  }
  return r;
}

inline Result grad_depthwise(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto c = conv_case(rng, true);
    const auto y = depthwise_conv2d(c.x, c.kernel, c.bias, c.stride, c.padding);
    const auto R = ref::random_tensor(y.shape(), rng);
    auto loss = [&] { return ref::weighted_sum(depthwise_conv2d(c.x, c.kernel, c.bias, c.stride, c.padding), R); };
    auto g = depthwise_conv2d_backward(c.x, c.kernel, true, c.stride, c.padding, R);
    compare_grad(r, g.input, loss, c.x, "depthwise dx", tol);
    compare_grad(r, g.kernel, loss, c.kernel, "depthwise dkernel", tol);
    compare_grad(r, g.bias, loss, c.bias, "depthwise dbias", tol);
  }
  return r;
}

inline Result grad_pointwise(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto c = conv_case(rng, false, true);
    const auto y = pointwise_conv2d(c.x, c.kernel, c.bias);
    const auto R = ref::random_tensor(y.shape(), rng);
    auto loss = [&] { return ref::weighted_sum(pointwise_conv2d(c.x, c.kernel, c.bias), R); };
    auto g = pointwise_conv2d_backward(c.x, c.kernel, !c.bias.empty(), R);
    compare_grad(r, g.input, loss, c.x, "pointwise dx", tol);
    compare_grad(r, g.kernel, loss, c.kernel, "pointwise dkernel", tol);
    if (!c.bias.empty()) compare_grad(r, g.bias, loss, c.bias, "pointwise dbias", tol);
  }
  return r;
}

inline Result grad_pool(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto x = ref::random_tensor(Shape{pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 4)}, rng);
    const auto R = ref::random_tensor(Shape{x.dim(0), x.dim(3)}, rng);
    auto loss = [&] { return ref::weighted_sum(global_avg_pool(x), R); };
    compare_grad(r, global_avg_pool_backward(x.shape(), R), loss, x, "global_avg_pool dx", tol);
  }
  return r;
}

inline Result grad_dense(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::size_t b = pick(rng, 1, 4), n = pick(rng, 1, 10), m = pick(rng, 1, 6);
    auto x = ref::random_tensor(Shape{b, n}, rng);
    auto w = ref::random_tensor(Shape{n, m}, rng);
    auto bias = ref::random_tensor(Shape{m}, rng);
    const auto R = ref::random_tensor(Shape{b, m}, rng);
    auto loss = [&] { return ref::weighted_sum(dense(x, w, bias), R); };
    auto g = dense_backward(x, w, true, R);
    compare_grad(r, g.input, loss, x, "dense dx", tol);
    compare_grad(r, g.weights, loss, w, "dense dweights", tol);
    compare_grad(r, g.bias, loss, bias, "dense dbias", tol);
  }
  return r;
}

inline Result grad_relu(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto x = ref::random_tensor_away_from_zero(
        Shape{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
    const auto R = ref::random_tensor(x.shape(), rng);
    auto loss = [&] { return ref::weighted_sum(relu(x), R); };
    compare_grad(r, relu_backward(x, R), loss, x, "relu dx", tol);
  }
  return r;
}

inline Result grad_batch_norm(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::size_t c = pick(rng, 1, 3);
    auto x = ref::random_tensor(Shape{pick(rng, 2, 3), pick(rng, 1, 4), pick(rng, 2, 4), c}, rng);
    auto scale = ref::random_tensor(Shape{c}, rng, 0.5, 1.5);
    auto shift = ref::random_tensor(Shape{c}, rng);
    const auto R = ref::random_tensor(x.shape(), rng);
    for (Mode mode : {Mode::Train, Mode::Infer}) {
      const auto mean0 = ref::random_tensor(Shape{c}, rng), var0 = ref::random_tensor(Shape{c}, rng, 0.2, 2.0);
      auto loss = [&] {
        TensorD m = mean0, v = var0;
        return ref::weighted_sum(batch_norm(x, scale, shift, m, v, mode), R);
      };
      TensorD m = mean0, v = var0;
      BatchNormCache<double> cache;
      batch_norm(x, scale, shift, m, v, mode, &cache);
      auto g = batch_norm_backward(cache, scale, R, mode == Mode::Train);
      const std::string tag = mode == Mode::Train ? "batch_norm(train)" : "batch_norm(infer)";
      compare_grad(r, g.input, loss, x, tag + " dx", tol);
      compare_grad(r, g.scale, loss, scale, tag + " dscale", tol);
      compare_grad(r, g.shift, loss, shift, tag + " dshift", tol);
    }
  }
  return r;
}

inline Result grad_softmax(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    auto z = ref::random_tensor(Shape{pick(rng, 1, 4), pick(rng, 2, 8)}, rng, -3, 3);
    const auto R = ref::random_tensor(z.shape(), rng);
    auto loss = [&] { return ref::weighted_sum(softmax(z), R); };
    compare_grad(r, softmax_backward(softmax(z), R), loss, z, "softmax dz", tol);
  }
  return r;
}

inline Result grad_cross_entropy(std::size_t n_cases, std::uint64_t seed, double tol = kGradTol) {
  std::mt19937_64 rng(seed);
  Result r;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const std::size_t b = pick(rng, 1, 4), k = pick(rng, 2, 8);
    auto z = ref::random_tensor(Shape{b, k}, rng, -3, 3);
    std::vector<int> labels(b);
    for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
    auto p = ref::softmax(z);
    auto loss_p = [&] { return cross_entropy(p, labels); };
    compare_grad(r, cross_entropy_backward(p, labels), loss_p, p, "cross_entropy dprobs", tol);
    auto loss_z = [&] { return cross_entropy(softmax(z), labels); };
    compare_grad(r, softmax_cross_entropy_backward(softmax(z), labels), loss_z, z, "softmax+cross_entropy dz", tol);
  }
  return r;
}

struct NamedCheck {
  const char* name;
  std::function<Result(std::size_t, std::uint64_t)> run;
};

inline std::vector<NamedCheck> forward_checks() {
  return {{"conv2d", [](std::size_t n, std::uint64_t s) { return forward_conv2d(n, s); }},
          {"depthwise_conv2d", [](std::size_t n, std::uint64_t s) { return forward_depthwise(n, s); }},
          {"pointwise_conv2d", [](std::size_t n, std::uint64_t s) { return forward_pointwise(n, s); }},
          {"global_avg_pool", [](std::size_t n, std::uint64_t s) { return forward_pool(n, s); }},
          {"dense", [](std::size_t n, std::uint64_t s) { return forward_dense(n, s); }},
          {"relu", [](std::size_t n, std::uint64_t s) { return forward_relu(n, s); }},
          {"batch_norm", [](std::size_t n, std::uint64_t s) { return forward_batch_norm(n, s); }},
          {"softmax", [](std::size_t n, std::uint64_t s) { return forward_softmax(n, s); }},
          {"cross_entropy", [](std::size_t n, std::uint64_t s) { return forward_cross_entropy(n, s); }}};
}

inline std::vector<NamedCheck> gradient_checks() {
  return {{"conv2d", [](std::size_t n, std::uint64_t s) { return grad_conv2d(n, s); }},
          {"depthwise_conv2d", [](std::size_t n, std::uint64_t s) { return grad_depthwise(n, s); }},
          {"pointwise_conv2d", [](std::size_t n, std::uint64_t s) { return grad_pointwise(n, s); }},
          {"global_avg_pool", [](std::size_t n, std::uint64_t s) { return grad_pool(n, s); }},
          {"dense", [](std::size_t n, std::uint64_t s) { return grad_dense(n, s); }},
          {"relu", [](std::size_t n, std::uint64_t s) { return grad_relu(n, s); }},
          {"batch_norm", [](std::size_t n, std::uint64_t s) { return grad_batch_norm(n, s); }},
          {"softmax", [](std::size_t n, std::uint64_t s) { return grad_softmax(n, s); }},
          {"cross_entropy", [](std::size_t n, std::uint64_t s) { return grad_cross_entropy(n, s); }}};
}

}  // namespace trecx::cases
