#pragma once

#include <cmath>
#include <cstdint>

#include "trecx/params.hpp"

namespace trecx {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

// One Adam update over every trainable parameter using the gradients stored in the set.
// `step` counts completed updates and is incremented here; moments live in Param::m / Param::v.
template <typename T>
void adam_step(ParamSet<T>& params, const AdamConfig& cfg, std::uint64_t& step) {
  ++step;
  const double t = static_cast<double>(step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.epsilon);
  for (auto& p : params.entries()) {
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      p.m[i] = b1 * p.m[i] + (T{1} - b1) * g;
      p.v[i] = b2 * p.v[i] + (T{1} - b2) * g * g;
      const T m_hat = p.m[i] / c1;
      const T v_hat = p.v[i] / c2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace trecx
