#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "trecx/tensor.hpp"

namespace trecx {

// A named parameter with gradient and Adam moment slots of the same shape.
// Non-trainable entries (batch-norm running statistics) carry no optimizer state updates.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value, grad, m, v;
  bool trainable = true;
};

// Parameters in registration order with unique names.
template <typename T>
class ParamSet {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    const Shape s = value.shape();
    params_.push_back(Param<T>{name, std::move(value), Tensor<T>(s), Tensor<T>(s), Tensor<T>(s), trainable});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Param<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }
  const Param<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }

  Tensor<T>& value(const std::string& name) { return get(name).value; }
  const Tensor<T>& value(const std::string& name) const { return get(name).value; }
  Tensor<T>& grad(const std::string& name) { return get(name).grad; }

  std::vector<Param<T>>& entries() { return params_; }
  const std::vector<Param<T>>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(T{0});
  }

  std::size_t scalar_count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable || !trainable_only) n += p.value.size();
    return n;
  }

  // Accumulates g into the gradient slot of `name`.
  void accumulate_grad(const std::string& name, const Tensor<T>& g) {
    auto& p = get(name);
    if (p.grad.shape() != g.shape()) throw ShapeError("gradient for " + name, g.shape(), p.grad.shape());
    for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
  }

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace trecx
