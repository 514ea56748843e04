#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "solar/numerics/tensor.hpp"

namespace solar {

struct SgdConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

template <typename T>
struct OptimizerState {
  SgdConfig config;
  std::vector<Tensor<T>> velocity;  // lazily zero-initialized, one per parameter
};

/// SGD with momentum and coupled weight decay:
///   v <- momentum * v + (grad + weight_decay * param)
///   param <- param - lr * v
template <typename T>
void sgd_update(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd_update: parameter/gradient count mismatch");
  if (state.velocity.empty()) {
    for (const auto* p : params) state.velocity.emplace_back(p->shape());
  }
  if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd_update: optimizer state size mismatch");

  const T lr = static_cast<T>(state.config.learning_rate);
  const T mu = static_cast<T>(state.config.momentum);
  const T wd = static_cast<T>(state.config.weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    const Tensor<T>& g = grads[k];
    Tensor<T>& v = state.velocity[k];
    if (!p.same_shape(g) || !p.same_shape(v)) {
      throw std::invalid_argument("sgd_update: shape mismatch at parameter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + (g[i] + wd * p[i]);
      p[i] = p[i] - lr * v[i];
    }
  }
}

}  // namespace solar
