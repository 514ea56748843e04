#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "solar/numerics/graph.hpp"

namespace solar {

/// Builds a scalar loss on a fresh graph from the given parameter leaves.
template <typename T>
using LossBuilder =
    std::function<typename Graph<T>::NodeId(Graph<T>&, std::span<const typename Graph<T>::NodeId>)>;

/// Compares reverse-mode gradients with central finite differences.
///
/// Returns max over all parameter coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
/// The builder is re-run for every perturbed coordinate, so it must be a pure
/// function of the parameter values.
template <typename T>
T grad_check(std::vector<Tensor<T>> params, const LossBuilder<T>& build, T step = T(1e-4)) {
  using NodeId = typename Graph<T>::NodeId;

  auto evaluate = [&](bool with_grad, std::vector<Tensor<T>>* grads) {
    Graph<T> g;
    std::vector<NodeId> ids;
    ids.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) ids.push_back(g.parameter("p" + std::to_string(i), params[i]));
    const NodeId loss = build(g, ids);
    const T value = g.value(loss).item();
    if (with_grad) {
      g.backward(loss);
      for (NodeId id : ids) grads->push_back(g.grad(id));
    }
    return value;
  };

  std::vector<Tensor<T>> analytic;
  evaluate(true, &analytic);

  T worst{0};
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const T saved = params[p][i];
      params[p][i] = saved + step;
      const T up = evaluate(false, nullptr);
      params[p][i] = saved - step;
      const T down = evaluate(false, nullptr);
      params[p][i] = saved;
      const T numeric = (up - down) / (T{2} * step);
      const T a = analytic[p][i];
      const T denom = std::max({T{1}, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace solar
