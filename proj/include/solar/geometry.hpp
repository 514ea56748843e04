#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "solar/numerics/graph.hpp"

namespace solar::geometry {

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// S_C with the same denominator guard as the graph's cosine nodes.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  return dot(a, b) / std::max(norm(a) * norm(b), kCosineEps);
}

/// arccos(S_C(a, b)) evaluated as 2*atan2(|a^ - b^|, |a^ + b^|), which stays
/// accurate for nearly parallel vectors where arccos of a rounded cosine does
/// not (arccos(1 - 1e-16) is already 1.5e-8).
inline double angle(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("angle: dimension mismatch");
  const double na = std::max(norm(a), kCosineEps);
  const double nb = std::max(norm(b), kCosineEps);
  double diff = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double u = a[i] / na, v = b[i] / nb;
    diff += (u - v) * (u - v);
    sum += (u + v) * (u + v);
  }
  return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
}

/// Row-wise arithmetic mean of equally sized vectors.
inline std::vector<double> mean_vector(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw std::invalid_argument("mean_vector: no rows");
  std::vector<double> m(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    if (r.size() != m.size()) throw std::invalid_argument("mean_vector: ragged rows");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += r[i];
  }
  for (auto& v : m) v /= static_cast<double>(rows.size());
  return m;
}

}  // namespace solar::geometry
