#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "solar/numerics/tensor.hpp"

namespace solar {

enum class OpKind {
  Input,
  Parameter,
  MatMul,
  AddBias,
  Relu,
  BatchNorm,
  BatchNormEval,
  L2Normalize,
  RowDot,
  RowCosine,
  PairwiseCosine,
  Arccos,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  AddRowVector,
  AddColVector,
  Sum,
  Mean,
  StopGradient,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Relu: return "relu";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::BatchNormEval: return "batch_norm_eval";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::RowDot: return "row_dot";
    case OpKind::RowCosine: return "row_cosine";
    case OpKind::PairwiseCosine: return "pairwise_cosine";
    case OpKind::Arccos: return "arccos";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::AddRowVector: return "add_row_vector";
    case OpKind::AddColVector: return "add_col_vector";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::StopGradient: return "stop_gradient";
  }
  return "unknown";
}

class GraphError : public std::runtime_error {
 public:
  GraphError(std::size_t node, const std::string& what)
      : std::runtime_error("node " + std::to_string(node) + ": " + what), node_(node) {}
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

/// Denominator guard for cosine similarity and L2 normalization.
inline constexpr double kCosineEps = 1e-12;
/// arccos inputs are clamped to [-1 + eps, 1 - eps].
inline constexpr double kArccosClamp = 1e-7;

/// Eagerly evaluated computation record with reverse-mode gradients.
///
/// Each builder call computes the node's value immediately and appends it to
/// the tape, so nodes are topologically ordered by construction. `backward`
/// walks the tape in reverse. Nodes whose inputs do not require gradients
/// (inputs, constants, anything behind a stop-gradient) are skipped.
template <typename T>
class Graph {
 public:
  using NodeId = std::size_t;

  struct BatchStatistics {
    std::vector<T> mean;
    std::vector<T> variance;  // biased (divides by n)
    std::size_t count = 0;
  };

  NodeId input(std::string name, Tensor<T> value) {
    return leaf(OpKind::Input, std::move(name), std::move(value), false);
  }
  NodeId constant(Tensor<T> value) { return input({}, std::move(value)); }
  NodeId parameter(std::string name, Tensor<T> value) {
    return leaf(OpKind::Parameter, std::move(name), std::move(value), true);
  }

  // -- linear algebra -------------------------------------------------------

  /// a:[n,k] or [k], b:[k,m] or [k]. A rank-1 `a` is a row, a rank-1 `b` a column.
  NodeId matmul(NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    const auto [n, k] = as_lhs(A);
    const auto [k2, m] = as_rhs(B);
    if (k != k2) fail("matmul inner dimensions " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
    std::vector<std::size_t> shape;
    if (A.rank() == 1 && B.rank() == 1) shape = {1};
    else if (B.rank() == 1) shape = {n};
    else if (A.rank() == 1) shape = {m};
    else shape = {n, m};
    Tensor<T> out(shape);
    const T* pa = A.data().data();
    const T* pb = B.data().data();
    T* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const T av = pa[i * k + p];
        for (std::size_t j = 0; j < m; ++j) po[i * m + j] += av * pb[p * m + j];
      }
    }
    return push(OpKind::MatMul, {a, b}, std::move(out));
  }

  /// x:[n,m] + b:[m] broadcast over rows.
  NodeId add_bias(NodeId x, NodeId b) {
    const auto& X = value(x);
    const auto& B = value(b);
    if (B.size() != X.cols()) fail("add_bias width " + shape_string(B.shape()) + " vs " + shape_string(X.shape()));
    Tensor<T> out = X;
    for (std::size_t r = 0; r < X.rows(); ++r)
      for (std::size_t c = 0; c < X.cols(); ++c) out.at(r, c) += B[c];
    return push(OpKind::AddBias, {x, b}, std::move(out));
  }

  NodeId relu(NodeId x) {
    Tensor<T> out = value(x);
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return push(OpKind::Relu, {x}, std::move(out));
  }

  /// Training-mode batch normalization over rows (the batch axis).
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, T eps) {
    const auto& X = value(x);
    const std::size_t n = X.rows(), m = X.cols();
    if (X.rank() != 2) fail("batch_norm expects a rank-2 batch, got " + shape_string(X.shape()));
    if (n < 2) fail("batch_norm needs at least 2 rows to estimate variance");
    check_width(gamma, m, "batch_norm gamma");
    check_width(beta, m, "batch_norm beta");
    const auto& G = value(gamma);
    const auto& Bt = value(beta);

    std::vector<T> mean(m, T{0}), var(m, T{0}), inv_std(m);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) mean[c] += X.at(r, c);
    for (auto& v : mean) v /= static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        const T d = X.at(r, c) - mean[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(n);
    for (std::size_t c = 0; c < m; ++c) inv_std[c] = T{1} / std::sqrt(var[c] + eps);

    Tensor<T> xhat(X.shape());
    Tensor<T> out(X.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        const T h = (X.at(r, c) - mean[c]) * inv_std[c];
        xhat.at(r, c) = h;
        out.at(r, c) = G[c] * h + Bt[c];
      }
    const NodeId id = push(OpKind::BatchNorm, {x, gamma, beta}, std::move(out));
    auto& node = nodes_[id];
    node.aux = std::move(xhat.storage());
    node.aux2 = std::move(inv_std);
    node.stats = BatchStatistics{std::move(mean), std::move(var), n};
    return id;
  }

  /// Inference-mode batch normalization with fixed running statistics.
  NodeId batch_norm_eval(NodeId x, NodeId gamma, NodeId beta, const Tensor<T>& running_mean,
                         const Tensor<T>& running_var, T eps) {
    const auto& X = value(x);
    const std::size_t n = X.rows(), m = X.cols();
    check_width(gamma, m, "batch_norm gamma");
    check_width(beta, m, "batch_norm beta");
    if (running_mean.size() != m || running_var.size() != m) fail("batch_norm running statistics width");
    const auto& G = value(gamma);
    const auto& Bt = value(beta);
    std::vector<T> inv_std(m);
    for (std::size_t c = 0; c < m; ++c) inv_std[c] = T{1} / std::sqrt(running_var[c] + eps);
    Tensor<T> out(X.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c)
        out.at(r, c) = G[c] * (X.at(r, c) - running_mean[c]) * inv_std[c] + Bt[c];
    const NodeId id = push(OpKind::BatchNormEval, {x, gamma, beta}, std::move(out));
    nodes_[id].aux = running_mean.storage();
    nodes_[id].aux2 = std::move(inv_std);
    return id;
  }

  NodeId l2_normalize(NodeId x) {
    const auto& X = value(x);
    Tensor<T> out = X;
    std::vector<T> norms(X.rows());
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const T nr = norm(X.row(r));
      norms[r] = nr;
      const T d = std::max(nr, static_cast<T>(kCosineEps));
      for (auto& v : out.row(r)) v /= d;
    }
    const NodeId id = push(OpKind::L2Normalize, {x}, std::move(out));
    nodes_[id].aux = std::move(norms);
    return id;
  }

  /// Row-wise dot product: [n,m] x [n,m] -> [n].
  NodeId row_dot(NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B)) fail("row_dot shapes " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    Tensor<T> out({A.rows()});
    for (std::size_t r = 0; r < A.rows(); ++r) out[r] = dot(A.row(r), B.row(r));
    return push(OpKind::RowDot, {a, b}, std::move(out));
  }

  /// Row-wise cosine similarity: [n,m] x [n,m] -> [n].
  NodeId row_cosine(NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B)) fail("row_cosine shapes " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    const std::size_t n = A.rows();
    Tensor<T> out({n});
    std::vector<T> na(n), nb(n);
    for (std::size_t r = 0; r < n; ++r) {
      na[r] = norm(A.row(r));
      nb[r] = norm(B.row(r));
      out[r] = dot(A.row(r), B.row(r)) / guarded(na[r] * nb[r]);
    }
    const NodeId id = push(OpKind::RowCosine, {a, b}, std::move(out));
    nodes_[id].aux = std::move(na);
    nodes_[id].aux2 = std::move(nb);
    return id;
  }

  /// All-pairs cosine similarity: [n,m] x [k,m] -> [n,k].
  NodeId pairwise_cosine(NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.cols() != B.cols()) fail("pairwise_cosine widths " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    const std::size_t n = A.rows(), k = B.rows();
    Tensor<T> out({n, k});
    std::vector<T> na(n), nb(k);
    for (std::size_t r = 0; r < n; ++r) na[r] = norm(A.row(r));
    for (std::size_t r = 0; r < k; ++r) nb[r] = norm(B.row(r));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) out.at(i, j) = dot(A.row(i), B.row(j)) / guarded(na[i] * nb[j]);
    const NodeId id = push(OpKind::PairwiseCosine, {a, b}, std::move(out));
    nodes_[id].aux = std::move(na);
    nodes_[id].aux2 = std::move(nb);
    return id;
  }

  /// Element-wise arccos of the input clamped to [-1+eps, 1-eps]; the clamp
  /// has zero gradient outside the interval.
  NodeId arccos(NodeId x) {
    const auto& X = value(x);
    const T lo = static_cast<T>(-1.0 + kArccosClamp);
    const T hi = static_cast<T>(1.0 - kArccosClamp);
    Tensor<T> out(X.shape());
    std::vector<T> deriv(X.size());
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T v = X[i];
      const T c = std::clamp(v, lo, hi);
      out[i] = std::acos(c);
      deriv[i] = (v >= lo && v <= hi) ? T{-1} / std::sqrt(T{1} - c * c) : T{0};
    }
    const NodeId id = push(OpKind::Arccos, {x}, std::move(out));
    nodes_[id].aux = std::move(deriv);
    return id;
  }

  // -- scalar arithmetic ----------------------------------------------------

  NodeId add(NodeId a, NodeId b) { return elementwise(OpKind::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return elementwise(OpKind::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return elementwise(OpKind::Mul, a, b); }

  NodeId scale(NodeId x, T c) {
    Tensor<T> out = value(x);
    for (auto& v : out.data()) v *= c;
    const NodeId id = push(OpKind::Scale, {x}, std::move(out));
    nodes_[id].constant = c;
    return id;
  }

  NodeId add_scalar(NodeId x, T c) {
    Tensor<T> out = value(x);
    for (auto& v : out.data()) v += c;
    const NodeId id = push(OpKind::AddScalar, {x}, std::move(out));
    nodes_[id].constant = c;
    return id;
  }

  /// m:[n,k] + v:[k], v added to every row.
  NodeId add_row_vector(NodeId m, NodeId v) {
    const auto& M = value(m);
    const auto& V = value(v);
    if (V.size() != M.cols()) fail("add_row_vector width " + shape_string(V.shape()) + " vs " + shape_string(M.shape()));
    Tensor<T> out = M;
    for (std::size_t r = 0; r < M.rows(); ++r)
      for (std::size_t c = 0; c < M.cols(); ++c) out.at(r, c) += V[c];
    return push(OpKind::AddRowVector, {m, v}, std::move(out));
  }

  /// m:[n,k] + v:[n], v[r] added to every entry of row r.
  NodeId add_col_vector(NodeId m, NodeId v) {
    const auto& M = value(m);
    const auto& V = value(v);
    if (V.size() != M.rows()) fail("add_col_vector height " + shape_string(V.shape()) + " vs " + shape_string(M.shape()));
    Tensor<T> out = M;
    for (std::size_t r = 0; r < M.rows(); ++r)
      for (std::size_t c = 0; c < M.cols(); ++c) out.at(r, c) += V[r];
    return push(OpKind::AddColVector, {m, v}, std::move(out));
  }

  NodeId sum(NodeId x) {
    T s{0};
    for (T v : value(x).data()) s += v;
    return push(OpKind::Sum, {x}, Tensor<T>::scalar(s));
  }

  NodeId mean(NodeId x) {
    const auto& X = value(x);
    T s{0};
    for (T v : X.data()) s += v;
    return push(OpKind::Mean, {x}, Tensor<T>::scalar(s / static_cast<T>(X.size())));
  }

  /// Forwards the value; passes no gradient upstream.
  NodeId stop_gradient(NodeId x) { return push(OpKind::StopGradient, {x}, value(x)); }

  // -- inspection -----------------------------------------------------------

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return node(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  const Tensor<T>& value(NodeId id) const { return node(id).value; }

  /// Gradient of the last backward() loss with respect to `id`; zeros when
  /// nothing flowed into it.
  const Tensor<T>& grad(NodeId id) const {
    const auto& n = node(id);
    if (n.grad.empty()) throw GraphError(id, "no gradient recorded (call backward first)");
    return n.grad;
  }

  std::optional<NodeId> find(std::string_view name) const {
    for (NodeId i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].name.empty() && nodes_[i].name == name) return i;
    return std::nullopt;
  }

  const BatchStatistics& batch_statistics(NodeId id) const {
    const auto& n = node(id);
    if (n.kind != OpKind::BatchNorm) throw GraphError(id, "not a training-mode batch_norm node");
    return n.stats;
  }

  void backward(NodeId loss) {
    const auto& L = value(loss);
    if (L.size() != 1) throw GraphError(loss, "backward needs a scalar loss, got " + shape_string(L.shape()));
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad = Tensor<T>(n.value.shape());
      else n.grad = Tensor<T>();
    }
    if (!nodes_[loss].requires_grad) return;
    nodes_[loss].grad[0] = T{1};
    for (NodeId id = loss + 1; id-- > 0;) {
      if (!nodes_[id].requires_grad) continue;
      propagate(id);
    }
  }

 private:
  struct Node {
    OpKind kind = OpKind::Input;
    std::string name;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<T> aux;
    std::vector<T> aux2;
    T constant{0};
    BatchStatistics stats;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw GraphError(id, "unknown node");
    return nodes_[id];
  }

  [[noreturn]] void fail(const std::string& what) const { throw GraphError(nodes_.size(), what); }

  void check_width(NodeId v, std::size_t m, const char* what) const {
    if (value(v).size() != m) fail(std::string(what) + " width " + shape_string(value(v).shape()));
  }

  static std::pair<std::size_t, std::size_t> as_lhs(const Tensor<T>& t) {
    return t.rank() == 1 ? std::pair{std::size_t{1}, t.size()} : std::pair{t.rows(), t.cols()};
  }
  static std::pair<std::size_t, std::size_t> as_rhs(const Tensor<T>& t) {
    return t.rank() == 1 ? std::pair{t.size(), std::size_t{1}} : std::pair{t.rows(), t.cols()};
  }

  static T dot(std::span<const T> a, std::span<const T> b) {
    T s{0};
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
  static T norm(std::span<const T> a) { return std::sqrt(dot(a, a)); }
  static T guarded(T d) { return std::max(d, static_cast<T>(kCosineEps)); }
  static bool clamped(T d) { return d < static_cast<T>(kCosineEps); }

  NodeId leaf(OpKind kind, std::string name, Tensor<T> value, bool grad) {
    if (value.empty()) fail("leaf tensor is empty");
    if (!value.all_finite()) fail("non-finite leaf value" + (name.empty() ? std::string() : " '" + name + "'"));
    Node n;
    n.kind = kind;
    n.name = std::move(name);
    n.value = std::move(value);
    n.requires_grad = grad;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value) {
    if (!value.all_finite()) fail(std::string("non-finite value in ") + std::string(op_name(kind)));
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (kind != OpKind::StopGradient)
      for (NodeId i : n.inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId elementwise(OpKind kind, NodeId a, NodeId b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B))
      fail(std::string(op_name(kind)) + " shapes " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    Tensor<T> out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) {
      switch (kind) {
        case OpKind::Add: out[i] = A[i] + B[i]; break;
        case OpKind::Sub: out[i] = A[i] - B[i]; break;
        default: out[i] = A[i] * B[i]; break;
      }
    }
    return push(kind, {a, b}, std::move(out));
  }

  // Accumulates the gradient of node `id` into its inputs.
  void propagate(NodeId id) {
    Node& n = nodes_[id];
    const Tensor<T>& g = n.grad;
    auto target = [&](std::size_t slot) -> Tensor<T>* {
      Node& in = nodes_[n.inputs[slot]];
      return in.requires_grad ? &in.grad : nullptr;
    };

    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Parameter:
      case OpKind::StopGradient:
        break;

      case OpKind::MatMul: {
        const auto& A = value(n.inputs[0]);
        const auto& B = value(n.inputs[1]);
        const auto [rows, k] = as_lhs(A);
        const auto m = as_rhs(B).second;
        if (auto* ga = target(0)) {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T s{0};
              for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * B[p * m + j];
              (*ga)[i * k + p] += s;
            }
        }
        if (auto* gb = target(1)) {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T av = A[i * k + p];
              for (std::size_t j = 0; j < m; ++j) (*gb)[p * m + j] += av * g[i * m + j];
            }
        }
        break;
      }

      case OpKind::AddBias: {
        if (auto* gx = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        if (auto* gb = target(1))
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*gb)[c] += g.at(r, c);
        break;
      }

      case OpKind::Relu: {
        if (auto* gx = target(0)) {
          const auto& X = value(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i)
            if (X[i] > T{0}) (*gx)[i] += g[i];
        }
        break;
      }

      case OpKind::BatchNorm: {
        const std::size_t rows = g.rows(), m = g.cols();
        const auto& G = value(n.inputs[1]);
        const auto& xhat = n.aux;
        const auto& inv_std = n.aux2;
        std::vector<T> sum_dy(m, T{0}), sum_dy_xhat(m, T{0});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < m; ++c) {
            sum_dy[c] += g.at(r, c);
            sum_dy_xhat[c] += g.at(r, c) * xhat[r * m + c];
          }
        if (auto* gx = target(0)) {
          const T inv_n = T{1} / static_cast<T>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < m; ++c) {
              const T dxhat_scale = G[c] * inv_std[c] * inv_n;
              (*gx)[r * m + c] += dxhat_scale * (static_cast<T>(rows) * g.at(r, c) - sum_dy[c] -
                                                 xhat[r * m + c] * sum_dy_xhat[c]);
            }
        }
        if (auto* gg = target(1))
          for (std::size_t c = 0; c < m; ++c) (*gg)[c] += sum_dy_xhat[c];
        if (auto* gb = target(2))
          for (std::size_t c = 0; c < m; ++c) (*gb)[c] += sum_dy[c];
        break;
      }

      case OpKind::BatchNormEval: {
        const std::size_t rows = g.rows(), m = g.cols();
        const auto& X = value(n.inputs[0]);
        const auto& G = value(n.inputs[1]);
        const auto& rmean = n.aux;
        const auto& inv_std = n.aux2;
        auto* gx = target(0);
        auto* gg = target(1);
        auto* gb = target(2);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < m; ++c) {
            const T dy = g.at(r, c);
            if (gx) (*gx)[r * m + c] += dy * G[c] * inv_std[c];
            if (gg) (*gg)[c] += dy * (X.at(r, c) - rmean[c]) * inv_std[c];
            if (gb) (*gb)[c] += dy;
          }
        break;
      }

      case OpKind::L2Normalize: {
        if (auto* gx = target(0)) {
          const auto& Y = n.value;
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const T nr = n.aux[r];
            const auto gy = g.row(r);
            auto gxr = gx->row(r);
            if (clamped(nr)) {
              const T inv = static_cast<T>(1.0 / kCosineEps);
              for (std::size_t c = 0; c < gy.size(); ++c) gxr[c] += gy[c] * inv;
            } else {
              const T proj = dot(Y.row(r), gy);
              for (std::size_t c = 0; c < gy.size(); ++c) gxr[c] += (gy[c] - Y.row(r)[c] * proj) / nr;
            }
          }
        }
        break;
      }

      case OpKind::RowDot: {
        const auto& A = value(n.inputs[0]);
        const auto& B = value(n.inputs[1]);
        auto* ga = target(0);
        auto* gb = target(1);
        for (std::size_t r = 0; r < A.rows(); ++r)
          for (std::size_t c = 0; c < A.cols(); ++c) {
            if (ga) ga->at(r, c) += g[r] * B.at(r, c);
            if (gb) gb->at(r, c) += g[r] * A.at(r, c);
          }
        break;
      }

      case OpKind::RowCosine: {
        const auto& A = value(n.inputs[0]);
        const auto& B = value(n.inputs[1]);
        auto* ga = target(0);
        auto* gb = target(1);
        for (std::size_t r = 0; r < A.rows(); ++r) {
          cosine_grad(A.row(r), B.row(r), n.aux[r], n.aux2[r], n.value[r], g[r],
                      ga ? ga->row(r) : std::span<T>{}, gb ? gb->row(r) : std::span<T>{});
        }
        break;
      }

      case OpKind::PairwiseCosine: {
        const auto& A = value(n.inputs[0]);
        const auto& B = value(n.inputs[1]);
        auto* ga = target(0);
        auto* gb = target(1);
        for (std::size_t i = 0; i < A.rows(); ++i)
          for (std::size_t j = 0; j < B.rows(); ++j) {
            cosine_grad(A.row(i), B.row(j), n.aux[i], n.aux2[j], n.value.at(i, j), g.at(i, j),
                        ga ? ga->row(i) : std::span<T>{}, gb ? gb->row(j) : std::span<T>{});
          }
        break;
      }

      case OpKind::Arccos: {
        if (auto* gx = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * n.aux[i];
        break;
      }

      case OpKind::Add:
      case OpKind::Sub: {
        const T sign = n.kind == OpKind::Sub ? T{-1} : T{1};
        if (auto* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = target(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += sign * g[i];
        break;
      }

      case OpKind::Mul: {
        const auto& A = value(n.inputs[0]);
        const auto& B = value(n.inputs[1]);
        if (auto* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * B[i];
        if (auto* gb = target(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * A[i];
        break;
      }

      case OpKind::Scale: {
        if (auto* gx = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * n.constant;
        break;
      }

      case OpKind::AddScalar: {
        if (auto* gx = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        break;
      }

      case OpKind::AddRowVector: {
        if (auto* gm = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gm)[i] += g[i];
        if (auto* gv = target(1))
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*gv)[c] += g.at(r, c);
        break;
      }

      case OpKind::AddColVector: {
        if (auto* gm = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gm)[i] += g[i];
        if (auto* gv = target(1))
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*gv)[r] += g.at(r, c);
        break;
      }

      case OpKind::Sum: {
        if (auto* gx = target(0))
          for (auto& v : gx->data()) v += g[0];
        break;
      }

      case OpKind::Mean: {
        if (auto* gx = target(0)) {
          const T s = g[0] / static_cast<T>(gx->size());
          for (auto& v : gx->data()) v += s;
        }
        break;
      }
    }
  }

  // d cos(a,b) / da = b / (|a||b|) - cos * a / |a|^2 (and symmetrically),
  // unless the denominator guard is active, in which case it is a constant.
  static void cosine_grad(std::span<const T> a, std::span<const T> b, T na, T nb, T cos, T g,
                          std::span<T> ga, std::span<T> gb) {
    const T d = na * nb;
    if (clamped(d)) {
      const T inv = static_cast<T>(1.0 / kCosineEps);
      for (std::size_t c = 0; c < a.size(); ++c) {
        if (!ga.empty()) ga[c] += g * b[c] * inv;
        if (!gb.empty()) gb[c] += g * a[c] * inv;
      }
      return;
    }
    const T inv_d = T{1} / d;
    const T ca = cos / (na * na);
    const T cb = cos / (nb * nb);
    for (std::size_t c = 0; c < a.size(); ++c) {
      if (!ga.empty()) ga[c] += g * (b[c] * inv_d - ca * a[c]);
      if (!gb.empty()) gb[c] += g * (a[c] * inv_d - cb * b[c]);
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace solar
