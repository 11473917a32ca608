// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a Node. Operations on tensors that require
// gradients record their parents and a backward closure; Tensor::backward()
// collects the reachable graph into a Tape ordered by creation sequence,
// runs the closures in reverse, and then releases the graph. Leaves keep
// their accumulated gradients until zero_grad().

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "polyroute/error.hpp"

namespace polyroute {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t sequence = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_string(shape) + " given " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->sequence = detail::next_sequence();
  }

  static Tensor full(Shape shape, double fill, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, fill), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  /// Wraps a node produced by an operation.
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const { return rank() > 1 ? node_->shape[1] : 1; }

  std::span<const double> values() const { return node_->value; }

  /// Writable view of a leaf's values; used by initializers and optimizers.
  std::span<double> mutable_values() {
    if (!node_->is_leaf) throw Error("cannot mutate the values of a non-leaf tensor");
    return node_->value;
  }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  double at(std::size_t i, std::size_t j = 0) const { return node_->value[i * cols() + j]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf) throw Error("requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
  }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Detached deep copy that keeps requires_grad.
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }
  /// Detached deep copy without gradient tracking.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                    [](double x, double y) { return std::memcmp(&x, &y, sizeof(double)) == 0; });
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

/// Nodes reachable from a root that take part in differentiation, in
/// creation order (every parent precedes its children).
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node*> seen;
    std::vector<std::shared_ptr<Node>> stack{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto node = std::move(stack.back());
      stack.pop_back();
      for (const auto& parent : node->parents) {
        if (parent->requires_grad && seen.insert(parent.get()).second) stack.push_back(parent);
      }
      tape.nodes_.push_back(std::move(node));
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const auto& a, const auto& b) { return a->sequence < b->sequence; });
    return tape;
  }

  std::span<const std::shared_ptr<Node>> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  /// Runs every backward closure once, newest first, then frees the graph.
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& node = **it;
      if (node.backward && !node.grad.empty()) node.backward(node);
    }
    for (auto& node : nodes_) {
      if (!node->is_leaf) {
        node->backward = nullptr;
        node->parents.clear();
        node->grad.clear();
      }
    }
  }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward() requires a scalar, got " + shape_string(shape()));
  Tape tape = Tape::record(*this);
  if (tape.size() == 0) return;
  node_->ensure_grad()[0] += 1.0;
  tape.run_backward();
}

namespace detail {

inline void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// Builds the result node of an operation; graph edges are recorded only when
/// gradients are enabled and some parent needs them.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->sequence = next_sequence();
  const bool track = grad_enabled() &&
                     std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

inline bool wants_grad(const Node& node, std::size_t parent) {
  return node.parents[parent]->requires_grad;
}

inline std::vector<double>& parent_grad(Node& node, std::size_t parent) {
  return node.parents[parent]->ensure_grad();
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutableMap = Eigen::Map<RowMatrix>;

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  MutableMap(c, m, n).noalias() += ConstMap(a, m, k) * ConstMap(b, k, n);
}

// C[m x k] += G[m x n] * B[k x n]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* g, const double* b,
                    double* c) {
  MutableMap(c, m, k).noalias() += ConstMap(g, m, n) * ConstMap(b, k, n).transpose();
}

// C[k x n] += A[m x k]^T * G[m x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* g,
                    double* c) {
  MutableMap(c, k, n).noalias() += ConstMap(a, m, k).transpose() * ConstMap(g, m, n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) + " * " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (detail::wants_grad(self, 0)) {
      detail::gemm_nt(m, n, k, self.grad.data(), bv.data(), detail::parent_grad(self, 0).data());
    }
    if (detail::wants_grad(self, 1)) {
      detail::gemm_tn(m, k, n, av.data(), self.grad.data(), detail::parent_grad(self, 1).data());
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](Node& self) {
    auto& g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Binary { add, sub, mul };

inline Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  const char* name = kind == Binary::add ? "add" : kind == Binary::sub ? "sub" : "mul";
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw DimensionError(std::string(name) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " do not broadcast");
  }
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  const auto av = a.values();
  const auto bv = b.values();
  auto ai = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Binary::add: out[i] = ai(i) + bi(i); break;
      case Binary::sub: out[i] = ai(i) - bi(i); break;
      case Binary::mul: out[i] = ai(i) * bi(i); break;
    }
  }
  return make_result(name, shape, std::move(out), {a, b}, [kind, a_scalar, b_scalar, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto& ga = parent_grad(self, 0);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = kind == Binary::mul ? (b_scalar ? bv[0] : bv[i]) : 1.0;
        ga[a_scalar ? 0 : i] += self.grad[i] * d;
      }
    }
    if (wants_grad(self, 1)) {
      auto& gb = parent_grad(self, 1);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = kind == Binary::mul ? (a_scalar ? av[0] : av[i])
                         : kind == Binary::sub ? -1.0
                                               : 1.0;
        gb[b_scalar ? 0 : i] += self.grad[i] * d;
      }
    }
  });
}

/// Applies f pointwise; df receives (input, output) and returns the derivative.
template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(name, a.shape(), std::move(out), {a}, [df](Node& self) {
    const auto& x = self.parents[0]->value;
    auto& g = parent_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(x[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::Binary::mul, a, b); }

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// GELU, tanh approximation.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return detail::unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double t = std::tanh(u);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return detail::make_result("sum", {1}, {total}, {a}, [](Node& self) {
    auto& g = detail::parent_grad(self, 0);
    for (auto& x : g) x += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Row partitions

/// Rows [k*d/h, (k+1)*d/h) of a d x r matrix.
inline Tensor slice_rows(const Tensor& t, std::size_t head, std::size_t heads) {
  detail::require_matrix(t, "slice_rows");
  const std::size_t d = t.rows(), r = t.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("slice_rows: " + std::to_string(heads) + " heads do not divide " +
                      std::to_string(d) + " rows");
  }
  if (head >= heads) throw ConfigError("slice_rows: head index out of range");
  const std::size_t block = d / heads, offset = head * block * r;
  std::vector<double> out(t.values().begin() + offset, t.values().begin() + offset + block * r);
  return detail::make_result("slice_rows", {block, r}, std::move(out), {t}, [offset](Node& self) {
    auto& g = detail::parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

/// Stacks matrices sharing a trailing dimension, in argument order.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows needs at least one part");
  const std::size_t r = parts.front().cols();
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != r) {
      throw DimensionError("concat_rows: trailing dimensions disagree (" + std::to_string(p.cols()) +
                           " vs " + std::to_string(r) + ")");
    }
    total_rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(total_rows * r);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return detail::make_result("concat_rows", {total_rows, r}, std::move(out), parts,
                             [offsets](Node& self) {
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 if (!detail::wants_grad(self, k)) continue;
                                 auto& g = detail::parent_grad(self, k);
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
                               }
                             });
}

/// Row lookup into a table; used for embeddings.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  detail::require_matrix(table, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows needs at least one id");
  const std::size_t n = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw DataError("token id " + std::to_string(ids[i]) + " outside table of " + std::to_string(n) + " rows");
    }
    std::copy_n(table.values().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  return detail::make_result("gather_rows", {ids.size(), d}, std::move(out), {table},
                             [ids, d](Node& self) {
                               auto& g = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += self.grad[i * d + j];
                             });
}

/// Multiplies every row of x [n x d] elementwise by the column vector l [d x 1].
inline Tensor scale_columns(const Tensor& x, const Tensor& l) {
  detail::require_matrix(x, "scale_columns");
  if (l.numel() != x.cols()) {
    throw DimensionError("scale_columns: vector of " + std::to_string(l.numel()) + " for " +
                         std::to_string(x.cols()) + " columns");
  }
  const Tensor ones = Tensor::ones({x.rows(), 1});
  return mul(x, matmul(ones, reshape(l, {1, l.numel()})));
}

// ---------------------------------------------------------------------------
// Losses and attention

/// Mean token negative log-likelihood of targets under row-softmax(logits).
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  detail::require_matrix(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  std::vector<double> probs(n * vocab);
  double loss = 0.0;
  const auto lv = logits.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw DataError("target id " + std::to_string(targets[i]) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
    const double* row = lv.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - mx) / z;
    loss += -(row[targets[i]] - mx - std::log(z));
  }
  loss /= static_cast<double>(n);
  return detail::make_result("softmax_cross_entropy", {1}, {loss}, {logits},
                             [probs = std::move(probs), targets, n, vocab](Node& self) {
                               auto& g = detail::parent_grad(self, 0);
                               const double s = self.grad[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < vocab; ++j) g[i * vocab + j] += s * probs[i * vocab + j];
                                 g[i * vocab + targets[i]] -= s;
                               }
                             });
}

/// One independent attention problem inside a packed batch: query rows
/// [q_offset, q_offset+q_len) attend to key/value rows [kv_offset, kv_offset+kv_len).
struct AttentionSegment {
  std::size_t q_offset = 0;
  std::size_t q_len = 0;
  std::size_t kv_offset = 0;
  std::size_t kv_len = 0;
};

/// Scaled dot-product attention over packed segments. With causal set, query
/// row i of a segment only sees key rows j <= i.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<AttentionSegment>& segments, bool causal) {
  detail::require_matrix(q, "attention");
  detail::require_matrix(k, "attention");
  detail::require_matrix(v, "attention");
  const std::size_t dk = q.cols(), dv = v.cols();
  if (k.cols() != dk || k.rows() != v.rows()) {
    throw DimensionError("attention: incompatible q/k/v shapes " + shape_string(q.shape()) + ", " +
                         shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> out(q.rows() * dv, 0.0);
  std::vector<std::vector<double>> saved;
  saved.reserve(segments.size());
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  for (const auto& seg : segments) {
    if (seg.q_offset + seg.q_len > q.rows() || seg.kv_offset + seg.kv_len > k.rows()) {
      throw DimensionError("attention segment exceeds packed tensor");
    }
    std::vector<double> p(seg.q_len * seg.kv_len, 0.0);
    for (std::size_t i = 0; i < seg.q_len; ++i) {
      const double* qi = qv.data() + (seg.q_offset + i) * dk;
      const std::size_t visible = causal ? std::min(i + 1, seg.kv_len) : seg.kv_len;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < visible; ++j) {
        const double* kj = kv.data() + (seg.kv_offset + j) * dk;
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
        s *= inv_sqrt;
        p[i * seg.kv_len + j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        auto& e = p[i * seg.kv_len + j];
        e = std::exp(e - mx);
        z += e;
      }
      double* oi = out.data() + (seg.q_offset + i) * dv;
      for (std::size_t j = 0; j < visible; ++j) {
        auto& e = p[i * seg.kv_len + j];
        e /= z;
        const double* vj = vv.data() + (seg.kv_offset + j) * dv;
        for (std::size_t c = 0; c < dv; ++c) oi[c] += e * vj[c];
      }
    }
    saved.push_back(std::move(p));
  }
  return detail::make_result(
      "attention", {q.rows(), dv}, std::move(out), {q, k, v},
      [segments, saved = std::move(saved), dk, dv, inv_sqrt](Node& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        const bool gq = detail::wants_grad(self, 0), gk = detail::wants_grad(self, 1),
                   gv = detail::wants_grad(self, 2);
        std::vector<double>* dq = gq ? &detail::parent_grad(self, 0) : nullptr;
        std::vector<double>* dkk = gk ? &detail::parent_grad(self, 1) : nullptr;
        std::vector<double>* dvv = gv ? &detail::parent_grad(self, 2) : nullptr;
        std::vector<double> dp;
        for (std::size_t s = 0; s < segments.size(); ++s) {
          const auto& seg = segments[s];
          const auto& p = saved[s];
          dp.assign(seg.q_len * seg.kv_len, 0.0);
          for (std::size_t i = 0; i < seg.q_len; ++i) {
            const double* go = self.grad.data() + (seg.q_offset + i) * dv;
            for (std::size_t j = 0; j < seg.kv_len; ++j) {
              const double pij = p[i * seg.kv_len + j];
              if (pij == 0.0) continue;
              const double* vj = vv.data() + (seg.kv_offset + j) * dv;
              double acc = 0.0;
              for (std::size_t c = 0; c < dv; ++c) acc += go[c] * vj[c];
              dp[i * seg.kv_len + j] = acc;
              if (dvv) {
                double* dvj = dvv->data() + (seg.kv_offset + j) * dv;
                for (std::size_t c = 0; c < dv; ++c) dvj[c] += pij * go[c];
              }
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < seg.kv_len; ++j) dot += dp[i * seg.kv_len + j] * p[i * seg.kv_len + j];
            for (std::size_t j = 0; j < seg.kv_len; ++j) {
              const double pij = p[i * seg.kv_len + j];
              if (pij == 0.0) continue;
              const double ds = pij * (dp[i * seg.kv_len + j] - dot) * inv_sqrt;
              const double* qi = qv.data() + (seg.q_offset + i) * dk;
              const double* kj = kv.data() + (seg.kv_offset + j) * dk;
              if (dq) {
                double* dqi = dq->data() + (seg.q_offset + i) * dk;
                for (std::size_t c = 0; c < dk; ++c) dqi[c] += ds * kj[c];
              }
              if (dkk) {
                double* dkj = dkk->data() + (seg.kv_offset + j) * dk;
                for (std::size_t c = 0; c < dk; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

}  // namespace polyroute
