#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records every operation applied to its Vars. Parameters enter the
// graph through Graph::parameter(&tensor) and are memoized by address, so a
// tensor used in several places accumulates a single gradient. After
// backward(loss), gradient_of(&tensor) returns dloss/dtensor.

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "nmcmc/nn/tensor.hpp"

namespace nmcmc::nn {

class Graph;

struct Var {
  Graph* graph = nullptr;
  int id = -1;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that receives no gradient.
  Var constant(Tensor value);
  /// Leaf bound to a model tensor. Repeated calls with the same address
  /// return the same Var.
  Var parameter(const Tensor* tensor);

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool requires_grad(Var v) const {
    return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
  }

  /// Scalar value of a 1x1 Var.
  double scalar(Var v) const;

  /// Runs reverse accumulation from a 1x1 loss. Throws ContractError for
  /// non-scalar losses.
  void backward(Var loss);

  /// Gradient for a parameter tensor; zeros of matching shape when the
  /// tensor was never used in the graph.
  Tensor gradient_of(const Tensor* tensor) const;

  std::size_t node_count() const noexcept { return nodes_.size(); }

  // Used by operation implementations.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Tensor& grad_mut(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Tensor& value_at(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad_at(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  /// Adds `delta` into the gradient buffer of node `id` if it requires grad.
  void accumulate(int id, const Tensor& delta);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int> parameters_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);
/// x (B x n) + bias (1 x n) broadcast over rows.
Var add_bias(Var x, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var elu(Var a);
Var square(Var a);
/// Sum of all entries, 1x1.
Var sum(Var a);
/// Mean of all entries, 1x1.
Var mean(Var a);
/// Per-row sum, B x 1.
Var sum_rows(Var a);
/// Column subset in the listed order.
Var select_cols(Var a, std::span<const std::size_t> cols);
/// Inverse of a column split: output column a_cols[j] takes a(:, j) and
/// b_cols[j] takes b(:, j). Together the index lists must cover
/// [0, total) exactly once.
Var merge_cols(Var a, std::span<const std::size_t> a_cols, Var b,
               std::span<const std::size_t> b_cols, std::size_t total);
Var concat_cols(Var a, Var b);
/// Inverted dropout: zeroes entries with probability `rate` and rescales
/// survivors by 1/(1-rate).
Var dropout(Var a, double rate, Rng& rng);

}  // namespace nmcmc::nn
