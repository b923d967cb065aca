#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nmcmc/nn/autodiff.hpp"
#include "nmcmc/nn/tensor.hpp"

namespace nmcmc::nn {

enum class Activation { tanh, relu, elu, linear };

std::string_view to_string(Activation a);
/// Parses "tanh", "relu", "elu" or "linear"; ContractError otherwise.
Activation parse_activation(std::string_view name);

/// Applies an activation in place.
void apply_activation(Activation a, Tensor& t);
Var apply_activation(Activation a, Var v);

/// Fully connected layer y = act(x W + b), W is in x out.
struct DenseLayer {
  Tensor weights;
  Tensor bias;
  Activation activation = Activation::linear;

  std::size_t in() const noexcept { return weights.rows(); }
  std::size_t out() const noexcept { return weights.cols(); }

  /// Throws DimensionError when x.cols() != in().
  Tensor forward(const Tensor& x) const;
  Var forward(Graph& g, Var x) const;

  /// Glorot-uniform weights, zero bias.
  static DenseLayer xavier(std::size_t in, std::size_t out, Activation act, Rng& rng);
  static DenseLayer zeros(std::size_t in, std::size_t out, Activation act);
};

/// Inverted-dropout settings for a training-mode forward pass.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;
};

/// Chain of dense layers.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers);

  /// widths = {in, h1, ..., out}; hidden layers use `hidden`, the last layer
  /// uses `output`.
  static Mlp xavier(std::span<const std::size_t> widths, Activation hidden, Activation output,
                    Rng& rng);

  std::size_t in() const;
  std::size_t out() const;
  std::size_t depth() const noexcept { return layers_.size(); }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  Tensor forward(const Tensor& x) const;
  /// Dropout, when given, is applied after every hidden layer.
  Var forward(Graph& g, Var x, const DropoutContext* dropout = nullptr) const;

  void append_parameters(std::vector<Tensor*>& params);
  void append_weights(std::vector<Tensor*>& weights);
  void set_zero();

 private:
  std::vector<DenseLayer> layers_;
};

}  // namespace nmcmc::nn
