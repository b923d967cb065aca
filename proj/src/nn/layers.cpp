#include "nmcmc/nn/layers.hpp"

#include <cmath>

#include "nmcmc/errors.hpp"

namespace nmcmc::nn {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::elu: return "elu";
    case Activation::linear: return "linear";
  }
  return "linear";
}

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "elu") return Activation::elu;
  if (name == "linear") return Activation::linear;
  throw ContractError("unknown activation tag '" + std::string(name) + "'");
}

void apply_activation(Activation a, Tensor& t) {
  switch (a) {
    case Activation::tanh:
      for (double& v : t.data()) v = std::tanh(v);
      break;
    case Activation::relu:
      for (double& v : t.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::elu:
      for (double& v : t.data()) v = v > 0.0 ? v : std::expm1(v);
      break;
    case Activation::linear:
      break;
  }
}

Var apply_activation(Activation a, Var v) {
  switch (a) {
    case Activation::tanh: return tanh(v);
    case Activation::relu: return relu(v);
    case Activation::elu: return elu(v);
    case Activation::linear: return v;
  }
  return v;
}

Tensor DenseLayer::forward(const Tensor& x) const {
  require_dims(x.cols() == in(), "dense_forward: input " + x.shape_string() +
                                     " vs weights " + weights.shape_string());
  Tensor y = matmul(x, weights);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double* row = y.row(r).data();
    for (std::size_t c = 0; c < y.cols(); ++c) row[c] += bias[c];
  }
  apply_activation(activation, y);
  return y;
}

Var DenseLayer::forward(Graph& g, Var x) const {
  require_dims(g.value(x).cols() == in(), "dense_forward: input " +
                                              g.value(x).shape_string() + " vs weights " +
                                              weights.shape_string());
  Var y = add_bias(nn::matmul(x, g.parameter(&weights)), g.parameter(&bias));
  return apply_activation(activation, y);
}

DenseLayer DenseLayer::xavier(std::size_t in, std::size_t out, Activation act, Rng& rng) {
  DenseLayer layer = zeros(in, out, act);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& w : layer.weights.data()) w = dist(rng);
  return layer;
}

DenseLayer DenseLayer::zeros(std::size_t in, std::size_t out, Activation act) {
  return DenseLayer{Tensor(in, out), Tensor(1, out), act};
}

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const DenseLayer& l = layers_[i];
    require_dims(l.bias.rows() == 1 && l.bias.cols() == l.out(),
                 "dense layer bias shape inconsistent with weights");
    if (i > 0)
      require_dims(layers_[i - 1].out() == l.in(), "adjacent layer dimensions do not chain");
  }
}

Mlp Mlp::xavier(std::span<const std::size_t> widths, Activation hidden, Activation output,
                Rng& rng) {
  require(widths.size() >= 2, "an MLP needs at least input and output widths");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers.push_back(DenseLayer::xavier(widths[i], widths[i + 1], last ? output : hidden, rng));
  }
  return Mlp(std::move(layers));
}

std::size_t Mlp::in() const {
  require(!layers_.empty(), "empty MLP");
  return layers_.front().in();
}

std::size_t Mlp::out() const {
  require(!layers_.empty(), "empty MLP");
  return layers_.back().out();
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor y = x;
  for (const DenseLayer& l : layers_) y = l.forward(y);
  return y;
}

Var Mlp::forward(Graph& g, Var x, const DropoutContext* dropout) const {
  Var y = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    y = layers_[i].forward(g, y);
    if (dropout && dropout->rate > 0.0 && i + 1 < layers_.size())
      y = nn::dropout(y, dropout->rate, *dropout->rng);
  }
  return y;
}

void Mlp::append_parameters(std::vector<Tensor*>& params) {
  for (DenseLayer& l : layers_) {
    params.push_back(&l.weights);
    params.push_back(&l.bias);
  }
}

void Mlp::append_weights(std::vector<Tensor*>& weights) {
  for (DenseLayer& l : layers_) weights.push_back(&l.weights);
}

void Mlp::set_zero() {
  for (DenseLayer& l : layers_) {
    l.weights.fill(0.0);
    l.bias.fill(0.0);
  }
}

}  // namespace nmcmc::nn
