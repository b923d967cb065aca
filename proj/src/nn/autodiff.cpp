#include "nmcmc/nn/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "nmcmc/errors.hpp"

namespace nmcmc::nn {

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::parameter(const Tensor* tensor) {
  if (auto it = parameters_.find(tensor); it != parameters_.end()) return Var{this, it->second};
  nodes_.push_back(Node{*tensor, {}, true, {}});
  const int id = static_cast<int>(nodes_.size() - 1);
  parameters_.emplace(tensor, id);
  return Var{this, id};
}

double Graph::scalar(Var v) const {
  const Tensor& t = value(v);
  require(t.rows() == 1 && t.cols() == 1, "scalar() on non-scalar " + t.shape_string());
  return t[0];
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    require(in.graph == this, "operands belong to different graphs");
    needs = needs || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Graph::accumulate(int id, const Tensor& delta) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.empty() && !n.value.empty()) {
    n.grad = delta;
    return;
  }
  for (std::size_t i = 0; i < delta.size(); ++i) n.grad[i] += delta[i];
}

void Graph::backward(Var loss) {
  const Tensor& l = value(loss);
  if (l.rows() != 1 || l.cols() != 1)
    throw ContractError("backward() needs a scalar loss, got " + l.shape_string());
  for (Node& n : nodes_) n.grad = Tensor{};
  if (!nodes_[static_cast<std::size_t>(loss.id)].requires_grad) return;
  nodes_[static_cast<std::size_t>(loss.id)].grad = Tensor(1, 1, 1.0);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

Tensor Graph::gradient_of(const Tensor* tensor) const {
  auto it = parameters_.find(tensor);
  if (it == parameters_.end()) return Tensor(tensor->rows(), tensor->cols());
  const Node& n = nodes_[static_cast<std::size_t>(it->second)];
  if (n.grad.empty()) return Tensor(tensor->rows(), tensor->cols());
  return n.grad;
}

namespace {

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

// Records an elementwise unary op whose derivative is expressed through
// the input value x and output value y.
template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  Graph& g = *a.graph;
  Tensor y = map(g.value(a), f);
  const Var ins[] = {a};
  return g.record(std::move(y), ins, [a, dfdx](Graph& gr, int self) {
    const Tensor& x = gr.value_at(a.id);
    const Tensor& yv = gr.value_at(self);
    const Tensor& gy = gr.grad_mut(self);
    Tensor gx(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * dfdx(x[i], yv[i]);
    gr.accumulate(a.id, gx);
  });
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  require_dims(a.same_shape(b),
               std::string(op) + " shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = *a.graph;
  Tensor y = nn::matmul(g.value(a), g.value(b));
  const Var ins[] = {a, b};
  return g.record(std::move(y), ins, [a, b](Graph& gr, int self) {
    const Tensor& gy = gr.grad_mut(self);
    if (gr.requires_grad_at(a.id)) gr.accumulate(a.id, matmul_nt(gy, gr.value_at(b.id)));
    if (gr.requires_grad_at(b.id)) gr.accumulate(b.id, matmul_tn(gr.value_at(a.id), gy));
  });
}

Var add_bias(Var x, Var bias) {
  Graph& g = *x.graph;
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  require_dims(bv.rows() == 1 && bv.cols() == xv.cols(),
               "add_bias " + xv.shape_string() + " + " + bv.shape_string());
  Tensor y = xv;
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bv[c];
  const Var ins[] = {x, bias};
  return g.record(std::move(y), ins, [x, bias](Graph& gr, int self) {
    const Tensor& gy = gr.grad_mut(self);
    gr.accumulate(x.id, gy);
    if (gr.requires_grad_at(bias.id)) {
      Tensor gb(1, gy.cols());
      for (std::size_t r = 0; r < gy.rows(); ++r)
        for (std::size_t c = 0; c < gy.cols(); ++c) gb[c] += gy(r, c);
      gr.accumulate(bias.id, gb);
    }
  });
}

Var add(Var a, Var b) {
  Graph& g = *a.graph;
  check_same(g.value(a), g.value(b), "add");
  Tensor y = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const Var ins[] = {a, b};
  return g.record(std::move(y), ins, [a, b](Graph& gr, int self) {
    const Tensor& gy = gr.grad_mut(self);
    gr.accumulate(a.id, gy);
    gr.accumulate(b.id, gy);
  });
}

Var sub(Var a, Var b) {
  Graph& g = *a.graph;
  check_same(g.value(a), g.value(b), "sub");
  Tensor y = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const Var ins[] = {a, b};
  return g.record(std::move(y), ins, [a, b](Graph& gr, int self) {
    const Tensor& gy = gr.grad_mut(self);
    gr.accumulate(a.id, gy);
    if (gr.requires_grad_at(b.id)) {
      Tensor neg = gy;
      for (double& v : neg.data()) v = -v;
      gr.accumulate(b.id, neg);
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = *a.graph;
  check_same(g.value(a), g.value(b), "mul");
  Tensor y = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const Var ins[] = {a, b};
  return g.record(std::move(y), ins, [a, b](Graph& gr, int self) {
    const Tensor& gy = gr.grad_mut(self);
    const Tensor& av = gr.value_at(a.id);
    const Tensor& bvv = gr.value_at(b.id);
    if (gr.requires_grad_at(a.id)) {
      Tensor ga(gy.rows(), gy.cols());
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] = gy[i] * bvv[i];
      gr.accumulate(a.id, ga);
    }
    if (gr.requires_grad_at(b.id)) {
      Tensor gb(gy.rows(), gy.cols());
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] = gy[i] * av[i];
      gr.accumulate(b.id, gb);
    }
  });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var elu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
      [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  Graph& g = *a.graph;
  double s = 0.0;
  for (double v : g.value(a).data()) s += v;
  const Var ins[] = {a};
  return g.record(Tensor(1, 1, s), ins, [a](Graph& gr, int self) {
    const Tensor& x = gr.value_at(a.id);
    gr.accumulate(a.id, Tensor(x.rows(), x.cols(), gr.grad_mut(self)[0]));
  });
}

Var mean(Var a) {
  const std::size_t n = a.graph->value(a).size();
  require(n > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  Graph& g = *a.graph;
  const Tensor& x = g.value(a);
  Tensor y(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (double v : x.row(r)) y[r] += v;
  const Var ins[] = {a};
  return g.record(std::move(y), ins, [a](Graph& gr, int self) {
    const Tensor& x2 = gr.value_at(a.id);
    const Tensor& gy = gr.grad_mut(self);
    Tensor gx(x2.rows(), x2.cols());
    for (std::size_t r = 0; r < x2.rows(); ++r)
      for (std::size_t c = 0; c < x2.cols(); ++c) gx(r, c) = gy[r];
    gr.accumulate(a.id, gx);
  });
}

Var select_cols(Var a, std::span<const std::size_t> cols) {
  Graph& g = *a.graph;
  const Tensor& x = g.value(a);
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  Tensor y(x.rows(), idx.size());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < idx.size(); ++j) {
      require_dims(idx[j] < x.cols(), "select_cols index out of range");
      y(r, j) = x(r, idx[j]);
    }
  const Var ins[] = {a};
  return g.record(std::move(y), ins, [a, idx](Graph& gr, int self) {
    const Tensor& x2 = gr.value_at(a.id);
    const Tensor& gy = gr.grad_mut(self);
    Tensor gx(x2.rows(), x2.cols());
    for (std::size_t r = 0; r < gy.rows(); ++r)
      for (std::size_t j = 0; j < idx.size(); ++j) gx(r, idx[j]) += gy(r, j);
    gr.accumulate(a.id, gx);
  });
}

Var merge_cols(Var a, std::span<const std::size_t> a_cols, Var b,
               std::span<const std::size_t> b_cols, std::size_t total) {
  Graph& g = *a.graph;
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_dims(av.cols() == a_cols.size() && bv.cols() == b_cols.size() &&
                   av.rows() == bv.rows() && a_cols.size() + b_cols.size() == total,
               "merge_cols shape mismatch");
  std::vector<std::size_t> ia(a_cols.begin(), a_cols.end());
  std::vector<std::size_t> ib(b_cols.begin(), b_cols.end());
  Tensor y(av.rows(), total);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t j = 0; j < ia.size(); ++j) y(r, ia[j]) = av(r, j);
    for (std::size_t j = 0; j < ib.size(); ++j) y(r, ib[j]) = bv(r, j);
  }
  const Var ins[] = {a, b};
  return g.record(std::move(y), ins, [a, b, ia, ib](Graph& gr, int self) {
    const Tensor& gy = gr.grad_mut(self);
    Tensor ga(gy.rows(), ia.size());
    Tensor gb(gy.rows(), ib.size());
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      for (std::size_t j = 0; j < ia.size(); ++j) ga(r, j) = gy(r, ia[j]);
      for (std::size_t j = 0; j < ib.size(); ++j) gb(r, j) = gy(r, ib[j]);
    }
    gr.accumulate(a.id, ga);
    gr.accumulate(b.id, gb);
  });
}

Var concat_cols(Var a, Var b) {
  Graph& g = *a.graph;
  const std::size_t na = g.value(a).cols();
  const std::size_t nb = g.value(b).cols();
  std::vector<std::size_t> ia(na), ib(nb);
  for (std::size_t j = 0; j < na; ++j) ia[j] = j;
  for (std::size_t j = 0; j < nb; ++j) ib[j] = na + j;
  return merge_cols(a, ia, b, ib, na + nb);
}

Var dropout(Var a, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must lie in [0,1)");
  if (rate == 0.0) return a;
  Graph& g = *a.graph;
  const Tensor& x = g.value(a);
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.rows(), x.cols());
  for (double& m : mask.data()) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(a, g.constant(std::move(mask)));
}

}  // namespace nmcmc::nn
