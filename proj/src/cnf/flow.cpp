#include "nmcmc/cnf/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nmcmc/errors.hpp"

namespace nmcmc::cnf {

namespace {

constexpr const char* kKind = "cnf";

Tensor take_cols(const Tensor& a, std::span<const std::size_t> cols) {
  Tensor out(a.rows(), cols.size());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t j = 0; j < cols.size(); ++j) out(r, j) = a(r, cols[j]);
  return out;
}

Tensor join_cols(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(r, j) = a(r, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out(r, a.cols() + j) = b(r, j);
  }
  return out;
}

double log_normal_const(std::size_t dim) {
  return -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
}

CouplingBranch make_branch(std::size_t frozen, std::size_t cond, std::size_t active,
                           const FlowArchitecture& arch, Activation output, Rng& rng) {
  CouplingBranch b;
  b.frozen_embed = DenseLayer::xavier(frozen, arch.embed_width, arch.hidden, rng);
  b.cond_embed = DenseLayer::xavier(cond, arch.embed_width, arch.hidden, rng);
  const std::size_t w[] = {2 * arch.embed_width, arch.hidden_width, active};
  b.head = Mlp::xavier(w, arch.hidden, output, rng);
  return b;
}

void branch_parameters(CouplingBranch& b, std::vector<Tensor*>& p) {
  p.push_back(&b.frozen_embed.weights);
  p.push_back(&b.frozen_embed.bias);
  p.push_back(&b.cond_embed.weights);
  p.push_back(&b.cond_embed.bias);
  b.head.append_parameters(p);
}

void branch_weights(CouplingBranch& b, std::vector<Tensor*>& w) {
  w.push_back(&b.frozen_embed.weights);
  w.push_back(&b.cond_embed.weights);
  b.head.append_weights(w);
}

Tensor branch_eval(const CouplingBranch& b, const Tensor& h_frozen, const Tensor& cond) {
  return b.head.forward(join_cols(b.frozen_embed.forward(h_frozen), cond));
}

Var branch_graph(Graph& g, const CouplingBranch& b, Var h_frozen, Var cond_features,
                 const nn::DropoutContext* dropout) {
  Var e = b.frozen_embed.forward(g, h_frozen);
  if (dropout != nullptr && dropout->rate > 0.0) e = nn::dropout(e, dropout->rate, *dropout->rng);
  return b.head.forward(g, nn::concat_cols(e, b.cond_embed.forward(g, cond_features)));
}

LayerConditioning condition_layer(const CouplingLayer& layer, const Tensor& lambda) {
  const Tensor c = layer.conditioner.forward(lambda);
  return {layer.scale.cond_embed.forward(c), layer.translate.cond_embed.forward(c)};
}

// Forward through one layer in place; adds sum(s) per row to log_det.
void layer_forward(const CouplingLayer& layer, Tensor& h, const LayerConditioning& cond,
                   std::span<double> log_det) {
  const Tensor hb = take_cols(h, layer.frozen);
  const Tensor s = branch_eval(layer.scale, hb, cond.scale);
  const Tensor t = branch_eval(layer.translate, hb, cond.translate);
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t j = 0; j < layer.active.size(); ++j) {
      double& v = h(r, layer.active[j]);
      v = v * std::exp(s(r, j)) + t(r, j);
      log_det[r] += s(r, j);
    }
}

void layer_inverse(const CouplingLayer& layer, Tensor& h, const LayerConditioning& cond) {
  const Tensor hb = take_cols(h, layer.frozen);
  const Tensor s = branch_eval(layer.scale, hb, cond.scale);
  const Tensor t = branch_eval(layer.translate, hb, cond.translate);
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t j = 0; j < layer.active.size(); ++j) {
      double& v = h(r, layer.active[j]);
      v = (v - t(r, j)) * std::exp(-s(r, j));
    }
}

void check_dims(const CouplingLayer& layer, std::size_t h_size, std::size_t lambda_size) {
  require_dims(h_size == layer.frozen.size() + layer.active.size(),
               "coupling layer expects " +
                   std::to_string(layer.frozen.size() + layer.active.size()) +
                   " latent coordinates, got " + std::to_string(h_size));
  require_dims(lambda_size == layer.conditioner.in(),
               "coupling layer expects " + std::to_string(layer.conditioner.in()) +
                   " parameters, got " + std::to_string(lambda_size));
}

void check_dims(const FlowStack& stack, std::size_t h_size, std::size_t lambda_size) {
  require_dims(h_size == stack.latent_dim, "flow expects " + std::to_string(stack.latent_dim) +
                                               " latent coordinates, got " +
                                               std::to_string(h_size));
  require_dims(lambda_size == stack.par_dim, "flow expects " + std::to_string(stack.par_dim) +
                                                 " parameters, got " +
                                                 std::to_string(lambda_size));
}

std::vector<double> to_vector(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

Tensor draw_h(const FlowTrainingData& data, std::span<const std::size_t> batch, Rng& rng) {
  Tensor h = data.h_mean.gather_rows(batch);
  if (data.h_log_variance.empty()) return h;
  std::normal_distribution<double> n01;
  for (std::size_t r = 0; r < batch.size(); ++r)
    for (std::size_t c = 0; c < h.cols(); ++c)
      h(r, c) += std::exp(0.5 * data.h_log_variance(batch[r], c)) * n01(rng);
  return h;
}

}  // namespace

void FlowArchitecture::validate() const {
  require(latent_dim >= 2, "flow needs a latent dimension of at least 2");
  require(par_dim >= 1, "flow needs at least one conditioning parameter");
  require(layer_count >= 2, "flow needs at least 2 coupling layers");
  require(!conditioner_widths.empty(), "flow conditioner needs at least one layer");
  require(embed_width > 0 && hidden_width > 0, "flow branch widths must be positive");
}

std::vector<std::size_t> frozen_indices(std::size_t latent_dim, std::size_t layer) {
  std::vector<std::size_t> idx;
  for (std::size_t i = layer % 2; i < latent_dim; i += 2) idx.push_back(i);
  return idx;
}

FlowStack FlowStack::xavier(const FlowArchitecture& arch, Rng& rng) {
  arch.validate();
  FlowStack stack;
  stack.latent_dim = arch.latent_dim;
  stack.par_dim = arch.par_dim;
  std::vector<std::size_t> cw{arch.par_dim};
  cw.insert(cw.end(), arch.conditioner_widths.begin(), arch.conditioner_widths.end());
  const std::size_t cond_out = cw.back();
  for (std::size_t k = 0; k < arch.layer_count; ++k) {
    CouplingLayer layer;
    layer.frozen = frozen_indices(arch.latent_dim, k);
    for (std::size_t i = (k + 1) % 2; i < arch.latent_dim; i += 2) layer.active.push_back(i);
    layer.conditioner = Mlp::xavier(cw, arch.hidden, arch.hidden, rng);
    layer.scale = make_branch(layer.frozen.size(), cond_out, layer.active.size(), arch,
                              Activation::tanh, rng);
    layer.translate = make_branch(layer.frozen.size(), cond_out, layer.active.size(), arch,
                                  Activation::linear, rng);
    stack.layers.push_back(std::move(layer));
  }
  return stack;
}

FlowStack FlowStack::identity(const FlowArchitecture& arch) {
  Rng rng(0);
  FlowStack stack = xavier(arch, rng);
  for (Tensor* p : stack.parameters()) p->fill(0.0);
  return stack;
}

std::vector<Tensor*> FlowStack::parameters() {
  std::vector<Tensor*> p;
  for (CouplingLayer& l : layers) {
    l.conditioner.append_parameters(p);
    branch_parameters(l.scale, p);
    branch_parameters(l.translate, p);
  }
  return p;
}

std::vector<Tensor*> FlowStack::weights() {
  std::vector<Tensor*> w;
  for (CouplingLayer& l : layers) {
    l.conditioner.append_weights(w);
    branch_weights(l.scale, w);
    branch_weights(l.translate, w);
  }
  return w;
}

void FlowStack::check_consistency() const {
  require_dims(layers.size() >= 2, "flow needs at least 2 coupling layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const CouplingLayer& l = layers[k];
    require_dims(l.frozen == frozen_indices(latent_dim, k),
                 "coupling layer " + std::to_string(k) + " has an unexpected mask");
    require_dims(l.frozen.size() + l.active.size() == latent_dim,
                 "coupling layer " + std::to_string(k) + " does not partition the latent space");
    require_dims(l.conditioner.in() == par_dim, "conditioner input is not the parameter size");
    for (const CouplingBranch* b : {&l.scale, &l.translate}) {
      require_dims(b->frozen_embed.in() == l.frozen.size(), "branch frozen embedding mismatch");
      require_dims(b->cond_embed.in() == l.conditioner.out(), "branch conditioner embedding mismatch");
      require_dims(b->head.in() == b->frozen_embed.out() + b->cond_embed.out(),
                   "branch head input mismatch");
      require_dims(b->head.out() == l.active.size(), "branch head output mismatch");
    }
  }
}

FlowConditioning condition_batch(const FlowStack& stack, const Tensor& lambda) {
  require_dims(lambda.cols() == stack.par_dim, "flow expects " + std::to_string(stack.par_dim) +
                                                   " parameters, got " +
                                                   std::to_string(lambda.cols()));
  FlowConditioning out;
  out.layers.reserve(stack.layers.size());
  for (const CouplingLayer& l : stack.layers) out.layers.push_back(condition_layer(l, lambda));
  return out;
}

FlowConditioning condition(const FlowStack& stack, std::span<const double> lambda) {
  return condition_batch(stack, Tensor::row_vector(lambda));
}

CouplingResult coupling_forward(const CouplingLayer& layer, std::span<const double> h,
                                std::span<const double> lambda) {
  check_dims(layer, h.size(), lambda.size());
  Tensor x = Tensor::row_vector(h);
  double log_det = 0.0;
  layer_forward(layer, x, condition_layer(layer, Tensor::row_vector(lambda)), {&log_det, 1});
  return {to_vector(x), log_det};
}

std::vector<double> coupling_inverse(const CouplingLayer& layer, std::span<const double> h_next,
                                     std::span<const double> lambda) {
  check_dims(layer, h_next.size(), lambda.size());
  Tensor x = Tensor::row_vector(h_next);
  layer_inverse(layer, x, condition_layer(layer, Tensor::row_vector(lambda)));
  return to_vector(x);
}

FlowBatchResult flow_forward_batch(const FlowStack& stack, const Tensor& h,
                                   const FlowConditioning& cond) {
  require_dims(h.cols() == stack.latent_dim, "flow expects " + std::to_string(stack.latent_dim) +
                                                 " latent coordinates, got " +
                                                 std::to_string(h.cols()));
  require_dims(cond.layers.size() == stack.layers.size(), "conditioning built for another flow");
  FlowBatchResult out{h, std::vector<double>(h.rows(), 0.0)};
  for (std::size_t k = 0; k < stack.layers.size(); ++k) {
    require_dims(cond.layers[k].scale.rows() == h.rows(), "conditioning rows do not match the batch");
    layer_forward(stack.layers[k], out.z, cond.layers[k], out.log_det);
  }
  return out;
}

FlowResult flow_forward(const FlowStack& stack, std::span<const double> h,
                        std::span<const double> lambda) {
  check_dims(stack, h.size(), lambda.size());
  FlowBatchResult r = flow_forward_batch(stack, Tensor::row_vector(h), condition(stack, lambda));
  return {to_vector(r.z), r.log_det[0]};
}

std::vector<double> flow_inverse(const FlowStack& stack, std::span<const double> z,
                                 std::span<const double> lambda) {
  check_dims(stack, z.size(), lambda.size());
  const FlowConditioning cond = condition(stack, lambda);
  Tensor x = Tensor::row_vector(z);
  for (std::size_t k = stack.layers.size(); k-- > 0;) layer_inverse(stack.layers[k], x, cond.layers[k]);
  return to_vector(x);
}

double log_prob(const FlowStack& stack, std::span<const double> h, const FlowConditioning& cond) {
  const FlowBatchResult r = flow_forward_batch(stack, Tensor::row_vector(h), cond);
  double sq = 0.0;
  for (double v : r.z.data()) sq += v * v;
  const double lp = log_normal_const(stack.latent_dim) - 0.5 * sq + r.log_det[0];
  if (!std::isfinite(lp)) throw EvaluationError("flow log-density is not finite");
  return lp;
}

double log_prob(const FlowStack& stack, std::span<const double> h, std::span<const double> lambda) {
  check_dims(stack, h.size(), lambda.size());
  return log_prob(stack, h, condition(stack, lambda));
}

std::vector<double> log_prob_batch(const FlowStack& stack, const Tensor& h, const Tensor& lambda) {
  require_dims(h.rows() == lambda.rows(), "log_prob_batch: latent and parameter rows differ");
  const FlowBatchResult r = flow_forward_batch(stack, h, condition_batch(stack, lambda));
  std::vector<double> out(h.rows());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double sq = 0.0;
    for (double v : r.z.row(i)) sq += v * v;
    out[i] = log_normal_const(stack.latent_dim) - 0.5 * sq + r.log_det[i];
    if (!std::isfinite(out[i])) throw EvaluationError("flow log-density is not finite");
  }
  return out;
}

Var log_prob_graph(Graph& g, const FlowStack& stack, Var h, Var lambda,
                   const nn::DropoutContext* dropout) {
  require_dims(g.value(h).cols() == stack.latent_dim && g.value(lambda).cols() == stack.par_dim,
               "log_prob_graph: input widths do not match the flow");
  Var x = h;
  Var log_det;
  bool first = true;
  for (const CouplingLayer& l : stack.layers) {
    const Var c = l.conditioner.forward(g, lambda, dropout);
    const Var hb = nn::select_cols(x, l.frozen);
    const Var s = branch_graph(g, l.scale, hb, c, dropout);
    const Var t = branch_graph(g, l.translate, hb, c, dropout);
    const Var ha = nn::add(nn::mul(nn::select_cols(x, l.active), nn::exp(s)), t);
    x = nn::merge_cols(hb, l.frozen, ha, l.active, stack.latent_dim);
    const Var contrib = nn::sum_rows(s);
    log_det = first ? contrib : nn::add(log_det, contrib);
    first = false;
  }
  const Var base = nn::add_scalar(nn::scale(nn::sum_rows(nn::square(x)), -0.5),
                                  log_normal_const(stack.latent_dim));
  return nn::add(base, log_det);
}

Var nll_loss_graph(Graph& g, const FlowStack& stack, const Tensor& h, const Tensor& lambda,
                   const nn::DropoutContext* dropout) {
  require(h.rows() > 0, "nll_loss: empty batch");
  require_dims(h.rows() == lambda.rows(), "nll_loss: latent and parameter rows differ");
  return nn::scale(nn::mean(log_prob_graph(g, stack, g.constant(h), g.constant(lambda), dropout)),
                   -1.0);
}

double nll_loss(const FlowStack& stack, const Tensor& h, const Tensor& lambda) {
  require(h.rows() > 0, "nll_loss: empty batch");
  const std::vector<double> lp = log_prob_batch(stack, h, lambda);
  double s = 0.0;
  for (double v : lp) s += v;
  return -s / static_cast<double>(lp.size());
}

FlowTraining train_cnf(const FlowTrainingData& data, const FlowArchitecture& arch,
                       const nn::TrainConfig& cfg) {
  cfg.validate();
  const std::size_t n = data.h_mean.rows();
  require(n > 0, "train_cnf: empty dataset");
  require_dims(data.lambda.rows() == n, "train_cnf: latent and parameter rows differ");
  require_dims(data.h_mean.cols() == arch.latent_dim && data.lambda.cols() == arch.par_dim,
               "train_cnf: data widths do not match the architecture");
  require_dims(data.h_log_variance.empty() || (data.h_log_variance.rows() == n &&
                                               data.h_log_variance.cols() == arch.latent_dim),
               "train_cnf: latent variances do not match the means");

  Rng init_rng(cfg.seed ^ 0xf10f10f1ULL);
  FlowTraining out{FlowStack::xavier(arch, init_rng), {}};
  FlowStack& stack = out.stack;
  const nn::BatchLoss loss = [&](Graph& g, std::span<const std::size_t> batch, Rng& rng,
                                 bool training) {
    const nn::DropoutContext drop{cfg.dropout, &rng};
    return nll_loss_graph(g, stack, draw_h(data, batch, rng), data.lambda.gather_rows(batch),
                          training && cfg.dropout > 0.0 ? &drop : nullptr);
  };
  out.history = nn::train_loop({stack.parameters(), stack.weights()}, n, loss, cfg);
  return out;
}

std::vector<double> flow_sample(const FlowStack& stack, std::span<const double> lambda, Rng& rng) {
  std::normal_distribution<double> n01;
  std::vector<double> z(stack.latent_dim);
  for (double& v : z) v = n01(rng);
  return flow_inverse(stack, z, lambda);
}

void save_flow(const std::filesystem::path& path, const FlowStack& stack,
               const nlohmann::json& hyperparameters, std::uint64_t seed) {
  stack.check_consistency();
  nn::Checkpoint ck;
  ck.kind = kKind;
  ck.hyperparameters = hyperparameters;
  ck.seed = seed;
  nlohmann::json masks = nlohmann::json::array();
  for (std::size_t k = 0; k < stack.layers.size(); ++k) {
    const CouplingLayer& l = stack.layers[k];
    const std::string p = "layer" + std::to_string(k);
    ck.add_mlp(p + ".conditioner", l.conditioner);
    for (const auto& [name, b] : {std::pair{"scale", &l.scale}, std::pair{"translate", &l.translate}}) {
      ck.add_dense(p + "." + name + ".frozen_embed", b->frozen_embed);
      ck.add_dense(p + "." + name + ".cond_embed", b->cond_embed);
      ck.add_mlp(p + "." + name + ".head", b->head);
    }
    masks.push_back(l.frozen);
  }
  ck.extra["latent_dim"] = stack.latent_dim;
  ck.extra["par_dim"] = stack.par_dim;
  ck.extra["layer_count"] = stack.layers.size();
  ck.extra["frozen_masks"] = masks;
  const CouplingBranch& b0 = stack.layers.front().scale;
  ck.extra["branch_widths"] = {{"embed", b0.frozen_embed.out()},
                               {"hidden", b0.head.layers().front().out()}};
  nn::save_checkpoint(path, ck);
}

FlowStack load_flow(const std::filesystem::path& path) {
  const nn::Checkpoint ck = nn::load_checkpoint(path, kKind);
  FlowStack stack;
  try {
    stack.latent_dim = ck.extra.at("latent_dim").get<std::size_t>();
    stack.par_dim = ck.extra.at("par_dim").get<std::size_t>();
    const auto count = ck.extra.at("layer_count").get<std::size_t>();
    for (std::size_t k = 0; k < count; ++k) {
      const std::string p = "layer" + std::to_string(k);
      CouplingLayer l;
      l.frozen = ck.extra.at("frozen_masks").at(k).get<std::vector<std::size_t>>();
      for (std::size_t i = 0; i < stack.latent_dim; ++i)
        if (std::find(l.frozen.begin(), l.frozen.end(), i) == l.frozen.end()) l.active.push_back(i);
      l.conditioner = ck.mlp(p + ".conditioner");
      for (const auto& [name, b] : {std::pair{"scale", &l.scale}, std::pair{"translate", &l.translate}}) {
        b->frozen_embed = ck.dense(p + "." + name + ".frozen_embed");
        b->cond_embed = ck.dense(p + "." + name + ".cond_embed");
        b->head = ck.mlp(p + "." + name + ".head");
      }
      stack.layers.push_back(std::move(l));
    }
    stack.check_consistency();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt flow header: " + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return stack;
}

}  // namespace nmcmc::cnf
