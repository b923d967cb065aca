#include "nmcmc/vae/ivae.hpp"

#include <cmath>

#include "nmcmc/errors.hpp"

namespace nmcmc::vae {

namespace {

constexpr const char* kKind = "ivae";

std::vector<std::size_t> chain_widths(std::size_t in, const std::vector<std::size_t>& hidden,
                                      std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

std::vector<double> row_of(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

Tensor normal_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> n01;
  Tensor t(rows, cols);
  for (double& v : t.data()) v = n01(rng);
  return t;
}

}  // namespace

void IVaeArchitecture::validate() const {
  require(x_dim > 0 && latent_dim > 0 && par_dim > 0, "iVAE dimensions must be positive");
  require(!encoder_hidden.empty(), "iVAE encoder needs at least one hidden layer");
  require(beta_kl >= 0.0 && beta_pred >= 0.0, "iVAE loss weights must be nonnegative");
  require(sigma_x > 0.0, "sigma_x must be positive");
}

IVaeModel IVaeModel::xavier(const IVaeArchitecture& arch, Rng& rng) {
  arch.validate();
  IVaeModel m;
  std::vector<std::size_t> trunk_w{arch.x_dim};
  trunk_w.insert(trunk_w.end(), arch.encoder_hidden.begin(), arch.encoder_hidden.end());
  m.trunk = Mlp::xavier(trunk_w, arch.hidden, arch.hidden, rng);
  const std::size_t feat = arch.encoder_hidden.back();
  m.mean_head = DenseLayer::xavier(feat, arch.latent_dim, Activation::linear, rng);
  m.log_variance_head = DenseLayer::xavier(feat, arch.latent_dim, Activation::linear, rng);
  m.decoder = Mlp::xavier(chain_widths(arch.latent_dim, arch.decoder_hidden, arch.x_dim),
                          arch.hidden, Activation::linear, rng);
  m.predictor = Mlp::xavier(chain_widths(arch.latent_dim, arch.predictor_hidden, arch.par_dim),
                            arch.hidden, Activation::linear, rng);
  m.beta_kl = arch.beta_kl;
  m.beta_pred = arch.beta_pred;
  m.sigma_x = arch.sigma_x;
  m.x_mean.assign(arch.x_dim, 0.0);
  m.x_scale.assign(arch.x_dim, 1.0);
  return m;
}

std::vector<Tensor*> IVaeModel::parameters() {
  std::vector<Tensor*> p;
  trunk.append_parameters(p);
  p.push_back(&mean_head.weights);
  p.push_back(&mean_head.bias);
  p.push_back(&log_variance_head.weights);
  p.push_back(&log_variance_head.bias);
  decoder.append_parameters(p);
  predictor.append_parameters(p);
  return p;
}

std::vector<Tensor*> IVaeModel::weights() {
  std::vector<Tensor*> w;
  trunk.append_weights(w);
  w.push_back(&mean_head.weights);
  w.push_back(&log_variance_head.weights);
  decoder.append_weights(w);
  predictor.append_weights(w);
  return w;
}

void IVaeModel::check_consistency() const {
  const std::size_t feat = trunk.out();
  require_dims(mean_head.in() == feat && log_variance_head.in() == feat,
               "iVAE heads do not match the encoder trunk");
  require_dims(log_variance_head.out() == latent_dim(), "iVAE heads differ in latent size");
  require_dims(decoder.in() == latent_dim() && predictor.in() == latent_dim(),
               "iVAE decoder/predictor input is not the latent size");
  require_dims(decoder.out() == x_dim(), "iVAE decoder output is not the observation size");
  require_dims(x_mean.size() == x_dim() && x_scale.size() == x_dim(),
               "iVAE standardization does not match the observation size");
}

void fit_standardization(IVaeModel& model, const Tensor& x) {
  require_dims(x.cols() == model.x_dim(), "standardization data has the wrong width");
  require(x.rows() > 0, "standardization needs at least one sample");
  const std::size_t n = x.rows(), d = x.cols();
  model.x_mean.assign(d, 0.0);
  model.x_scale.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) model.x_mean[c] += x(r, c);
  for (double& v : model.x_mean) v /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double e = x(r, c) - model.x_mean[c];
      model.x_scale[c] += e * e;
    }
  for (double& v : model.x_scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }
}

Tensor standardize(const IVaeModel& model, const Tensor& x) {
  require_dims(x.cols() == model.x_dim(), "observation width " + std::to_string(x.cols()) +
                                              " does not match the model (" +
                                              std::to_string(model.x_dim()) + ")");
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c)
      out(r, c) = (out(r, c) - model.x_mean[c]) / model.x_scale[c];
  return out;
}

LatentBatch encode_batch(const IVaeModel& model, const Tensor& x) {
  const Tensor feat = model.trunk.forward(standardize(model, x));
  return {model.mean_head.forward(feat), model.log_variance_head.forward(feat)};
}

LatentGaussian encode(const IVaeModel& model, std::span<const double> x) {
  const LatentBatch b = encode_batch(model, Tensor::row_vector(x));
  return {row_of(b.mean), row_of(b.log_variance)};
}

std::vector<double> reparameterize(const LatentGaussian& latent, std::span<const double> eps) {
  require_dims(eps.size() == latent.size() && latent.log_variance.size() == latent.size(),
               "reparameterize: noise and latent sizes differ");
  std::vector<double> h(latent.size());
  for (std::size_t j = 0; j < h.size(); ++j)
    h[j] = latent.mean[j] + std::exp(0.5 * latent.log_variance[j]) * eps[j];
  return h;
}

std::vector<double> decode(const IVaeModel& model, std::span<const double> h) {
  std::vector<double> x = row_of(model.decoder.forward(Tensor::row_vector(h)));
  for (std::size_t c = 0; c < x.size(); ++c) x[c] = x[c] * model.x_scale[c] + model.x_mean[c];
  return x;
}

std::vector<double> predict(const IVaeModel& model, std::span<const double> h) {
  return row_of(model.predictor.forward(Tensor::row_vector(h)));
}

double kl_term(const LatentGaussian& latent) {
  require_dims(latent.log_variance.size() == latent.size(), "latent mean and variance sizes differ");
  double kl = 0.0;
  for (std::size_t j = 0; j < latent.size(); ++j) {
    const double lv = latent.log_variance[j];
    kl += latent.mean[j] * latent.mean[j] + std::exp(lv) - 1.0 - lv;
  }
  return 0.5 * kl;
}

LossVars ivae_loss_graph(Graph& g, const IVaeModel& model, const Tensor& x_std,
                         const Tensor& lambda, const Tensor& eps,
                         const nn::DropoutContext* dropout) {
  const std::size_t b = x_std.rows();
  require(b > 0, "ivae_loss: empty batch");
  require_dims(lambda.rows() == b && eps.rows() == b, "ivae_loss: batch parts differ in length");
  require_dims(lambda.cols() == model.par_dim(), "ivae_loss: parameter width mismatch");
  require_dims(eps.cols() == model.latent_dim(), "ivae_loss: noise width mismatch");
  const double inv_b = 1.0 / static_cast<double>(b);

  const Var x = g.constant(x_std);
  const Var feat = model.trunk.forward(g, x, dropout);
  const Var mu = model.mean_head.forward(g, feat);
  const Var lv = model.log_variance_head.forward(g, feat);
  const Var h = nn::add(mu, nn::mul(nn::exp(nn::scale(lv, 0.5)), g.constant(eps)));

  const Var x_hat = model.decoder.forward(g, h, dropout);
  const Var mse = nn::scale(nn::sum(nn::square(nn::sub(x_hat, x))),
                            inv_b / (2.0 * model.sigma_x * model.sigma_x));
  const Var kl = nn::scale(
      nn::sum(nn::sub(nn::add(nn::square(mu), nn::exp(lv)), nn::add_scalar(lv, 1.0))), 0.5 * inv_b);
  const Var lam_hat = model.predictor.forward(g, h, dropout);
  const Var pred = nn::scale(nn::sum(nn::square(nn::sub(lam_hat, g.constant(lambda)))), inv_b);

  const Var total =
      nn::add(mse, nn::add(nn::scale(kl, model.beta_kl), nn::scale(pred, model.beta_pred)));
  return {total, mse, kl, pred};
}

LossParts ivae_loss(const IVaeModel& model, const Tensor& x, const Tensor& lambda,
                    const Tensor& eps) {
  Graph g;
  const LossVars v = ivae_loss_graph(g, model, standardize(model, x), lambda, eps);
  return {g.scalar(v.total), g.scalar(v.mse), g.scalar(v.kl), g.scalar(v.pred)};
}

LossParts ivae_loss(const IVaeModel& model, const Tensor& x, const Tensor& lambda, Rng& rng) {
  require(x.rows() > 0, "ivae_loss: empty batch");
  return ivae_loss(model, x, lambda, normal_tensor(x.rows(), model.latent_dim(), rng));
}

IVaeTraining train_ivae(const Tensor& x, const Tensor& lambda, const IVaeArchitecture& arch,
                        const nn::TrainConfig& cfg) {
  cfg.validate();
  require(x.rows() > 0, "train_ivae: empty dataset");
  require_dims(x.rows() == lambda.rows(), "train_ivae: observations and parameters differ in count");
  require_dims(x.cols() == arch.x_dim && lambda.cols() == arch.par_dim,
               "train_ivae: data widths do not match the architecture");

  Rng init_rng(cfg.seed ^ 0x5ca1ab1eULL);
  IVaeTraining out{IVaeModel::xavier(arch, init_rng), {}};
  IVaeModel& model = out.model;

  const nn::DataSplit split = nn::split_dataset(x.rows(), cfg);
  fit_standardization(model, x.gather_rows(split.train));
  const Tensor x_std = standardize(model, x);

  const nn::BatchLoss loss = [&](Graph& g, std::span<const std::size_t> batch, Rng& rng,
                                 bool training) {
    const nn::DropoutContext drop{cfg.dropout, &rng};
    const Tensor eps = normal_tensor(batch.size(), model.latent_dim(), rng);
    return ivae_loss_graph(g, model, x_std.gather_rows(batch), lambda.gather_rows(batch), eps,
                           training && cfg.dropout > 0.0 ? &drop : nullptr)
        .total;
  };
  out.history = nn::train_loop({model.parameters(), model.weights()}, x.rows(), loss, cfg);
  return out;
}

void save_ivae(const std::filesystem::path& path, const IVaeModel& model,
               const nlohmann::json& hyperparameters, std::uint64_t seed) {
  model.check_consistency();
  nn::Checkpoint ck;
  ck.kind = kKind;
  ck.hyperparameters = hyperparameters;
  ck.seed = seed;
  ck.add_mlp("trunk", model.trunk);
  ck.add_dense("mean_head", model.mean_head);
  ck.add_dense("log_variance_head", model.log_variance_head);
  ck.add_mlp("decoder", model.decoder);
  ck.add_mlp("predictor", model.predictor);
  ck.extra["x_dim"] = model.x_dim();
  ck.extra["latent_dim"] = model.latent_dim();
  ck.extra["par_dim"] = model.par_dim();
  ck.extra["beta_kl"] = model.beta_kl;
  ck.extra["beta_pred"] = model.beta_pred;
  ck.extra["sigma_x"] = model.sigma_x;
  ck.extra["x_mean"] = model.x_mean;
  ck.extra["x_scale"] = model.x_scale;
  nn::save_checkpoint(path, ck);
}

IVaeModel load_ivae(const std::filesystem::path& path) {
  const nn::Checkpoint ck = nn::load_checkpoint(path, kKind);
  IVaeModel m;
  try {
    m.trunk = ck.mlp("trunk");
    m.mean_head = ck.dense("mean_head");
    m.log_variance_head = ck.dense("log_variance_head");
    m.decoder = ck.mlp("decoder");
    m.predictor = ck.mlp("predictor");
    m.beta_kl = ck.extra.at("beta_kl").get<double>();
    m.beta_pred = ck.extra.at("beta_pred").get<double>();
    m.sigma_x = ck.extra.at("sigma_x").get<double>();
    m.x_mean = ck.extra.at("x_mean").get<std::vector<double>>();
    m.x_scale = ck.extra.at("x_scale").get<std::vector<double>>();
    m.check_consistency();
    if (ck.extra.at("x_dim").get<std::size_t>() != m.x_dim() ||
        ck.extra.at("latent_dim").get<std::size_t>() != m.latent_dim() ||
        ck.extra.at("par_dim").get<std::size_t>() != m.par_dim())
      throw FormatError(path.string() + ": iVAE header dimensions disagree with its layers");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt iVAE header: " + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace nmcmc::vae
