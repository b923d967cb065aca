#include "nmcmc/nn/checkpoint.hpp"

#include "nmcmc/errors.hpp"
#include "nmcmc/io.hpp"

namespace nmcmc::nn {

void Checkpoint::add_tensor(std::string name, const Tensor& t) {
  tensors.push_back(NamedTensor{std::move(name), t});
}

const Tensor& Checkpoint::tensor(const std::string& name, std::size_t rows,
                                 std::size_t cols) const {
  for (const NamedTensor& nt : tensors) {
    if (nt.name != name) continue;
    if (nt.tensor.rows() != rows || nt.tensor.cols() != cols)
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        nt.tensor.shape_string() + ", expected [" + std::to_string(rows) + "x" +
                        std::to_string(cols) + "]");
    return nt.tensor;
  }
  throw FormatError("checkpoint is missing tensor '" + name + "'");
}

void Checkpoint::add_dense(const std::string& name, const DenseLayer& layer) {
  layers.push_back({{"name", name},
                    {"in", layer.in()},
                    {"out", layer.out()},
                    {"activation", std::string(to_string(layer.activation))}});
  add_tensor(name + ".weights", layer.weights);
  add_tensor(name + ".bias", layer.bias);
}

DenseLayer Checkpoint::dense(const std::string& name) const {
  for (const auto& spec : layers) {
    if (spec.at("name").get<std::string>() != name) continue;
    const auto in = spec.at("in").get<std::size_t>();
    const auto out = spec.at("out").get<std::size_t>();
    Activation act;
    try {
      act = parse_activation(spec.at("activation").get<std::string>());
    } catch (const ContractError& e) {
      throw FormatError(std::string("checkpoint layer '") + name + "': " + e.what());
    }
    return DenseLayer{tensor(name + ".weights", in, out), tensor(name + ".bias", 1, out), act};
  }
  throw FormatError("checkpoint is missing layer spec '" + name + "'");
}

void Checkpoint::add_mlp(const std::string& prefix, const Mlp& mlp) {
  extra["mlp_depth"][prefix] = mlp.depth();
  for (std::size_t i = 0; i < mlp.depth(); ++i)
    add_dense(prefix + "." + std::to_string(i), mlp.layers()[i]);
}

Mlp Checkpoint::mlp(const std::string& prefix) const {
  if (!extra.contains("mlp_depth") || !extra["mlp_depth"].contains(prefix))
    throw FormatError("checkpoint is missing network '" + prefix + "'");
  const auto depth = extra["mlp_depth"][prefix].get<std::size_t>();
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i < depth; ++i) layers.push_back(dense(prefix + "." + std::to_string(i)));
  try {
    return Mlp(std::move(layers));
  } catch (const DimensionError& e) {
    throw FormatError("checkpoint network '" + prefix + "': " + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["kind"] = ckpt.kind;
  header["layers"] = ckpt.layers;
  header["hyperparameters"] = ckpt.hyperparameters;
  header["seed"] = ckpt.seed;
  header["extra"] = ckpt.extra;
  std::vector<double> payload;
  nlohmann::json specs = nlohmann::json::array();
  for (const NamedTensor& nt : ckpt.tensors) {
    specs.push_back({{"name", nt.name}, {"rows", nt.tensor.rows()}, {"cols", nt.tensor.cols()}});
    payload.insert(payload.end(), nt.tensor.data().begin(), nt.tensor.data().end());
  }
  header["tensors"] = specs;
  io::write_framed(path, header, payload);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
  io::FramedFile file = io::read_framed(path);
  const auto& h = file.header;
  try {
    const int version = h.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw FormatError(path.string() + ": checkpoint format_version " + std::to_string(version) +
                        " is not supported (expected " +
                        std::to_string(kCheckpointFormatVersion) + ")");
    Checkpoint ckpt;
    ckpt.kind = h.at("kind").get<std::string>();
    if (ckpt.kind != expected_kind)
      throw FormatError(path.string() + ": checkpoint kind '" + ckpt.kind + "', expected '" +
                        expected_kind + "'");
    ckpt.layers = h.at("layers");
    ckpt.hyperparameters = h.at("hyperparameters");
    ckpt.seed = h.at("seed").get<std::uint64_t>();
    ckpt.extra = h.at("extra");

    std::size_t offset = 0;
    for (const auto& spec : h.at("tensors")) {
      const auto rows = spec.at("rows").get<std::size_t>();
      const auto cols = spec.at("cols").get<std::size_t>();
      const std::size_t n = rows * cols;
      if (offset + n > file.payload.size())
        throw FormatError(path.string() + ": truncated checkpoint payload");
      std::vector<double> data(file.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               file.payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
      ckpt.tensors.push_back({spec.at("name").get<std::string>(), Tensor(rows, cols, std::move(data))});
      offset += n;
    }
    if (offset != file.payload.size())
      throw FormatError(path.string() + ": checkpoint payload longer than header declares");
    for (const auto& spec : ckpt.layers) (void)ckpt.dense(spec.at("name").get<std::string>());
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt checkpoint header: " + e.what());
  }
}

}  // namespace nmcmc::nn
