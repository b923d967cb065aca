#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmcmc/nn/layers.hpp"

namespace nmcmc::nn {

inline constexpr int kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// In-memory image of a parameter checkpoint.
///
/// On disk: a JSON header line {format_version, kind, layers, hyperparameters,
/// seed, extra, tensors:[{name, rows, cols}]} followed by every tensor's data
/// as little-endian doubles, in declaration order.
struct Checkpoint {
  std::string kind;
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::uint64_t seed = 0;
  /// Model-specific header block (dimensions, standardization, ...).
  nlohmann::json extra = nlohmann::json::object();
  /// Layer specs {name, in, out, activation}, one per dense layer.
  nlohmann::json layers = nlohmann::json::array();
  std::vector<NamedTensor> tensors;

  void add_tensor(std::string name, const Tensor& t);
  /// FormatError when missing or not of the expected shape.
  const Tensor& tensor(const std::string& name, std::size_t rows, std::size_t cols) const;

  void add_dense(const std::string& name, const DenseLayer& layer);
  DenseLayer dense(const std::string& name) const;
  /// Stores layers as `<prefix>.<i>`; the layer count goes in `extra`.
  void add_mlp(const std::string& prefix, const Mlp& mlp);
  Mlp mlp(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Refuses (FormatError) on version mismatch, wrong kind, truncated or
/// oversized payload, and shape/header disagreement.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind);

}  // namespace nmcmc::nn
