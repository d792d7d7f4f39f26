#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "stemdiff/core/nn.hpp"
#include "stemdiff/pipeline/config.hpp"

namespace stemdiff::pipeline {

/// Everything a training run persists: named float tensors (parameters and
/// optimizer moments), scalars, the config snapshot and its fingerprint.
struct CheckpointBundle {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string kind;  // "codec" or "ldm"
  nlohmann::json config;
  std::uint64_t fingerprint = 0;
  long step = 0;
  std::map<std::string, Tensorf> blobs;
  std::map<std::string, double> scalars;

  ExperimentConfig experiment() const;
};

/// Binary layout: magic, version, fingerprint, step, kind, config text,
/// scalars, blobs, end marker. The fingerprint is recomputed from `config`.
void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path);

/// Throws IoError when unreadable, FormatError on truncation or corruption
/// and UnsupportedVersionError for other format versions.
CheckpointBundle load_checkpoint(const std::filesystem::path& path);

/// As above, then throws CompatibilityError listing every model-geometry field
/// where the checkpoint differs from `requested`.
CheckpointBundle load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& requested);

void check_compatible(const CheckpointBundle& bundle, const ExperimentConfig& requested);

/// Copies parameters (and optionally Adam state) in and out under `prefix`.
void store_parameters(CheckpointBundle& bundle, const std::string& prefix, nn::ParamList<float> params);
void store_optimizer(CheckpointBundle& bundle, const std::string& prefix, nn::Adam<float>& adam);
/// Throws FormatError when a parameter is missing or has another shape.
void restore_parameters(const CheckpointBundle& bundle, const std::string& prefix, nn::ParamList<float> params);
void restore_optimizer(const CheckpointBundle& bundle, const std::string& prefix, nn::Adam<float>& adam);

}  // namespace stemdiff::pipeline
