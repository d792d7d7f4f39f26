#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stemdiff/audio/mel.hpp"
#include "stemdiff/audio/toy_corpus.hpp"
#include "stemdiff/codec/vae.hpp"
#include "stemdiff/diffusion/schedule.hpp"
#include "stemdiff/unet/unet3d.hpp"

namespace stemdiff::pipeline {

struct TrainingConfig {
  double learning_rate = 3e-5;
  int epochs = 100;
  int batch_size = 8;
  double drop_prob = 0.1;
  long max_steps = 0;  // 0 runs every epoch
  long checkpoint_every = 0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

struct InferenceConfig {
  int steps = 200;
  double w_separate = 2.0;
  double eta_separate = 0.0;
  double eta_generate = 0.0;
  double eta_partial = 1.0;
  int griffin_lim_iterations = 32;
};

struct CorpusConfig {
  std::string kind = "directory";  // "toy" or "directory"
  std::string root;
  std::vector<std::string> stems{"bass", "drums", "guitar", "piano"};
  audio::ToyCorpusSpec toy;  // clip length and rate come from the experiment
  int eval_examples = 16;
};

struct ExperimentConfig {
  std::string profile = "paper";
  audio::MelConfig mel;
  long clip_samples = audio::kDefaultClipSamples;
  codec::LatentCodecConfig codec;
  diffusion::ScheduleParams schedule;
  unet::UNetConfig unet;
  TrainingConfig training;
  InferenceConfig inference;
  CorpusConfig corpus;

  /// Checks every module and the Mel -> latent -> denoiser geometry chain.
  /// Throws ConfigError naming the first inconsistency.
  void validate() const;
  audio::ToyCorpusSpec toy_spec() const;
};

/// Built-in profiles: "paper" and "toy".
ExperimentConfig profile_config(const std::string& name);

nlohmann::json to_json(const ExperimentConfig& config);

/// Starts from the profile named by `profile` (default "toy"), applies the
/// remaining keys as a merge patch, and validates. Unknown keys are errors.
ExperimentConfig config_from_json(const nlohmann::json& doc);

/// Reads a JSON config file. An `extends` key names a built-in profile or
/// another file (relative to this one) whose settings are inherited first.
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a over the canonical JSON text of the whole config.
std::uint64_t config_fingerprint(const ExperimentConfig& config);

/// The sections that fix trained tensor shapes: mel, clip_samples, codec
/// geometry, schedule and denoiser.
nlohmann::json model_section(const ExperimentConfig& config);

/// Human-readable "path: a vs b" entries for each leaf where two documents differ.
std::vector<std::string> json_differences(const nlohmann::json& a, const nlohmann::json& b,
                                          const std::string& prefix = "");

}  // namespace stemdiff::pipeline
