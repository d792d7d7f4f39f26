#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stemdiff/pipeline/checkpoint.hpp"

namespace stemdiff::pipeline {

/// A trained codec and denoiser ready for inference.
struct Model {
  ExperimentConfig config;
  std::unique_ptr<codec::LatentCodec> codec;
  std::unique_ptr<unet::UNet3d<float>> unet;
  diffusion::NoiseSchedule schedule;
  std::uint64_t fingerprint = 0;
};

Model model_from_bundle(const CheckpointBundle& bundle);
/// Loads an "ldm" checkpoint; with `requested`, geometry must match it.
Model load_model(const std::filesystem::path& path, const ExperimentConfig* requested = nullptr);

/// Which stems are given (the set I) in partial generation.
struct TrackMask {
  std::vector<bool> given;

  static TrackMask none(int stems) { return {std::vector<bool>(stems, false)}; }
  int stems() const { return static_cast<int>(given.size()); }
  int given_count() const;
  /// Initials of the given stems in stem order, e.g. "BD".
  std::string label(const std::vector<std::string>& names) const;
};

/// All non-empty proper subsets ordered by size, then lexicographically by
/// stem index: B, D, G, P, BD, BG, ..., DGP for four stems.
std::vector<TrackMask> arrangement_subsets(int stems);

/// What a task asked of the diffusion engine.
struct DispatchRecord {
  std::string op;  // "ddim_sample" or "inpaint_sample"
  double w = 0.0;
  double eta = 0.0;
  int steps = 0;
  long denoiser_calls = 0;
  long conditional_calls = 0;
};

struct TaskResult {
  audio::WaveformStack stems;
  std::vector<float> mixture;  // elementwise sum of the emitted stems
  Tensorf latent;              // [S x C x T/r x F/r] before decoding
  long clipped_samples = 0;    // stem samples moved by the final hard clip
  long mixture_overflow = 0;   // mixture samples outside [-1, 1]
  DispatchRecord dispatch;
  std::vector<std::string> notices;
  nlohmann::json manifest;
};

/// Conditional sampling on the mixture latent with guidance weight run.w.
/// Throws LengthError unless the mixture spans exactly clip_samples. A weight
/// below 1 is allowed and reported as a notice.
TaskResult separate(Model& model, std::span<const float> mixture, const diffusion::SamplerRun& run);

/// Unconditional sampling (w forced to 0). Item i uses seed run.seed + i.
std::vector<TaskResult> generate_total(Model& model, int count, diffusion::SamplerRun run);

/// Replacement inpainting of the stems not in mask.given (w forced to 0).
/// An all-given mask returns the codec round trip of the input with a notice.
TaskResult generate_partial(Model& model, const audio::WaveformStack& given, const TrackMask& mask,
                            diffusion::SamplerRun run);

/// Latent to audio: decode, Griffin-Lim, final hard clip.
TaskResult render_latent(Model& model, const Tensorf& latent);

/// Writes one WAV per stem plus mixture.wav and manifest.json into `dir`.
void write_task_outputs(const std::filesystem::path& dir, const TaskResult& result);

std::string to_hex(std::uint64_t value);

}  // namespace stemdiff::pipeline
