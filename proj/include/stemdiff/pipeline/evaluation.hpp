#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "stemdiff/eval/metrics.hpp"
#include "stemdiff/pipeline/tasks.hpp"
#include "stemdiff/pipeline/training.hpp"

namespace stemdiff::pipeline {

/// Held-out reference stacks. Toy sets also carry each example's tempo grid.
struct EvalSet {
  std::vector<audio::WaveformStack> examples;
  std::vector<audio::ToyExampleInfo> toy_info;  // empty for directory sets

  int size() const { return static_cast<int>(examples.size()); }
};

/// Toy examples directly after the training indices.
EvalSet toy_eval_set(const ExperimentConfig& config, int count);
EvalSet directory_eval_set(const ExperimentConfig& config, const std::filesystem::path& root, int count);

std::vector<std::vector<float>> real_mixtures(const EvalSet& set, int count);

/// Produces the full stack for example `index` given its reference and mask.
using PartialGenerator =
    std::function<audio::WaveformStack(const audio::WaveformStack& reference, const TrackMask& mask, int index)>;

/// Returns the reference unchanged; the arrangement FAD must then vanish.
PartialGenerator oracle_generator();
/// generate_partial with seed base.seed + index.
PartialGenerator model_generator(Model& model, diffusion::SamplerRun base);

/// Given stems from the reference plus generated stems elsewhere, summed.
std::vector<float> arrangement_mixture(const audio::WaveformStack& reference, const audio::WaveformStack& generated,
                                       const TrackMask& mask);

/// FAD between arrangement mixtures over the first `count` examples and the
/// real mixtures of the same examples.
double arrangement_fad(const EvalSet& set, int count, const TrackMask& mask, const PartialGenerator& generator,
                       const eval::Embedder& embedder);

/// Peaks of the rise in log energy over consecutive hop-sized blocks, as
/// block indices (block t starts at sample t * hop).
std::vector<int> onset_frames(std::span<const float> samples, const audio::MelConfig& mel);

/// Fraction of onsets within `tolerance` frames of the example's eighth-note grid.
/// Returns nullopt when there are no onsets.
std::optional<double> grid_alignment(const std::vector<int>& onsets, const audio::ToyExampleInfo& info,
                                     const audio::MelConfig& mel, int tolerance = 1);

struct EvaluationOptions {
  std::vector<double> weights{0.0, 1.0, 2.0};
  int separation_examples = 16;
  int generation_count = 16;
  int arrangement_examples = 6;
  int steps = 0;  // 0 uses the config's inference steps
  std::uint64_t seed = 1234;
  double white_noise_peak = 0.5;
  std::function<void(const std::string&)> log;
};

/// Separation Mel-MSE per weight, generation FAD against a white-noise
/// baseline, the arrangement table, the oracle arrangement FAD and, for toy
/// sets, onset alignment of generated guitar and piano given bass and drums.
nlohmann::json evaluate_model(Model& model, const EvalSet& set, const EvaluationOptions& options);

}  // namespace stemdiff::pipeline
