#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "stemdiff/pipeline/checkpoint.hpp"

namespace stemdiff::pipeline {

/// Log-Mel planes of a corpus: every stem plus the mixture of each example.
struct MelCorpus {
  Tensorf stems;     // [N x S x T x F]
  Tensorf mixtures;  // [N x T x F]
  audio::MelConfig mel;

  int size() const { return stems.rank() ? stems.dim(0) : 0; }
  audio::MelStack example(int index) const;
  audio::MelStack mixture(int index) const;  // [1 x T x F]
};

/// Synthesises toy examples [first, first + count) and transforms them.
MelCorpus mel_corpus_from_toy(const ExperimentConfig& config, int first, int count);
/// One example per subdirectory of `root` (sorted by name), loaded with load_stems.
MelCorpus mel_corpus_from_directory(const ExperimentConfig& config, const std::filesystem::path& root);
std::vector<std::filesystem::path> example_directories(const std::filesystem::path& root);

/// Mean-mode latents of a Mel corpus.
struct LatentCorpus {
  Tensorf stems;     // [N x S x C x T/r x F/r]
  Tensorf mixtures;  // [N x C x T/r x F/r]
  std::uint64_t codec_id = 0;

  int size() const { return stems.rank() ? stems.dim(0) : 0; }
};

LatentCorpus encode_corpus(const codec::LatentCodec& codec, const MelCorpus& corpus);

struct LossTrace {
  std::vector<double> steps;   // one loss per optimizer step
  std::vector<double> epochs;  // mean loss of each completed epoch
  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::filesystem::path checkpoint_path;  // empty disables periodic saving
  const CheckpointBundle* resume = nullptr;
  long stop_after = 0;  // halt once this many total steps have run; 0 runs to completion
  std::function<void(long step, long total, double loss)> progress;
};

struct CodecRun {
  std::unique_ptr<codec::LatentCodec> codec;
  LossTrace trace;
  CheckpointBundle bundle;
};

/// Trains on stem and mixture planes. Batches follow a per-epoch shuffle
/// derived from the training seed, and per-step noise is derived from
/// (seed, step), so a resumed run retraces an uninterrupted one.
CodecRun train_vae(const ExperimentConfig& config, const MelCorpus& corpus, const TrainOptions& options = {});

/// Rebuilds a trained codec from a "codec" or "ldm" bundle.
std::unique_ptr<codec::LatentCodec> codec_from_bundle(const CheckpointBundle& bundle);

struct LdmRun {
  std::unique_ptr<unet::UNet3d<float>> unet;
  LossTrace trace;
  CheckpointBundle bundle;
  long rows = 0;                // training rows seen in this invocation
  long unconditional_rows = 0;  // rows whose condition was dropped
};

/// Denoising training over precomputed latents with condition dropout.
/// Throws ConfigError when the corpus or codec disagrees with the config and
/// TrainingDivergence on a non-finite loss.
LdmRun train_ldm(const ExperimentConfig& config, const codec::LatentCodec& codec, const LatentCorpus& corpus,
                 const TrainOptions& options = {});

std::unique_ptr<unet::UNet3d<float>> unet_from_bundle(const CheckpointBundle& bundle);

/// Steps in one pass over `items` with the given batch size (at least one).
long steps_per_epoch(long items, int batch_size);

}  // namespace stemdiff::pipeline
