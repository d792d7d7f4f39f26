#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "stemdiff/audio/mel.hpp"
#include "stemdiff/core/nn.hpp"

namespace stemdiff::codec {

struct LatentCodecConfig {
  int compression_ratio = 4;  // r
  int latent_channels = 8;    // C
  std::vector<int> widths{32, 64, 128};  // one entry per resolution, log2(r) + 1 in total
  double kl_weight = 1e-4;
  double learning_rate = 2e-4;
  int batch_size = 8;
  int epochs = 4;
  long max_steps = 0;  // optimizer steps; 0 runs every epoch
  int frames = 1024;   // T
  int mel_bins = 64;   // F

  int levels() const { return static_cast<int>(widths.size()); }
  /// [C, T/r, F/r]
  Shape latent_shape() const { return {latent_channels, frames / compression_ratio, mel_bins / compression_ratio}; }
  /// Throws ConfigError when r is not a power of two or the geometry does not divide.
  void validate() const;
  bool operator==(const LatentCodecConfig&) const = default;
};

/// Per-stem latents.
struct LatentStack {
  Tensorf values;  // [S x C x T/r x F/r]
  std::uint64_t codec_id = 0;

  int stems() const { return values.dim(0); }
};

struct PosteriorParams {
  Tensorf mean;          // [S x C x T/r x F/r]
  Tensorf log_variance;  // same shape
};

enum class EncodeMode { Sample, Mean };

/// The encoder/decoder network, templated so gradients can be checked in double.
/// Spectrograms enter as [B, 1, 1, T, F]; latents live as [B, C, 1, T/r, F/r].
template <typename T>
class VaeNet {
 public:
  struct Posterior {
    ag::Var<T> mean;
    ag::Var<T> log_variance;
  };
  struct Losses {
    ag::Var<T> reconstruction;  // mean squared error per element
    ag::Var<T> kl;              // mean KL to the standard normal per latent element
  };

  VaeNet() = default;
  VaeNet(const LatentCodecConfig& config, std::uint64_t seed);

  Posterior encode(const ag::Var<T>& x) const;
  ag::Var<T> decode(const ag::Var<T>& z) const;
  /// Reparameterised pass with caller-supplied standard normal noise `eps`.
  Losses losses(const ag::Var<T>& x, const Tensor<T>& eps) const;

  nn::ParamList<T> parameters();

 private:
  LatentCodecConfig config_;
  nn::Conv3d<T> enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<nn::ResBlock<T>> enc_blocks_, dec_blocks_;
  std::vector<nn::Conv3d<T>> down_, up_;
  nn::GroupNorm<T> enc_norm_, dec_norm_;
};

/// Trainable per-stem codec with input normalisation and a latent scale so
/// that diffusion sees roughly unit-variance latents.
class LatentCodec {
 public:
  struct Losses {
    double reconstruction;
    double kl;
  };

  LatentCodec(const LatentCodecConfig& config, const audio::MelConfig& mel, std::uint64_t seed);

  const LatentCodecConfig& config() const { return config_; }
  const audio::MelConfig& mel_config() const { return mel_; }

  /// Sets the input shift/scale and the output ceiling (largest value seen)
  /// from log-Mel training planes ([N, T, F]).
  void fit_normalization(const Tensorf& planes);
  /// One Adam step on reconstruction MSE + kl_weight * KL over a [B, T, F] batch.
  /// Throws TrainingDivergence when either term is not finite.
  Losses train_step(const Tensorf& planes, Rng& rng);
  /// Sets the latent scale to the standard deviation of mean-mode latents of `planes`.
  void calibrate_latent_scale(const Tensorf& planes);
  /// Freezes the codec for encoding; assigns its fingerprint.
  void finalize();

  bool trained() const { return trained_; }
  std::uint64_t codec_id() const;
  long step() const { return optimizer_.steps(); }

  /// Each stem is encoded independently. Throws ShapeError on geometry mismatch
  /// and StateError for an untrained codec. `rng` is required in sample mode.
  LatentStack encode(const audio::MelStack& mel, EncodeMode mode, Rng* rng = nullptr) const;
  PosteriorParams posterior(const audio::MelStack& mel) const;
  /// Output is clamped to [log floor, input ceiling]. Throws StateError when
  /// the latent was produced by a different codec.
  audio::MelStack decode(const LatentStack& latent) const;

  /// Normalised [B, T, F] planes into network layout.
  Tensorf normalize(const Tensorf& planes) const;

  // persistence
  nn::ParamList<float> parameters() { return net_.parameters(); }
  nn::Adam<float>& optimizer() { return optimizer_; }
  double input_shift() const { return shift_; }
  double input_scale() const { return scale_; }
  double latent_scale() const { return latent_scale_; }
  double input_ceiling() const { return ceiling_; }
  void restore(double shift, double scale, double latent_scale, double ceiling, bool trained);

 private:
  void require_trained() const;
  Tensorf stems_to_planes(const audio::MelStack& mel) const;

  LatentCodecConfig config_;
  audio::MelConfig mel_;
  VaeNet<float> net_;
  nn::Adam<float> optimizer_;
  double shift_ = 0.0;
  double scale_ = 1.0;
  double latent_scale_ = 1.0;
  double ceiling_ = std::numeric_limits<double>::infinity();
  bool trained_ = false;
  std::uint64_t id_ = 0;
};

/// FNV-1a over raw bytes, chained from `seed`.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace stemdiff::codec
