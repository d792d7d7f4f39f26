#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stemdiff/core/tensor.hpp"

namespace stemdiff::audio {

constexpr int kDefaultSampleRate = 16000;
/// 10.24 s at 16 kHz.
constexpr long kDefaultClipSamples = 163840;

const std::vector<std::string>& default_stem_names();
/// The default names when `count` is 4, otherwise stem0..stemN-1.
std::vector<std::string> stem_names_for(int count);

/// S time-domain stems sharing one length and rate.
struct WaveformStack {
  Tensorf samples;  // [S x T_mix]
  int sample_rate = kDefaultSampleRate;
  std::vector<std::string> stem_names;

  WaveformStack() = default;
  WaveformStack(Tensorf samples, int sample_rate, std::vector<std::string> names);
  static WaveformStack zeros(int stems, long length, int sample_rate = kDefaultSampleRate);

  int stems() const { return samples.dim(0); }
  long length() const { return samples.dim(1); }
  std::span<const float> stem(int s) const;
  std::span<float> stem(int s);

  /// Throws ShapeError / ArgumentError / NumericError when an invariant fails.
  void validate() const;
};

/// Elementwise sum over the stem axis. No normalization or clipping.
std::vector<float> mix_stack(const WaveformStack& stack);

/// Which part of a longer recording becomes the clip.
struct ClipSelector {
  enum class Mode { Fixed, RandomShift };
  Mode mode = Mode::Fixed;
  long offset = 0;
  long max_shift = 0;
  std::uint64_t seed = 0;

  static ClipSelector fixed(long offset = 0) { return {Mode::Fixed, offset, 0, 0}; }
  static ClipSelector random_shift(long base, long max_shift, std::uint64_t seed) {
    return {Mode::RandomShift, base, max_shift, seed};
  }
  long resolve() const;
};

/// Loads `<dir>/<label>.wav` for each expected label, resamples to
/// `sample_rate`, and crops or zero-pads to `clip_samples`. A missing file
/// yields a silent stem.
WaveformStack load_stems(const std::filesystem::path& dir, const std::vector<std::string>& expected_stems,
                         const ClipSelector& clip, int sample_rate = kDefaultSampleRate,
                         long clip_samples = kDefaultClipSamples);

void save_stems(const std::filesystem::path& dir, const WaveformStack& stack);

/// Clamps every sample into [-1, 1]; returns how many samples were changed.
long hard_clip(WaveformStack& stack);

/// FNV-1a over the raw sample bits; used for corpus manifests.
std::uint64_t checksum(const WaveformStack& stack);

}  // namespace stemdiff::audio
