#pragma once

#include <complex>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "stemdiff/audio/waveform.hpp"

namespace stemdiff::audio {

struct MelConfig {
  int window_length = 1024;  // also the FFT size
  int hop = 160;
  int mel_bins = 64;
  int sample_rate = kDefaultSampleRate;
  double log_floor = 1e-5;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means Nyquist

  int fft_bins() const { return window_length / 2 + 1; }
  double upper_frequency() const { return fmax > 0.0 ? fmax : 0.5 * sample_rate; }
  int frames_for(long clip_samples) const { return static_cast<int>(clip_samples / hop); }

  /// Throws ConfigError on an unusable geometry. A positive `clip_samples`
  /// is additionally checked for divisibility by the hop.
  void validate(long clip_samples = 0) const;
  bool operator==(const MelConfig&) const = default;
};

/// Per-stem log-Mel magnitudes.
struct MelStack {
  Tensorf values;  // [S x T x F]
  MelConfig config;

  int stems() const { return values.dim(0); }
  int frames() const { return values.dim(1); }
  int bins() const { return values.dim(2); }
  float floor_value() const;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular, peak-normalised filters on the HTK Mel scale: [mel_bins x fft_bins].
Eigen::MatrixXd mel_filterbank(const MelConfig& config);

/// Short-time Fourier transform with a periodic Hann window. Frame t is
/// centred on sample t * hop and the signal is zero-padded by half a window
/// on both sides, so a clip of T_mix samples yields exactly T_mix / hop frames.
class Stft {
 public:
  Stft(int window_length, int hop);
  ~Stft();
  Stft(const Stft&) = delete;
  Stft& operator=(const Stft&) = delete;

  int bins() const { return window_length_ / 2 + 1; }
  /// Row-major [frames x bins].
  std::vector<std::complex<double>> analyze(std::span<const float> signal, int frames) const;
  /// Weighted overlap-add inverse, normalised by the summed squared window.
  std::vector<double> synthesize(std::span<const std::complex<double>> spectrum, int frames, long length) const;

 private:
  struct Impl;
  int window_length_;
  int hop_;
  std::vector<double> window_;
  std::unique_ptr<Impl> impl_;
};

/// Magnitude STFT, Mel projection and log with floor, per stem.
MelStack mel_forward(const WaveformStack& stack, const MelConfig& config);

/// Griffin-Lim reconstruction from log-Mel values, starting from zero phase.
/// The linear magnitude is recovered from the Mel energies by non-negative
/// least squares before phase iteration.
WaveformStack mel_invert(const MelStack& mel, const MelConfig& config, int iterations);

}  // namespace stemdiff::audio
