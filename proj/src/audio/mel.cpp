#include "stemdiff/audio/mel.hpp"

#include <cmath>
#include <numbers>
#include <unsupported/Eigen/FFT>

#include "stemdiff/core/error.hpp"

namespace stemdiff::audio {

namespace {

constexpr int kNnlsIterations = 60;

using MatrixRd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

void MelConfig::validate(long clip_samples) const {
  if (window_length < 2 || window_length % 2) {
    throw ConfigError("window length must be even and >= 2, got " + std::to_string(window_length));
  }
  if (hop < 1 || hop >= window_length) {
    throw ConfigError("hop " + std::to_string(hop) + " must be in [1, window length " +
                      std::to_string(window_length) + ")");
  }
  if (mel_bins < 1 || mel_bins > fft_bins()) {
    throw ConfigError("mel bins " + std::to_string(mel_bins) + " must be in [1, " + std::to_string(fft_bins()) +
                      "]");
  }
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
  if (!(log_floor > 0.0)) throw ConfigError("log floor must be positive");
  if (fmin < 0.0 || upper_frequency() <= fmin || upper_frequency() > 0.5 * sample_rate) {
    throw ConfigError("Mel frequency range is invalid");
  }
  if (clip_samples > 0 && clip_samples % hop) {
    throw ConfigError("hop " + std::to_string(hop) + " does not divide clip length " + std::to_string(clip_samples));
  }
}

float MelStack::floor_value() const { return static_cast<float>(std::log(config.log_floor)); }

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Eigen::MatrixXd mel_filterbank(const MelConfig& config) {
  config.validate();
  const int F = config.mel_bins;
  const int K = config.fft_bins();
  const double lo = hz_to_mel(config.fmin);
  const double hi = hz_to_mel(config.upper_frequency());
  std::vector<double> edges(F + 2);
  for (int i = 0; i < F + 2; ++i) edges[i] = mel_to_hz(lo + (hi - lo) * i / (F + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(F, K);
  for (int m = 0; m < F; ++m) {
    for (int k = 0; k < K; ++k) {
      const double f = static_cast<double>(k) * config.sample_rate / config.window_length;
      const double rise = (f - edges[m]) / (edges[m + 1] - edges[m]);
      const double fall = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
      fb(m, k) = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

struct Stft::Impl {
  Eigen::FFT<double> fft;
};

Stft::Stft(int window_length, int hop)
    : window_length_(window_length), hop_(hop), window_(window_length), impl_(std::make_unique<Impl>()) {
  for (int i = 0; i < window_length; ++i) {
    window_[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / window_length));
  }
  impl_->fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
}

Stft::~Stft() = default;

std::vector<std::complex<double>> Stft::analyze(std::span<const float> signal, int frames) const {
  const int K = bins();
  const long n = static_cast<long>(signal.size());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(frames) * K);
  std::vector<double> buf(window_length_);
  std::vector<std::complex<double>> spec;
  for (int t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t) * hop_ - window_length_ / 2;
    for (int i = 0; i < window_length_; ++i) {
      const long src = start + i;
      buf[i] = (src >= 0 && src < n) ? signal[src] * window_[i] : 0.0;
    }
    impl_->fft.fwd(spec, buf);
    std::copy_n(spec.begin(), K, out.begin() + static_cast<long>(t) * K);
  }
  return out;
}

std::vector<double> Stft::synthesize(std::span<const std::complex<double>> spectrum, int frames, long length) const {
  const int K = bins();
  std::vector<double> out(static_cast<std::size_t>(length), 0.0);
  std::vector<double> norm(static_cast<std::size_t>(length), 0.0);
  std::vector<std::complex<double>> spec(K);
  std::vector<double> buf;
  for (int t = 0; t < frames; ++t) {
    std::copy_n(spectrum.begin() + static_cast<long>(t) * K, K, spec.begin());
    impl_->fft.inv(buf, spec, window_length_);
    const long start = static_cast<long>(t) * hop_ - window_length_ / 2;
    for (int i = 0; i < window_length_; ++i) {
      const long dst = start + i;
      if (dst < 0 || dst >= length) continue;
      out[dst] += buf[i] * window_[i];
      norm[dst] += window_[i] * window_[i];
    }
  }
  for (long i = 0; i < length; ++i) {
    if (norm[i] > 1e-10) out[i] /= norm[i];
  }
  return out;
}

MelStack mel_forward(const WaveformStack& stack, const MelConfig& config) {
  stack.validate();
  config.validate(stack.length());
  if (stack.sample_rate != config.sample_rate) {
    throw ConfigError("waveform rate " + std::to_string(stack.sample_rate) + " Hz differs from Mel config rate " +
                      std::to_string(config.sample_rate) + " Hz");
  }
  const int S = stack.stems();
  const int T = config.frames_for(stack.length());
  const int F = config.mel_bins;
  const int K = config.fft_bins();
  const Eigen::MatrixXd fb = mel_filterbank(config);
  const Stft stft(config.window_length, config.hop);
  const double log_floor = std::log(config.log_floor);

  MelStack mel{Tensorf({S, T, F}), config};
  MatrixRd mag(T, K);
  for (int s = 0; s < S; ++s) {
    const auto spec = stft.analyze(stack.stem(s), T);
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) mag(t, k) = std::abs(spec[static_cast<std::size_t>(t) * K + k]);
    }
    const MatrixRd energies = mag * fb.transpose();  // [T x F]
    float* dst = mel.values.data() + static_cast<std::size_t>(s) * T * F;
    for (int t = 0; t < T; ++t) {
      for (int f = 0; f < F; ++f) {
        const double e = energies(t, f);
        dst[t * F + f] = static_cast<float>(e > config.log_floor ? std::log(e) : log_floor);
      }
    }
  }
  return mel;
}

WaveformStack mel_invert(const MelStack& mel, const MelConfig& config, int iterations) {
  if (iterations <= 0) throw ArgumentError("Griffin-Lim needs at least one iteration");
  config.validate();
  if (mel.values.rank() != 3 || mel.bins() != config.mel_bins) {
    throw ShapeError("Mel stack " + shape_string(mel.values.shape()) + " does not match " +
                     std::to_string(config.mel_bins) + " Mel bins");
  }
  const int S = mel.stems();
  const int T = mel.frames();
  const int F = mel.bins();
  const int K = config.fft_bins();
  const long length = static_cast<long>(T) * config.hop;
  const Eigen::MatrixXd fb = mel_filterbank(config);
  const Stft stft(config.window_length, config.hop);
  const double floor_log = std::log(config.log_floor);

  WaveformStack out = WaveformStack::zeros(S, length, config.sample_rate);
  Eigen::MatrixXd energies(F, T);
  for (int s = 0; s < S; ++s) {
    const float* src = mel.values.data() + static_cast<std::size_t>(s) * T * F;
    for (int t = 0; t < T; ++t) {
      for (int f = 0; f < F; ++f) {
        // floor cells carry no energy
        const double v = src[t * F + f];
        energies(f, t) = v <= floor_log + 1e-6 ? 0.0 : std::exp(v);
      }
    }
    // Non-negative least squares by multiplicative updates: zero bins stay zero.
    const Eigen::MatrixXd numer = fb.transpose() * energies;  // [K x T]
    Eigen::MatrixXd lin = numer;
    for (int it = 0; it < kNnlsIterations; ++it) {
      const Eigen::MatrixXd denom = fb.transpose() * (fb * lin);
      lin = lin.cwiseProduct(numer).cwiseQuotient(denom.array().max(1e-12).matrix());
    }

    std::vector<std::complex<double>> spec(static_cast<std::size_t>(T) * K);
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) spec[static_cast<std::size_t>(t) * K + k] = lin(k, t);
    }
    std::vector<double> signal;
    std::vector<float> signal_f(static_cast<std::size_t>(length));
    for (int it = 0; it < iterations; ++it) {
      signal = stft.synthesize(spec, T, length);
      if (it + 1 == iterations) break;
      std::copy(signal.begin(), signal.end(), signal_f.begin());
      const auto rebuilt = stft.analyze(signal_f, T);
      for (int t = 0; t < T; ++t) {
        for (int k = 0; k < K; ++k) {
          const std::size_t idx = static_cast<std::size_t>(t) * K + k;
          const double a = std::abs(rebuilt[idx]);
          const std::complex<double> phase = a > 1e-12 ? rebuilt[idx] / a : std::complex<double>(1.0, 0.0);
          spec[idx] = lin(k, t) * phase;
        }
      }
    }
    auto row = out.stem(s);
    for (long i = 0; i < length; ++i) row[i] = static_cast<float>(signal[i]);
  }
  return out;
}

}  // namespace stemdiff::audio
