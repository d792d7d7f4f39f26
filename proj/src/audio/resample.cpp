#include "stemdiff/audio/resample.hpp"

#include <cmath>
#include <numbers>

#include "stemdiff/core/error.hpp"

namespace stemdiff::audio {

namespace {

constexpr int kZeroCrossings = 24;
constexpr double kKaiserBeta = 8.6;
constexpr double kRolloff = 0.94;

double bessel_i0(double x) {
  double sum = 1.0;
  double term = 1.0;
  for (int k = 1; k < 50; ++k) {
    term *= (x / (2.0 * k)) * (x / (2.0 * k));
    sum += term;
    if (term < 1e-12 * sum) break;
  }
  return sum;
}

}  // namespace

std::vector<float> resample(std::span<const float> input, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) {
    throw FormatError("cannot resample from " + std::to_string(from_rate) + " Hz to " + std::to_string(to_rate) +
                      " Hz");
  }
  if (from_rate == to_rate) return {input.begin(), input.end()};

  const double ratio = static_cast<double>(to_rate) / from_rate;
  // cutoff in cycles per input sample
  const double cutoff = 0.5 * kRolloff * std::min(1.0, ratio);
  const double half_width = kZeroCrossings / (2.0 * cutoff);
  const double i0_beta = bessel_i0(kKaiserBeta);
  // Kernel tabulated on a fine grid over [0, half_width] and linearly interpolated.
  constexpr int kTableDensity = 512;
  const auto table_size = static_cast<std::size_t>(std::ceil(half_width * kTableDensity)) + 2;
  std::vector<double> table(table_size);
  for (std::size_t k = 0; k < table_size; ++k) {
    const double x = static_cast<double>(k) / kTableDensity;
    const double r = x / half_width;
    if (r >= 1.0) continue;
    const double window = bessel_i0(kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta;
    const double arg = 2.0 * cutoff * x;
    const double sinc = arg < 1e-12 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
    table[k] = 2.0 * cutoff * sinc * window;
  }
  auto kernel = [&](double x) {
    const double pos = std::abs(x) * kTableDensity;
    const auto k = static_cast<std::size_t>(pos);
    if (k + 1 >= table_size) return 0.0;
    const double frac = pos - static_cast<double>(k);
    return table[k] * (1.0 - frac) + table[k + 1] * frac;
  };

  const auto out_len = static_cast<std::size_t>(std::floor(input.size() * ratio));
  std::vector<float> out(out_len);
  const long n_in = static_cast<long>(input.size());
  for (std::size_t j = 0; j < out_len; ++j) {
    const double t = j / ratio;
    const long lo = static_cast<long>(std::ceil(t - half_width));
    const long hi = static_cast<long>(std::floor(t + half_width));
    double acc = 0.0;
    for (long i = std::max(0L, lo); i <= std::min(n_in - 1, hi); ++i) acc += input[i] * kernel(i - t);
    out[j] = static_cast<float>(acc);
  }
  return out;
}

}  // namespace stemdiff::audio
