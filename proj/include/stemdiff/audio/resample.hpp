#pragma once

#include <span>
#include <vector>

namespace stemdiff::audio {

/// Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.
/// The cutoff sits just below the lower of the two Nyquist frequencies.
/// Throws FormatError for non-positive rates.
std::vector<float> resample(std::span<const float> input, int from_rate, int to_rate);

}  // namespace stemdiff::audio
