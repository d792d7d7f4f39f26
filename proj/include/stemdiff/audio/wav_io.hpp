#pragma once

#include <filesystem>
#include <vector>

namespace stemdiff::audio {

struct MonoAudio {
  std::vector<float> samples;  // [-1, 1]
  int sample_rate = 0;
};

/// Reads a mono 16-bit PCM RIFF/WAVE file. Throws IoError when the file cannot
/// be opened and FormatError when it is not mono 16-bit PCM.
MonoAudio read_wav(const std::filesystem::path& path);

/// Writes mono 16-bit PCM; samples outside [-1, 1] are clipped.
void write_wav(const std::filesystem::path& path, const std::vector<float>& samples, int sample_rate);

}  // namespace stemdiff::audio
