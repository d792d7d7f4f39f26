#include "stemdiff/audio/waveform.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "stemdiff/audio/resample.hpp"
#include "stemdiff/audio/wav_io.hpp"
#include "stemdiff/core/error.hpp"
#include "stemdiff/core/random.hpp"

namespace stemdiff::audio {

const std::vector<std::string>& default_stem_names() {
  static const std::vector<std::string> names{"bass", "drums", "guitar", "piano"};
  return names;
}

std::vector<std::string> stem_names_for(int count) {
  if (count == static_cast<int>(default_stem_names().size())) return default_stem_names();
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) names.push_back("stem" + std::to_string(i));
  return names;
}

WaveformStack::WaveformStack(Tensorf samples_in, int rate, std::vector<std::string> names)
    : samples(std::move(samples_in)), sample_rate(rate), stem_names(std::move(names)) {
  validate();
}

WaveformStack WaveformStack::zeros(int stems, long length, int sample_rate) {
  return WaveformStack(Tensorf({stems, static_cast<int>(length)}), sample_rate, stem_names_for(stems));
}

std::span<const float> WaveformStack::stem(int s) const {
  return {samples.data() + static_cast<std::size_t>(s) * length(), static_cast<std::size_t>(length())};
}

std::span<float> WaveformStack::stem(int s) {
  return {samples.data() + static_cast<std::size_t>(s) * length(), static_cast<std::size_t>(length())};
}

void WaveformStack::validate() const {
  if (samples.rank() != 2) throw ShapeError("waveform stack must be [S x T], got " + shape_string(samples.shape()));
  if (samples.dim(0) < 1) throw ShapeError("waveform stack needs at least one stem");
  if (static_cast<int>(stem_names.size()) != samples.dim(0)) {
    throw ShapeError("waveform stack has " + std::to_string(samples.dim(0)) + " stems but " +
                     std::to_string(stem_names.size()) + " names");
  }
  if (sample_rate <= 0) throw ArgumentError("sample rate must be positive");
  if (!samples.all_finite()) throw NumericError("waveform stack contains non-finite samples");
}

std::vector<float> mix_stack(const WaveformStack& stack) {
  stack.validate();
  std::vector<float> mix(static_cast<std::size_t>(stack.length()), 0.0f);
  for (int s = 0; s < stack.stems(); ++s) {
    const auto row = stack.stem(s);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += row[i];
  }
  return mix;
}

long ClipSelector::resolve() const {
  if (mode == Mode::Fixed || max_shift <= 0) return offset;
  Rng rng(seed);
  return offset + static_cast<long>(rng.uniform_int(0, static_cast<int>(max_shift)));
}

WaveformStack load_stems(const std::filesystem::path& dir, const std::vector<std::string>& expected_stems,
                         const ClipSelector& clip, int sample_rate, long clip_samples) {
  if (expected_stems.empty()) throw ArgumentError("load_stems: no expected stems");
  if (clip_samples <= 0) throw ArgumentError("load_stems: clip length must be positive");
  const long start = clip.resolve();
  if (start < 0) throw ArgumentError("load_stems: negative clip offset");
  Tensorf samples({static_cast<int>(expected_stems.size()), static_cast<int>(clip_samples)});
  for (std::size_t s = 0; s < expected_stems.size(); ++s) {
    const auto path = dir / (expected_stems[s] + ".wav");
    if (!std::filesystem::exists(path)) continue;
    MonoAudio audio;
    try {
      audio = read_wav(path);
    } catch (const IoError& e) {
      throw IoError("stem '" + expected_stems[s] + "': " + e.what());
    }
    std::vector<float> pcm = audio.sample_rate == sample_rate
                                 ? std::move(audio.samples)
                                 : resample(audio.samples, audio.sample_rate, sample_rate);
    float* dst = samples.data() + s * clip_samples;
    for (long i = 0; i < clip_samples; ++i) {
      const long src = start + i;
      if (src < static_cast<long>(pcm.size())) dst[i] = pcm[src];
    }
  }
  return WaveformStack(std::move(samples), sample_rate, expected_stems);
}

void save_stems(const std::filesystem::path& dir, const WaveformStack& stack) {
  stack.validate();
  for (int s = 0; s < stack.stems(); ++s) {
    const auto row = stack.stem(s);
    write_wav(dir / (stack.stem_names[s] + ".wav"), std::vector<float>(row.begin(), row.end()), stack.sample_rate);
  }
}

long hard_clip(WaveformStack& stack) {
  long clipped = 0;
  for (auto& v : stack.samples.values()) {
    if (v > 1.0f || v < -1.0f) {
      v = std::clamp(v, -1.0f, 1.0f);
      ++clipped;
    }
  }
  return clipped;
}

std::uint64_t checksum(const WaveformStack& stack) {
  std::uint64_t h = 1469598103934665603ULL;
  for (float v : stack.samples.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int k = 0; k < 4; ++k) {
      h ^= (bits >> (8 * k)) & 0xffu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace stemdiff::audio
