#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "stemdiff/audio/waveform.hpp"

namespace stemdiff::audio {

/// Synthetic four-stem corpus. Every stem of an example shares one tempo,
/// key and beat phase so the stems are musically dependent.
struct ToyCorpusSpec {
  int n_examples = 2000;
  double tempo_min = 90.0;
  double tempo_max = 140.0;
  std::vector<int> key_set{0, 2, 4, 5, 7, 9, 11};  // pitch classes
  std::uint64_t seed = 0;
  int sample_rate = kDefaultSampleRate;
  long clip_samples = 40960;
  double stem_peak = 0.25;

  void validate() const;
};

/// Musical parameters drawn for one example.
struct ToyExampleInfo {
  double tempo_bpm = 0;
  int key = 0;
  long beat_offset = 0;  // samples before the first beat
  double eighth_samples(int sample_rate) const { return 30.0 * sample_rate / tempo_bpm; }
};

ToyExampleInfo toy_example_info(const ToyCorpusSpec& spec, int index);

/// Stems in the order bass, drums, guitar, piano. Deterministic in (seed, index).
WaveformStack synth_toy_example(const ToyCorpusSpec& spec, int index);

/// Writes `<dir>/example_NNNNN/<stem>.wav` for every example plus
/// `<dir>/manifest.json` with the corpus parameters and per-example checksums.
void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpusSpec& spec);

}  // namespace stemdiff::audio
