#include "stemdiff/audio/toy_corpus.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "stemdiff/core/random.hpp"

namespace stemdiff::audio {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

enum Stream : std::uint64_t { kInfo = 1, kBass, kDrums, kGuitar, kPiano };

double midi_hz(double note) { return 440.0 * std::pow(2.0, (note - 69.0) / 12.0); }

/// Attack/decay envelope with a short release so notes never end in a step.
double envelope(long i, long length, long attack, double decay_per_sample) {
  if (i < 0 || i >= length) return 0.0;
  double e = std::exp(-decay_per_sample * i);
  if (i < attack) e *= static_cast<double>(i) / attack;
  const long release = std::min<long>(attack * 4, length / 4);
  if (release > 0 && length - i < release) e *= static_cast<double>(length - i) / release;
  return e;
}

void normalize_peak(std::span<float> x, double peak) {
  float m = 0;
  for (float v : x) m = std::max(m, std::abs(v));
  if (m <= 0) return;
  const float g = static_cast<float>(peak / m);
  for (float& v : x) v *= g;
}

struct Grid {
  long offset;
  double eighth;
  long count;
  long at(long j) const { return offset + std::lround(j * eighth); }
};

void synth_bass(std::span<float> out, const Grid& grid, int key, int rate, Rng& rng) {
  static const int kRiffDegrees[] = {0, 7, 12, 5, 3, 10};
  const double root = 36 + key;
  const long note_len = std::lround(grid.eighth * 2);
  const long n = static_cast<long>(out.size());
  int degree = 0;
  for (long j = 0; j < grid.count; j += 2) {
    if (j % 8 != 0 && rng.bernoulli(0.25)) continue;
    if (j % 8 == 0) degree = 0;
    else degree = kRiffDegrees[rng.uniform_int(0, 5)];
    const double f = midi_hz(root + degree);
    const long start = grid.at(j);
    const long attack = rate / 100;
    for (long i = 0; i < note_len; ++i) {
      const long t = start + i;
      if (t < 0 || t >= n) continue;
      out[t] += static_cast<float>(envelope(i, note_len, attack, 3.0 / rate) * std::sin(kTwoPi * f * i / rate));
    }
  }
}

void synth_drums(std::span<float> out, const Grid& grid, int rate, Rng& rng) {
  const long n = static_cast<long>(out.size());
  for (long j = 0; j < grid.count; ++j) {
    const long start = grid.at(j);
    const bool on_beat = j % 2 == 0;
    const bool backbeat = j % 4 == 2;
    // kick on downbeats, snare noise on backbeats, bright hat on the rest
    const long len = on_beat ? rate / 6 : rate / 20;
    const double decay = on_beat ? 30.0 / rate : 90.0 / rate;
    double lp = 0, prev = 0;
    for (long i = 0; i < len; ++i) {
      const long t = start + i;
      if (t < 0 || t >= n) continue;
      const double noise = rng.normal();
      double v;
      if (on_beat && !backbeat) {
        const double f = 50.0 + 80.0 * std::exp(-40.0 * i / rate);
        v = std::sin(kTwoPi * f * i / rate) + 0.15 * noise;
      } else if (backbeat) {
        lp += 0.3 * (noise - lp);
        v = lp * 1.5 + 0.3 * std::sin(kTwoPi * 190.0 * i / rate);
      } else {
        v = 0.5 * (noise - prev);  // first difference: high-passed hat
        prev = noise;
      }
      out[t] += static_cast<float>(envelope(i, len, rate / 1000, decay) * v);
    }
  }
}

void synth_guitar(std::span<float> out, const Grid& grid, int key, int rate, Rng& rng) {
  static const int kChord[] = {0, 4, 7, 12, 16};
  const long n = static_cast<long>(out.size());
  for (long j = 0; j < grid.count; ++j) {
    if (!rng.bernoulli(j % 2 == 0 ? 0.7 : 0.35)) continue;
    const double f = midi_hz(52 + key + kChord[rng.uniform_int(0, 4)]);
    const int period = std::max(2, static_cast<int>(std::lround(rate / f)));
    std::vector<double> line(period);
    for (double& v : line) v = rng.uniform() * 2.0 - 1.0;
    const long len = std::lround(grid.eighth * 2);
    const long start = grid.at(j);
    // Karplus-Strong: averaged delay line
    for (long i = 0; i < len; ++i) {
      const int k = static_cast<int>(i % period);
      const double v = line[k];
      line[k] = 0.497 * (v + line[(k + 1) % period]);
      const long t = start + i;
      if (t < 0 || t >= n) continue;
      out[t] += static_cast<float>(v * envelope(i, len, rate / 2000, 0.0));
    }
  }
}

void synth_piano(std::span<float> out, const Grid& grid, int key, int rate, Rng& rng) {
  static const int kProgression[] = {0, 5, 7, 9};
  const long n = static_cast<long>(out.size());
  const long bar = 8;
  for (long j = 0; j < grid.count; j += bar) {
    const int shift = kProgression[rng.uniform_int(0, 3)];
    const int third = shift == 9 ? 3 : 4;
    const int tones[] = {0, third, 7};
    const long len = std::lround(grid.eighth * bar);
    const long start = grid.at(j);
    for (int tone : tones) {
      const double f = midi_hz(60 + key + shift + tone);
      for (long i = 0; i < len; ++i) {
        const long t = start + i;
        if (t < 0 || t >= n) continue;
        const double ph = kTwoPi * f * i / rate;
        const double v = std::sin(ph) + 0.4 * std::sin(2 * ph) + 0.15 * std::sin(3 * ph);
        out[t] += static_cast<float>(envelope(i, len, rate / 200, 1.5 / rate) * v);
      }
    }
  }
}

}  // namespace

void ToyCorpusSpec::validate() const {
  if (n_examples < 1) throw ArgumentError("toy corpus needs at least one example");
  if (!(tempo_min > 0) || tempo_max < tempo_min) throw ArgumentError("invalid tempo range");
  if (key_set.empty()) throw ArgumentError("toy corpus key set is empty");
  for (int k : key_set) {
    if (k < 0 || k > 11) throw ArgumentError("pitch class " + std::to_string(k) + " outside 0..11");
  }
  if (sample_rate <= 0 || clip_samples <= 0) throw ArgumentError("invalid toy clip geometry");
  if (!(stem_peak > 0) || stem_peak * 4 > 1.0 + 1e-12) throw ArgumentError("stem peak must be in (0, 0.25]");
}

ToyExampleInfo toy_example_info(const ToyCorpusSpec& spec, int index) {
  spec.validate();
  if (index < 0 || index >= spec.n_examples) {
    throw ArgumentError("toy example index " + std::to_string(index) + " outside [0, " +
                        std::to_string(spec.n_examples) + ")");
  }
  Rng rng = Rng::derive(spec.seed, kInfo, static_cast<std::uint64_t>(index));
  ToyExampleInfo info;
  info.tempo_bpm = spec.tempo_min + (spec.tempo_max - spec.tempo_min) * rng.uniform();
  info.key = spec.key_set[rng.uniform_int(0, static_cast<int>(spec.key_set.size()) - 1)];
  const double beat = 60.0 * spec.sample_rate / info.tempo_bpm;
  info.beat_offset = static_cast<long>(rng.uniform() * beat);
  return info;
}

WaveformStack synth_toy_example(const ToyCorpusSpec& spec, int index) {
  const ToyExampleInfo info = toy_example_info(spec, index);
  const int rate = spec.sample_rate;
  const double eighth = info.eighth_samples(rate);
  // start one bar early so the clip opens mid-phrase
  const Grid grid{info.beat_offset - std::lround(8 * eighth), eighth,
                  static_cast<long>(std::ceil((spec.clip_samples + 8 * eighth) / eighth)) + 1};

  WaveformStack stack = WaveformStack::zeros(4, spec.clip_samples, rate);
  const auto idx = static_cast<std::uint64_t>(index);
  Rng bass = Rng::derive(spec.seed, kBass, idx);
  Rng drums = Rng::derive(spec.seed, kDrums, idx);
  Rng guitar = Rng::derive(spec.seed, kGuitar, idx);
  Rng piano = Rng::derive(spec.seed, kPiano, idx);
  synth_bass(stack.stem(0), grid, info.key, rate, bass);
  synth_drums(stack.stem(1), grid, rate, drums);
  synth_guitar(stack.stem(2), grid, info.key, rate, guitar);
  synth_piano(stack.stem(3), grid, info.key, rate, piano);
  for (int s = 0; s < 4; ++s) normalize_peak(stack.stem(s), spec.stem_peak);
  return stack;
}

void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpusSpec& spec) {
  spec.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["seed"] = spec.seed;
  manifest["spec"] = {{"n_examples", spec.n_examples},   {"tempo_range", {spec.tempo_min, spec.tempo_max}},
                      {"key_set", spec.key_set},         {"sample_rate", spec.sample_rate},
                      {"clip_samples", spec.clip_samples}, {"stem_peak", spec.stem_peak},
                      {"stems", default_stem_names()}};
  nlohmann::json examples = nlohmann::json::array();
  char name[32];
  for (int i = 0; i < spec.n_examples; ++i) {
    const WaveformStack stack = synth_toy_example(spec, i);
    std::snprintf(name, sizeof name, "example_%05d", i);
    save_stems(dir / name, stack);
    const ToyExampleInfo info = toy_example_info(spec, i);
    examples.push_back({{"name", name},
                        {"checksum", checksum(stack)},
                        {"tempo_bpm", info.tempo_bpm},
                        {"key", info.key},
                        {"beat_offset", info.beat_offset}});
  }
  manifest["examples"] = std::move(examples);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

}  // namespace stemdiff::audio
