#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "stemdiff/audio/mel.hpp"
#include "stemdiff/audio/toy_corpus.hpp"
#include "stemdiff/audio/wav_io.hpp"
#include "stemdiff/core/random.hpp"

using namespace stemdiff;
using namespace stemdiff::audio;

namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("stemdiff_test_audio_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<float> sine(double hz, double amplitude, long n, int rate) {
  std::vector<float> x(n);
  for (long i = 0; i < n; ++i) x[i] = static_cast<float>(amplitude * std::sin(2 * kPi * hz * i / rate));
  return x;
}

WaveformStack single_stem(const std::vector<float>& x, int rate = kDefaultSampleRate) {
  return WaveformStack(Tensorf({1, static_cast<int>(x.size())}, x), rate, {"stem0"});
}

// Plain DFT magnitude at an arbitrary frequency.
double dft_magnitude(std::span<const float> x, double hz, int rate) {
  std::complex<double> acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += double(x[i]) * std::polar(1.0, -2 * kPi * hz * i / rate);
  return std::abs(acc);
}

MelConfig small_config() {
  MelConfig c;
  c.mel_bins = 32;
  return c;
}

}  // namespace

TEST_CASE("mix_stack sums stems without normalization") {
  auto stack = WaveformStack::zeros(4, 8);
  for (float& v : stack.samples.values()) v = 0.1f;
  for (float v : mix_stack(stack)) CHECK(v == doctest::Approx(0.4f).epsilon(1e-6));

  auto lone = WaveformStack::zeros(4, 64);
  Rng rng(3);
  for (float& v : lone.stem(2)) v = static_cast<float>(0.2 * rng.normal());
  const auto mixed = mix_stack(lone);
  for (int i = 0; i < 64; ++i) CHECK(mixed[i] == lone.stem(2)[i]);
}

TEST_CASE("mix_stack is linear and permutation invariant") {
  Rng rng(4);
  auto a = WaveformStack::zeros(4, 256);
  auto b = WaveformStack::zeros(4, 256);
  // dyadic values keep float sums exact
  for (float& v : a.samples.values()) v = static_cast<float>(rng.uniform_int(-64, 64)) / 256.0f;
  for (float& v : b.samples.values()) v = static_cast<float>(rng.uniform_int(-64, 64)) / 256.0f;
  auto sum = a;
  for (std::size_t i = 0; i < sum.samples.size(); ++i) sum.samples[i] += b.samples[i];
  const auto ma = mix_stack(a), mb = mix_stack(b), ms = mix_stack(sum);
  for (int i = 0; i < 256; ++i) CHECK(ma[i] + mb[i] == ms[i]);

  auto perm = a;
  const int order[] = {2, 0, 3, 1};
  for (int s = 0; s < 4; ++s) std::ranges::copy(a.stem(order[s]), perm.stem(s).begin());
  CHECK(mix_stack(perm) == ma);
}

TEST_CASE("full-size geometry gives a 1024 x 64 Mel plane per stem") {
  auto stack = WaveformStack::zeros(4, kDefaultClipSamples);
  Rng rng(5);
  for (float& v : stack.samples.values()) v = static_cast<float>(0.05 * rng.normal());
  const MelStack mel = mel_forward(stack, MelConfig{});
  CHECK(mel.values.shape() == Shape{4, 1024, 64});
  for (float v : mel.values.values()) CHECK(v >= mel.floor_value());
}

TEST_CASE("silence sits exactly on the log floor") {
  const MelStack mel = mel_forward(WaveformStack::zeros(2, 16000), MelConfig{});
  const float floor = static_cast<float>(std::log(1e-5));
  for (float v : mel.values.values()) REQUIRE(v == floor);
}

TEST_CASE("a 440 Hz tone peaks in the filter centred nearest 440 Hz") {
  MelConfig cfg;
  // independent filter centres: F + 2 points evenly spaced on the HTK Mel axis
  auto to_mel = [](double f) { return 1127.0 * std::log1p(f / 700.0); };
  auto to_hz = [](double m) { return 700.0 * std::expm1(m / 1127.0); };
  const double top = to_mel(8000.0);
  int expected = 0;
  double best = 1e9;
  for (int m = 0; m < cfg.mel_bins; ++m) {
    const double centre = to_hz(top * (m + 1) / (cfg.mel_bins + 1));
    if (std::abs(centre - 440.0) < best) best = std::abs(centre - 440.0), expected = m;
  }
  const MelStack mel = mel_forward(single_stem(sine(440.0, 0.25, 32000, 16000)), cfg);
  for (int t = 0; t < mel.frames(); ++t) {
    const float* row = mel.values.data() + t * cfg.mel_bins;
    CHECK(std::max_element(row, row + cfg.mel_bins) - row == expected);
  }
}

TEST_CASE("Mel config rejects unusable geometry") {
  MelConfig c;
  c.hop = 1024;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MelConfig{};
  c.mel_bins = 514;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MelConfig{};
  c.log_floor = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(MelConfig{}.validate(16001), ConfigError);
  CHECK_THROWS_AS(mel_forward(WaveformStack::zeros(1, 16001), MelConfig{}), ConfigError);
}

TEST_CASE("frame count equals clip length over hop") {
  for (int hop : {80, 128, 160, 256, 512}) {
    MelConfig c;
    c.hop = hop;
    c.mel_bins = 16;
    const long n = static_cast<long>(hop) * 37;
    CHECK(mel_forward(WaveformStack::zeros(1, n), c).frames() == 37);
  }
}

TEST_CASE("Mel rows are stem separable and monotone in amplitude") {
  Rng rng(6);
  auto stack = WaveformStack::zeros(3, 8000);
  for (float& v : stack.samples.values()) v = static_cast<float>(0.1 * rng.normal());
  const MelConfig cfg = small_config();
  const MelStack base = mel_forward(stack, cfg);

  auto mutated = stack;
  for (float& v : mutated.stem(1)) v = static_cast<float>(0.1 * rng.normal());
  const MelStack other = mel_forward(mutated, cfg);
  const std::size_t plane = static_cast<std::size_t>(base.frames()) * base.bins();
  for (int s : {0, 2}) {
    for (std::size_t i = 0; i < plane; ++i) REQUIRE(other.values[s * plane + i] == base.values[s * plane + i]);
  }

  auto louder = stack;
  for (float& v : louder.stem(0)) v *= 2.0f;
  const MelStack loud = mel_forward(louder, cfg);
  for (std::size_t i = 0; i < plane; ++i) REQUIRE(loud.values[i] >= base.values[i]);
}

TEST_CASE("Griffin-Lim round trip of a sine stays close in the Mel domain") {
  const MelConfig cfg;
  const MelStack mel = mel_forward(single_stem(sine(440.0, 0.25, kDefaultClipSamples, 16000)), cfg);
  const WaveformStack rebuilt = mel_invert(mel, cfg, 32);
  CHECK(rebuilt.length() == kDefaultClipSamples);
  const MelStack again = mel_forward(rebuilt, cfg);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < mel.values.size(); ++i) {
    num += std::pow(double(again.values[i]) - mel.values[i], 2);
    den += std::pow(double(mel.values[i]), 2);
  }
  const double rel = std::sqrt(num / den);
  MESSAGE("round-trip relative Frobenius error " << rel);
  CHECK(rel < 0.15);
}

TEST_CASE("an all-floor Mel stack inverts to near silence") {
  const MelConfig cfg = small_config();
  MelStack mel{Tensorf({2, 100, cfg.mel_bins}, static_cast<float>(std::log(cfg.log_floor))), cfg};
  const WaveformStack out = mel_invert(mel, cfg, 4);
  CHECK(out.length() == 100 * cfg.hop);
  for (float v : out.samples.values()) REQUIRE(std::abs(v) < 1e-3f);
  CHECK_THROWS_AS(mel_invert(mel, cfg, 0), ArgumentError);
}

TEST_CASE("WAV files round trip at 16-bit precision") {
  const fs::path dir = scratch_dir("wav");
  const auto x = sine(300.0, 0.5, 1000, 16000);
  write_wav(dir / "a.wav", x, 16000);
  const MonoAudio back = read_wav(dir / "a.wav");
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == x.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(back.samples[i] - x[i]) < 1.0f / 32767);
  CHECK_THROWS_AS(read_wav(dir / "missing.wav"), IoError);
}

TEST_CASE("load_stems resamples, crops and fills missing stems with silence") {
  const fs::path dir = scratch_dir("load");
  const double tone = 1234.5;
  write_wav(dir / "bass.wav", sine(tone, 0.5, 44100 * 11, 44100), 44100);
  write_wav(dir / "drums.wav", sine(200.0, 0.3, 16000 * 11, 16000), 16000);
  write_wav(dir / "piano.wav", sine(500.0, 0.3, 16000 * 11, 16000), 16000);
  const WaveformStack stack = load_stems(dir, default_stem_names(), ClipSelector::fixed(0));
  CHECK(stack.samples.shape() == Shape{4, 163840});
  for (float v : stack.stem(2)) REQUIRE(v == 0.0f);
  CHECK(stack.stem(1)[1001] != 0.0f);

  // peak search over a 1 Hz grid on a 1 s excerpt
  const auto excerpt = stack.stem(0).subspan(16000, 16000);
  double best_hz = 0, best = -1;
  for (double hz = 1000; hz <= 1500; hz += 1.0) {
    const double m = dft_magnitude(excerpt, hz, 16000);
    if (m > best) best = m, best_hz = hz;
  }
  CHECK(std::abs(best_hz - tone) / tone < 0.01);

  CHECK_THROWS_AS(load_stems(dir, {}, ClipSelector::fixed(0)), ArgumentError);
  std::ofstream(dir / "guitar.wav") << "not a wav file";
  CHECK_THROWS_AS(load_stems(dir, default_stem_names(), ClipSelector::fixed(0)), Error);
}

TEST_CASE("random clip shift stays inside its window and is seeded") {
  const auto a = ClipSelector::random_shift(100, 50, 9).resolve();
  CHECK(a == ClipSelector::random_shift(100, 50, 9).resolve());
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const long off = ClipSelector::random_shift(100, 50, seed).resolve();
    CHECK(off >= 50);
    CHECK(off <= 150);
  }
}

TEST_CASE("toy examples are deterministic and bounded") {
  ToyCorpusSpec spec;
  spec.seed = 7;
  spec.n_examples = 10;
  const WaveformStack a = synth_toy_example(spec, 3);
  const WaveformStack b = synth_toy_example(spec, 3);
  CHECK(a.samples == b.samples);
  CHECK_FALSE(a.samples == synth_toy_example(spec, 4).samples);
  CHECK_THROWS_AS(synth_toy_example(spec, 10), ArgumentError);
  CHECK_THROWS_AS(synth_toy_example(spec, -1), ArgumentError);
  for (int i = 0; i < spec.n_examples; ++i) {
    const WaveformStack x = synth_toy_example(spec, i);
    for (int s = 0; s < 4; ++s) {
      float peak = 0;
      for (float v : x.stem(s)) peak = std::max(peak, std::abs(v));
      CHECK(peak <= 0.25f);
      CHECK(peak > 0.0f);
    }
    for (float v : mix_stack(x)) REQUIRE(std::abs(v) <= 1.0f);
  }
}

TEST_CASE("toy bass keeps at least 90% of its energy below 400 Hz") {
  ToyCorpusSpec spec;
  spec.n_examples = 5;
  for (int i = 0; i < spec.n_examples; ++i) {
    const auto bass = synth_toy_example(spec, i).stem(0);
    // band energy by Parseval over a 1 Hz-resolution DFT of a 1 s excerpt
    const auto excerpt = bass.subspan(8000, 16000);
    double low = 0, total = 0;
    for (int hz = 0; hz <= 8000; hz += 2) {
      const double e = std::pow(dft_magnitude(excerpt, hz, 16000), 2);
      total += e;
      if (hz < 400) low += e;
    }
    CHECK(low / total >= 0.9);
  }
}

TEST_CASE("toy corpus writes stems and a manifest") {
  const fs::path dir = scratch_dir("corpus");
  ToyCorpusSpec spec;
  spec.n_examples = 2;
  spec.clip_samples = 16000;
  write_toy_corpus(dir, spec);
  CHECK(fs::exists(dir / "manifest.json"));
  const WaveformStack loaded =
      load_stems(dir / "example_00001", default_stem_names(), ClipSelector::fixed(0), 16000, 16000);
  const WaveformStack direct = synth_toy_example(spec, 1);
  for (std::size_t i = 0; i < direct.samples.size(); ++i) {
    REQUIRE(std::abs(loaded.samples[i] - direct.samples[i]) < 1.0f / 32767);
  }
}
