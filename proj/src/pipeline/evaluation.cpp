#include "stemdiff/pipeline/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace stemdiff::pipeline {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

EvalSet toy_eval_set(const ExperimentConfig& config, int count) {
  auto spec = config.toy_spec();
  const int first = spec.n_examples;
  spec.n_examples += count;
  EvalSet set;
  for (int i = 0; i < count; ++i) {
    set.examples.push_back(audio::synth_toy_example(spec, first + i));
    set.toy_info.push_back(audio::toy_example_info(spec, first + i));
  }
  return set;
}

EvalSet directory_eval_set(const ExperimentConfig& config, const std::filesystem::path& root, int count) {
  const auto dirs = example_directories(root);
  EvalSet set;
  for (int i = 0; i < std::min<int>(count, static_cast<int>(dirs.size())); ++i) {
    set.examples.push_back(audio::load_stems(dirs[i], config.corpus.stems, audio::ClipSelector::fixed(),
                                             config.mel.sample_rate, config.clip_samples));
  }
  return set;
}

std::vector<std::vector<float>> real_mixtures(const EvalSet& set, int count) {
  std::vector<std::vector<float>> out;
  for (int i = 0; i < std::min(count, set.size()); ++i) out.push_back(audio::mix_stack(set.examples[i]));
  return out;
}

PartialGenerator oracle_generator() {
  return [](const audio::WaveformStack& reference, const TrackMask&, int) { return reference; };
}

PartialGenerator model_generator(Model& model, diffusion::SamplerRun base) {
  return [&model, base](const audio::WaveformStack& reference, const TrackMask& mask, int index) {
    diffusion::SamplerRun run = base;
    run.seed = base.seed + static_cast<std::uint64_t>(index);
    return generate_partial(model, reference, mask, run).stems;
  };
}

std::vector<float> arrangement_mixture(const audio::WaveformStack& reference, const audio::WaveformStack& generated,
                                       const TrackMask& mask) {
  require_same_shape(reference.samples.shape(), generated.samples.shape(), "arrangement_mixture");
  std::vector<float> mix(reference.length(), 0.0f);
  for (int s = 0; s < reference.stems(); ++s) {
    const auto src = mask.given.at(s) ? reference.stem(s) : generated.stem(s);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += src[i];
  }
  return mix;
}

double arrangement_fad(const EvalSet& set, int count, const TrackMask& mask, const PartialGenerator& generator,
                       const eval::Embedder& embedder) {
  count = std::min(count, set.size());
  if (count < 1) throw ArgumentError("arrangement FAD needs at least one example");
  std::vector<std::vector<float>> mixes;
  for (int i = 0; i < count; ++i) {
    const auto generated = generator(set.examples[i], mask, i);
    mixes.push_back(arrangement_mixture(set.examples[i], generated, mask));
  }
  const int rate = set.examples.front().sample_rate;
  const auto names = set.examples.front().stem_names;
  const auto real = eval::embed_stats(real_mixtures(set, count), rate, embedder, names);
  const auto fake = eval::embed_stats(mixes, rate, embedder, names);
  return eval::frechet_distance(fake, real);
}

std::vector<int> onset_frames(std::span<const float> samples, const audio::MelConfig& mel) {
  const int hop = mel.hop;
  const int T = static_cast<int>(samples.size() / hop);
  if (T < 2) return {};
  std::vector<double> level(T);
  for (int t = 0; t < T; ++t) {
    double e = 0;
    for (int i = 0; i < hop; ++i) e += static_cast<double>(samples[t * hop + i]) * samples[t * hop + i];
    level[t] = std::log(e / hop + mel.log_floor);
  }
  std::vector<double> flux(T, 0.0);
  for (int t = 1; t < T; ++t) flux[t] = std::max(0.0, level[t] - level[t - 1]);
  const double mean = std::accumulate(flux.begin(), flux.end(), 0.0) / T;
  double var = 0;
  for (double v : flux) var += (v - mean) * (v - mean);
  const double threshold = mean + std::sqrt(var / T);
  constexpr int kRadius = 3;
  std::vector<int> out;
  for (int t = 1; t < T; ++t) {
    if (flux[t] <= threshold) continue;
    bool peak = true;
    for (int d = -kRadius; d <= kRadius && peak; ++d) {
      const int u = t + d;
      if (d == 0 || u < 0 || u >= T) continue;
      peak = d < 0 ? flux[t] > flux[u] : flux[t] >= flux[u];
    }
    if (peak) out.push_back(t);
  }
  return out;
}

std::optional<double> grid_alignment(const std::vector<int>& onsets, const audio::ToyExampleInfo& info,
                                     const audio::MelConfig& mel, int tolerance) {
  if (onsets.empty()) return std::nullopt;
  const double eighth = info.eighth_samples(mel.sample_rate);
  int aligned = 0;
  for (int t : onsets) {
    const double sample = static_cast<double>(t) * mel.hop;
    const double j = std::round((sample - info.beat_offset) / eighth);
    const double nearest = info.beat_offset + j * eighth;
    aligned += std::abs(sample - nearest) <= static_cast<double>(tolerance) * mel.hop;
  }
  return static_cast<double>(aligned) / onsets.size();
}

nlohmann::json evaluate_model(Model& model, const EvalSet& set, const EvaluationOptions& options) {
  using nlohmann::json;
  const auto& cfg = model.config;
  const int steps = options.steps > 0 ? options.steps : cfg.inference.steps;
  const auto log = [&](const std::string& line) {
    if (options.log) options.log(line);
  };
  const eval::ToyEmbedder embedder(cfg.mel);
  const int rate = cfg.mel.sample_rate;
  const auto& names = cfg.corpus.stems;
  json report;
  report["embedder"] = embedder.id();
  report["embedder_note"] =
      "windowed log-Mel band energies; FAD values compare runs of this tool only, not the standard VGGish FAD";
  report["checkpoint_fingerprint"] = to_hex(model.fingerprint);
  report["steps"] = steps;
  report["seed"] = options.seed;

  // separation
  const int n_sep = std::min(options.separation_examples, set.size());
  json separation = json::array();
  for (double w : options.weights) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> sums(names.size(), 0.0);
    for (int i = 0; i < n_sep; ++i) {
      const auto& ref = set.examples[i];
      const auto mix = audio::mix_stack(ref);
      const diffusion::SamplerRun run{steps, cfg.inference.eta_separate, options.seed + static_cast<std::uint64_t>(i), w};
      const auto result = separate(model, mix, run);
      const auto mse = eval::mel_mse(result.stems, ref, cfg.mel);
      for (std::size_t s = 0; s < sums.size(); ++s) sums[s] += mse[s] / n_sep;
    }
    json per_stem;
    for (std::size_t s = 0; s < names.size(); ++s) per_stem[names[s]] = sums[s];
    const double mean = std::accumulate(sums.begin(), sums.end(), 0.0) / static_cast<double>(sums.size());
    separation.push_back({{"w", w}, {"per_stem", per_stem}, {"mean", mean}, {"examples", n_sep}});
    log("separation w=" + std::to_string(w) + " mean Mel-MSE " + std::to_string(mean) + " (" +
        std::to_string(seconds_since(t0)) + " s)");
  }
  report["separation"] = separation;

  // total generation
  {
    const auto t0 = std::chrono::steady_clock::now();
    const diffusion::SamplerRun run{steps, cfg.inference.eta_generate, options.seed, 0.0};
    const auto outputs = generate_total(model, options.generation_count, run);
    std::vector<std::vector<float>> mixes;
    long clipped = 0;
    for (const auto& o : outputs) {
      mixes.push_back(o.mixture);
      clipped += o.clipped_samples;
    }
    const auto real = eval::embed_stats(real_mixtures(set, set.size()), rate, embedder, names);
    const auto fake = eval::embed_stats(mixes, rate, embedder, names);
    const auto noise = eval::embed_stats(
        eval::white_noise_clips(set.size(), cfg.clip_samples, options.white_noise_peak, options.seed), rate, embedder,
        {"white-noise"});
    const double fad = eval::frechet_distance(fake, real);
    const double noise_fad = eval::frechet_distance(noise, real);
    report["generation"] = {{"fad", fad},
                            {"white_noise_fad", noise_fad},
                            {"generated", options.generation_count},
                            {"reference_clips", set.size()},
                            {"clipped_samples", clipped}};
    log("generation FAD " + std::to_string(fad) + " vs white noise " + std::to_string(noise_fad) + " (" +
        std::to_string(seconds_since(t0)) + " s)");
  }

  // arrangement
  {
    const auto t0 = std::chrono::steady_clock::now();
    const int n_arr = std::min(options.arrangement_examples, set.size());
    const diffusion::SamplerRun base{steps, cfg.inference.eta_partial, options.seed, 0.0};
    const auto generator = model_generator(model, base);
    json rows = json::array();
    for (const auto& mask : arrangement_subsets(cfg.unet.stems)) {
      const double fad = arrangement_fad(set, n_arr, mask, generator, embedder);
      rows.push_back({{"given", mask.label(names)}, {"fad", fad}, {"examples", n_arr}});
      log("arrangement " + mask.label(names) + " FAD " + std::to_string(fad));
    }
    report["arrangement"] = rows;
    double oracle = 0;
    for (const auto& mask : arrangement_subsets(cfg.unet.stems)) {
      oracle = std::max(oracle, arrangement_fad(set, n_arr, mask, oracle_generator(), embedder));
    }
    report["arrangement_oracle_fad"] = oracle;
    log("arrangement done, oracle FAD " + std::to_string(oracle) + " (" + std::to_string(seconds_since(t0)) + " s)");
  }

  // onset alignment of generated guitar and piano with bass and drums given
  if (!set.toy_info.empty() && cfg.unet.stems == 4) {
    const int n_on = std::min(options.arrangement_examples, set.size());
    TrackMask mask{{true, true, false, false}};
    const diffusion::SamplerRun base{steps, cfg.inference.eta_partial, options.seed, 0.0};
    int total = 0, aligned = 0;
    int ref_total = 0, ref_aligned = 0;
    for (int i = 0; i < n_on; ++i) {
      diffusion::SamplerRun run = base;
      run.seed = base.seed + static_cast<std::uint64_t>(i);
      const auto out = generate_partial(model, set.examples[i], mask, run);
      for (int s : {2, 3}) {
        const auto onsets = onset_frames(out.stems.stem(s), cfg.mel);
        if (const auto a = grid_alignment(onsets, set.toy_info[i], cfg.mel)) {
          aligned += static_cast<int>(std::lround(*a * onsets.size()));
          total += static_cast<int>(onsets.size());
        }
        const auto ref_onsets = onset_frames(set.examples[i].stem(s), cfg.mel);
        if (const auto a = grid_alignment(ref_onsets, set.toy_info[i], cfg.mel)) {
          ref_aligned += static_cast<int>(std::lround(*a * ref_onsets.size()));
          ref_total += static_cast<int>(ref_onsets.size());
        }
      }
    }
    report["onset_alignment"] = {{"given", "BD"},
                                 {"generated_onsets", total},
                                 {"generated_aligned_fraction", total ? double(aligned) / total : 0.0},
                                 {"reference_onsets", ref_total},
                                 {"reference_aligned_fraction", ref_total ? double(ref_aligned) / ref_total : 0.0},
                                 {"tolerance_frames", 1}};
  }
  return report;
}

}  // namespace stemdiff::pipeline
