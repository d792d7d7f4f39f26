#include "stemdiff/pipeline/tasks.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "stemdiff/audio/wav_io.hpp"
#include "stemdiff/pipeline/training.hpp"

namespace stemdiff::pipeline {

using diffusion::SamplerRun;

namespace {

class CountingDenoiser : public diffusion::Denoiser<float> {
 public:
  explicit CountingDenoiser(diffusion::Denoiser<float>& inner) : inner_(inner) {}
  Tensorf predict(const Tensorf& z, const std::vector<int>& steps, const Tensorf* condition) override {
    ++calls;
    if (condition) ++conditional;
    return inner_.predict(z, steps, condition);
  }
  long calls = 0;
  long conditional = 0;

 private:
  diffusion::Denoiser<float>& inner_;
};

nlohmann::json run_json(const SamplerRun& run) {
  return {{"steps", run.steps}, {"eta", run.eta}, {"seed", run.seed}, {"w", run.w}};
}

Shape batch_latent_shape(const Model& model) {
  Shape s = model.config.unet.latent_shape();
  s.insert(s.begin(), 1);
  return s;
}

void finish(Model& model, TaskResult& r, const std::string& task, const SamplerRun& run) {
  r.manifest["task"] = task;
  r.manifest["run"] = run_json(run);
  r.manifest["checkpoint_fingerprint"] = to_hex(model.fingerprint);
  r.manifest["codec_id"] = to_hex(model.codec->codec_id());
  r.manifest["dispatch"] = {{"op", r.dispatch.op},
                            {"w", r.dispatch.w},
                            {"eta", r.dispatch.eta},
                            {"steps", r.dispatch.steps},
                            {"denoiser_calls", r.dispatch.denoiser_calls},
                            {"conditional_calls", r.dispatch.conditional_calls}};
  r.manifest["clipped_samples"] = r.clipped_samples;
  r.manifest["mixture_overflow"] = r.mixture_overflow;
  r.manifest["stems"] = r.stems.stem_names;
  r.manifest["sample_rate"] = r.stems.sample_rate;
  r.manifest["notices"] = r.notices;
}

Tensorf encode_stack(const Model& model, const audio::WaveformStack& stack) {
  return model.codec->encode(audio::mel_forward(stack, model.config.mel), codec::EncodeMode::Mean).values;
}

}  // namespace

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

Model model_from_bundle(const CheckpointBundle& bundle) {
  ExperimentConfig config = bundle.experiment();
  auto codec = codec_from_bundle(bundle);
  if (!codec->trained()) throw StateError("checkpoint codec was not finalised");
  auto schedule = diffusion::build_schedule(config.schedule);
  return Model{std::move(config), std::move(codec), unet_from_bundle(bundle), std::move(schedule), bundle.fingerprint};
}

Model load_model(const std::filesystem::path& path, const ExperimentConfig* requested) {
  const CheckpointBundle b = requested ? load_checkpoint(path, *requested) : load_checkpoint(path);
  return model_from_bundle(b);
}

int TrackMask::given_count() const {
  int n = 0;
  for (bool g : given) n += g;
  return n;
}

std::string TrackMask::label(const std::vector<std::string>& names) const {
  std::string out;
  for (int s = 0; s < stems(); ++s) {
    if (!given[s]) continue;
    const std::string& n = s < static_cast<int>(names.size()) ? names[s] : std::string("?");
    out += static_cast<char>(std::toupper(static_cast<unsigned char>(n.empty() ? '?' : n[0])));
  }
  return out;
}

std::vector<TrackMask> arrangement_subsets(int stems) {
  if (stems < 2 || stems > 16) throw ArgumentError("arrangement needs between 2 and 16 stems");
  std::vector<TrackMask> out;
  for (int size = 1; size < stems; ++size) {
    std::vector<bool> pick(stems, false);
    std::fill(pick.begin(), pick.begin() + size, true);
    // prev_permutation over a sorted-descending selector walks combinations in lexicographic order
    do {
      out.push_back({pick});
    } while (std::prev_permutation(pick.begin(), pick.end()));
  }
  return out;
}

TaskResult render_latent(Model& model, const Tensorf& latent) {
  TaskResult r;
  r.latent = latent;
  const audio::MelStack mel = model.codec->decode({latent, model.codec->codec_id()});
  r.stems = audio::mel_invert(mel, model.config.mel, model.config.inference.griffin_lim_iterations);
  r.stems.stem_names = model.config.corpus.stems;
  r.clipped_samples = audio::hard_clip(r.stems);
  r.mixture = audio::mix_stack(r.stems);
  for (float v : r.mixture) r.mixture_overflow += std::abs(v) > 1.0f;
  return r;
}

TaskResult separate(Model& model, std::span<const float> mixture, const SamplerRun& run) {
  const long expected = model.config.clip_samples;
  if (static_cast<long>(mixture.size()) != expected) {
    throw LengthError("mixture has " + std::to_string(mixture.size()) + " samples, the model expects exactly " +
                      std::to_string(expected));
  }
  const audio::WaveformStack mix(Tensorf({1, static_cast<int>(expected)}, std::vector<float>(mixture.begin(), mixture.end())),
                                 model.config.mel.sample_rate, {"mixture"});
  const Tensorf condition = encode_stack(model, mix);  // [1, C, T', F']
  CountingDenoiser counter(*model.unet);
  const Tensorf z = diffusion::ddim_sample<float>(counter, run, model.schedule, batch_latent_shape(model), &condition);
  TaskResult r = render_latent(model, z.reshaped(model.config.unet.latent_shape()));
  r.dispatch = {"ddim_sample", run.w, run.eta, run.steps, counter.calls, counter.conditional};
  if (run.w < 1.0) r.notices.push_back("guidance weight below 1 weakens adherence to the mixture");
  double residual = 0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    const double d = static_cast<double>(mixture[i]) - r.mixture[i];
    residual += d * d;
  }
  finish(model, r, "separate", run);
  r.manifest["mixture_residual_l2"] = std::sqrt(residual);
  return r;
}

std::vector<TaskResult> generate_total(Model& model, int count, SamplerRun run) {
  if (count < 1) throw ArgumentError("generation count must be positive");
  run.w = 0.0;
  std::vector<TaskResult> out;
  for (int i = 0; i < count; ++i) {
    SamplerRun item = run;
    item.seed = run.seed + static_cast<std::uint64_t>(i);
    CountingDenoiser counter(*model.unet);
    const Tensorf z = diffusion::ddim_sample<float>(counter, item, model.schedule, batch_latent_shape(model));
    TaskResult r = render_latent(model, z.reshaped(model.config.unet.latent_shape()));
    r.dispatch = {"ddim_sample", 0.0, item.eta, item.steps, counter.calls, counter.conditional};
    finish(model, r, "generate", item);
    out.push_back(std::move(r));
  }
  return out;
}

TaskResult generate_partial(Model& model, const audio::WaveformStack& given, const TrackMask& mask, SamplerRun run) {
  const int S = model.config.unet.stems;
  if (mask.stems() != S) {
    throw ArgumentError("mask covers " + std::to_string(mask.stems()) + " stems, the model has " + std::to_string(S));
  }
  if (given.stems() != S) {
    throw ShapeError("given stack has " + std::to_string(given.stems()) + " stems, the model has " + std::to_string(S));
  }
  if (given.length() != model.config.clip_samples) {
    throw LengthError("given stems have " + std::to_string(given.length()) + " samples, the model expects exactly " +
                      std::to_string(model.config.clip_samples));
  }
  run.w = 0.0;
  Shape batched = batch_latent_shape(model);
  const Tensorf known = encode_stack(model, given).reshaped(batched);
  CountingDenoiser counter(*model.unet);
  const Tensorf z = diffusion::inpaint_sample<float>(counter, known, mask.given, run, model.schedule);
  TaskResult r = render_latent(model, z.reshaped(model.config.unet.latent_shape()));
  r.dispatch = {"inpaint_sample", 0.0, run.eta, run.steps, counter.calls, counter.conditional};
  if (mask.given_count() == S) r.notices.push_back("every stem is given; returning the codec round trip of the input");
  finish(model, r, "inpaint", run);
  r.manifest["given"] = mask.label(model.config.corpus.stems);
  return r;
}

void write_task_outputs(const std::filesystem::path& dir, const TaskResult& result) {
  std::filesystem::create_directories(dir);
  audio::save_stems(dir, result.stems);
  std::vector<float> mix = result.mixture;
  for (auto& v : mix) v = std::clamp(v, -1.0f, 1.0f);
  audio::write_wav(dir / "mixture.wav", mix, result.stems.sample_rate);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << result.manifest.dump(2) << "\n";
}

}  // namespace stemdiff::pipeline
