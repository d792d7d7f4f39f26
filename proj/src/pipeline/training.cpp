#include "stemdiff/pipeline/training.hpp"

#include <algorithm>
#include <numeric>

#include "stemdiff/audio/toy_corpus.hpp"

namespace stemdiff::pipeline {

namespace {

constexpr std::uint64_t kCodecShuffleStream = 21;
constexpr std::uint64_t kCodecNoiseStream = 22;
constexpr std::uint64_t kLdmShuffleStream = 31;
constexpr std::uint64_t kLdmDrawStream = 32;
constexpr std::uint64_t kLdmDropoutStream = 33;
constexpr int kLatentScalePlanes = 256;

Tensorf slab(const Tensorf& t, int index) { return t.slice0(index); }

std::vector<int> epoch_order(long items, std::uint64_t seed, std::uint64_t stream, long epoch) {
  std::vector<int> order(items);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, stream, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

/// Indices of the batch visited at `step`.
std::vector<int> batch_indices(long items, int batch_size, std::uint64_t seed, std::uint64_t stream, long step) {
  const long per_epoch = steps_per_epoch(items, batch_size);
  const long epoch = step / per_epoch, pos = step % per_epoch;
  const auto order = epoch_order(items, seed, stream, epoch);
  const long begin = pos * batch_size;
  const long end = std::min<long>(items, begin + batch_size);
  return std::vector<int>(order.begin() + begin, order.begin() + end);
}

void record_epoch(LossTrace& trace, long per_epoch) {
  if (trace.steps.size() % per_epoch) return;
  const auto first = trace.steps.end() - per_epoch;
  trace.epochs.push_back(std::accumulate(first, trace.steps.end(), 0.0) / static_cast<double>(per_epoch));
}

Tensorf trace_blob(const LossTrace& trace) {
  std::vector<float> v(trace.steps.begin(), trace.steps.end());
  const int n = static_cast<int>(v.size());
  return Tensorf({n}, std::move(v));
}

LossTrace trace_from_blob(const CheckpointBundle& b, const std::string& name, long per_epoch) {
  LossTrace trace;
  const auto it = b.blobs.find(name);
  if (it == b.blobs.end()) return trace;
  for (float v : it->second.values()) {
    trace.steps.push_back(v);
    record_epoch(trace, per_epoch);
  }
  return trace;
}

void store_codec(CheckpointBundle& bundle, codec::LatentCodec& codec, bool with_optimizer) {
  store_parameters(bundle, "codec.", codec.parameters());
  if (with_optimizer) store_optimizer(bundle, "codec.", codec.optimizer());
  bundle.scalars["codec.input_shift"] = codec.input_shift();
  bundle.scalars["codec.input_scale"] = codec.input_scale();
  bundle.scalars["codec.latent_scale"] = codec.latent_scale();
  bundle.scalars["codec.input_ceiling"] = codec.input_ceiling();
  bundle.scalars["codec.trained"] = codec.trained() ? 1.0 : 0.0;
}

long total_steps(long per_epoch, int epochs, long max_steps) {
  return max_steps > 0 ? max_steps : per_epoch * epochs;
}

}  // namespace

long steps_per_epoch(long items, int batch_size) {
  return std::max<long>(1, (items + batch_size - 1) / batch_size);
}

audio::MelStack MelCorpus::example(int index) const { return {slab(stems, index), mel}; }

audio::MelStack MelCorpus::mixture(int index) const {
  Tensorf m = slab(mixtures, index);
  m.reshape({1, m.dim(0), m.dim(1)});
  return {std::move(m), mel};
}

namespace {

MelCorpus assemble(const ExperimentConfig& config, int count,
                   const std::function<audio::WaveformStack(int)>& load) {
  const int S = static_cast<int>(config.corpus.stems.size());
  const int T = config.mel.frames_for(config.clip_samples), F = config.mel.mel_bins;
  MelCorpus corpus{Tensorf({count, S, T, F}), Tensorf({count, T, F}), config.mel};
  for (int i = 0; i < count; ++i) {
    const audio::WaveformStack stack = load(i);
    corpus.stems.set_slice0(i, audio::mel_forward(stack, config.mel).values);
    const auto mix = audio::mix_stack(stack);
    const audio::WaveformStack mixture(Tensorf({1, static_cast<int>(mix.size())}, mix), stack.sample_rate, {"mixture"});
    corpus.mixtures.set_slice0(i, audio::mel_forward(mixture, config.mel).values);
  }
  return corpus;
}

}  // namespace

MelCorpus mel_corpus_from_toy(const ExperimentConfig& config, int first, int count) {
  const auto spec = config.toy_spec();
  return assemble(config, count, [&](int i) { return audio::synth_toy_example(spec, first + i); });
}

std::vector<std::filesystem::path> example_directories(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("corpus directory " + root.string() + " does not exist");
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IoError("corpus directory " + root.string() + " has no examples");
  return dirs;
}

MelCorpus mel_corpus_from_directory(const ExperimentConfig& config, const std::filesystem::path& root) {
  const auto dirs = example_directories(root);
  return assemble(config, static_cast<int>(dirs.size()), [&](int i) {
    return audio::load_stems(dirs[i], config.corpus.stems, audio::ClipSelector::fixed(), config.mel.sample_rate,
                             config.clip_samples);
  });
}

LatentCorpus encode_corpus(const codec::LatentCodec& codec, const MelCorpus& corpus) {
  const int N = corpus.size();
  if (N == 0) throw ArgumentError("cannot encode an empty corpus");
  LatentCorpus out;
  out.codec_id = codec.codec_id();
  for (int i = 0; i < N; ++i) {
    const Tensorf z = codec.encode(corpus.example(i), codec::EncodeMode::Mean).values;
    const Tensorf c = codec.encode(corpus.mixture(i), codec::EncodeMode::Mean).values;
    if (i == 0) {
      Shape zs = z.shape(), cs = c.shape();
      zs.insert(zs.begin(), N);
      cs[0] = N;
      out.stems = Tensorf(zs);
      out.mixtures = Tensorf(cs);
    }
    out.stems.set_slice0(i, z);
    out.mixtures.set_slice0(i, c);
  }
  return out;
}

nlohmann::json LossTrace::to_json() const { return {{"steps", steps}, {"epochs", epochs}}; }

CodecRun train_vae(const ExperimentConfig& config, const MelCorpus& corpus, const TrainOptions& options) {
  config.validate();
  const auto& cc = config.codec;
  const int N = corpus.size();
  if (N == 0) throw ArgumentError("codec training needs a non-empty corpus");
  if (!(corpus.mel == config.mel)) throw ConfigError("corpus Mel settings differ from the config");
  const int S = corpus.stems.dim(1), T = corpus.stems.dim(2), F = corpus.stems.dim(3);
  const long planes = static_cast<long>(N) * (S + 1);
  auto plane = [&](int k, float* dst) {
    const int ex = k / (S + 1), s = k % (S + 1);
    const float* src = s < S ? corpus.stems.data() + (static_cast<std::size_t>(ex) * S + s) * T * F
                             : corpus.mixtures.data() + static_cast<std::size_t>(ex) * T * F;
    std::copy_n(src, static_cast<std::size_t>(T) * F, dst);
  };

  CodecRun run;
  run.codec = std::make_unique<codec::LatentCodec>(cc, config.mel, config.training.seed);
  const long per_epoch = steps_per_epoch(planes, cc.batch_size);
  const long total = total_steps(per_epoch, cc.epochs, cc.max_steps);
  long step = 0;
  if (options.resume) {
    const auto& b = *options.resume;
    if (b.kind != "codec") throw ConfigError("resume checkpoint holds a '" + b.kind + "' run, not a codec");
    check_compatible(b, config);
    restore_parameters(b, "codec.", run.codec->parameters());
    restore_optimizer(b, "codec.", run.codec->optimizer());
    run.codec->restore(b.scalars.at("codec.input_shift"), b.scalars.at("codec.input_scale"), 1.0,
                       b.scalars.at("codec.input_ceiling"), false);
    step = b.step;
    run.trace = trace_from_blob(b, "trace.codec", per_epoch);
  } else {
    Tensorf all({static_cast<int>(planes), T, F});
    for (long k = 0; k < planes; ++k) plane(static_cast<int>(k), all.data() + static_cast<std::size_t>(k) * T * F);
    run.codec->fit_normalization(all);
  }

  auto snapshot = [&](long done, bool final_state) {
    CheckpointBundle b;
    b.kind = "codec";
    b.config = to_json(config);
    b.fingerprint = config_fingerprint(config);
    b.step = done;
    store_codec(b, *run.codec, true);
    b.blobs["trace.codec"] = trace_blob(run.trace);
    if (final_state) b.scalars["codec.trained"] = 1.0;
    return b;
  };

  const long stop = options.stop_after > 0 ? std::min(total, options.stop_after) : total;
  Tensorf batch;
  for (; step < stop; ++step) {
    const auto idx = batch_indices(planes, cc.batch_size, config.training.seed, kCodecShuffleStream, step);
    batch = Tensorf({static_cast<int>(idx.size()), T, F});
    for (std::size_t k = 0; k < idx.size(); ++k) plane(idx[k], batch.data() + k * T * F);
    Rng rng = Rng::derive(config.training.seed, kCodecNoiseStream, static_cast<std::uint64_t>(step));
    const auto l = run.codec->train_step(batch, rng);
    run.trace.steps.push_back(l.reconstruction + cc.kl_weight * l.kl);
    record_epoch(run.trace, per_epoch);
    if (options.progress) options.progress(step + 1, total, run.trace.steps.back());
    if (config.training.checkpoint_every > 0 && !options.checkpoint_path.empty() &&
        (step + 1) % config.training.checkpoint_every == 0 && step + 1 < total) {
      save_checkpoint(snapshot(step + 1, false), options.checkpoint_path);
    }
  }

  if (step >= total) {
    // latent scale from the first stem planes in corpus order
    const long n = std::min<long>(kLatentScalePlanes, static_cast<long>(N) * S);
    Tensorf sample({static_cast<int>(n), T, F});
    for (long k = 0; k < n; ++k) {
      std::copy_n(corpus.stems.data() + static_cast<std::size_t>(k) * T * F, static_cast<std::size_t>(T) * F,
                  sample.data() + static_cast<std::size_t>(k) * T * F);
    }
    run.codec->calibrate_latent_scale(sample);
    run.codec->finalize();
  }
  run.bundle = snapshot(step, step >= total);
  if (!options.checkpoint_path.empty()) save_checkpoint(run.bundle, options.checkpoint_path);
  return run;
}

std::unique_ptr<codec::LatentCodec> codec_from_bundle(const CheckpointBundle& bundle) {
  const ExperimentConfig config = bundle.experiment();
  auto codec = std::make_unique<codec::LatentCodec>(config.codec, config.mel, config.training.seed);
  restore_parameters(bundle, "codec.", codec->parameters());
  auto scalar = [&](const char* name) {
    const auto it = bundle.scalars.find(name);
    if (it == bundle.scalars.end()) throw FormatError(std::string("checkpoint lacks scalar ") + name);
    return it->second;
  };
  codec->restore(scalar("codec.input_shift"), scalar("codec.input_scale"), scalar("codec.latent_scale"),
                 scalar("codec.input_ceiling"), scalar("codec.trained") != 0.0);
  return codec;
}

LdmRun train_ldm(const ExperimentConfig& config, const codec::LatentCodec& codec, const LatentCorpus& corpus,
                 const TrainOptions& options) {
  config.validate();
  if (!(codec.config().latent_channels == config.codec.latent_channels &&
        codec.config().compression_ratio == config.codec.compression_ratio &&
        codec.config().frames == config.codec.frames && codec.config().mel_bins == config.codec.mel_bins)) {
    throw ConfigError("codec geometry differs from the experiment config");
  }
  if (corpus.size() == 0) throw ArgumentError("LDM training needs a non-empty corpus");
  if (corpus.codec_id != codec.codec_id()) throw ConfigError("latent corpus was encoded by a different codec");
  Shape expected = config.unet.latent_shape();
  expected.insert(expected.begin(), corpus.size());
  if (corpus.stems.shape() != expected) {
    throw ConfigError("latent corpus shape " + shape_string(corpus.stems.shape()) + " does not match the denoiser's " +
                      shape_string(expected));
  }

  const auto& tc = config.training;
  const auto schedule = diffusion::build_schedule(config.schedule);
  LdmRun run;
  run.unet = std::make_unique<unet::UNet3d<float>>(config.unet, tc.seed);
  auto params = run.unet->parameters();
  nn::Adam<float> adam({tc.learning_rate, 0.9, 0.999, 1e-8, tc.grad_clip});
  const long N = corpus.size();
  const long per_epoch = steps_per_epoch(N, tc.batch_size);
  const long total = total_steps(per_epoch, tc.epochs, tc.max_steps);
  long step = 0;
  if (options.resume) {
    const auto& b = *options.resume;
    if (b.kind != "ldm") throw ConfigError("resume checkpoint holds a '" + b.kind + "' run, not an LDM");
    check_compatible(b, config);
    restore_parameters(b, "unet.", params);
    restore_optimizer(b, "unet.", adam);
    step = b.step;
    run.trace = trace_from_blob(b, "trace.ldm", per_epoch);
  }

  auto snapshot = [&](long done) {
    CheckpointBundle b;
    b.kind = "ldm";
    b.config = to_json(config);
    b.fingerprint = config_fingerprint(config);
    b.step = done;
    store_codec(b, const_cast<codec::LatentCodec&>(codec), false);
    store_parameters(b, "unet.", params);
    store_optimizer(b, "unet.", adam);
    b.blobs["trace.ldm"] = trace_blob(run.trace);
    return b;
  };

  const Shape z_shape = config.unet.latent_shape();
  const Shape c_shape = config.unet.condition_shape();
  const std::size_t z_size = numel(z_shape), c_size = numel(c_shape);
  const long stop = options.stop_after > 0 ? std::min(total, options.stop_after) : total;
  for (; step < stop; ++step) {
    const auto idx = batch_indices(N, tc.batch_size, tc.seed, kLdmShuffleStream, step);
    const int B = static_cast<int>(idx.size());
    Shape zb = z_shape, cb = c_shape;
    zb.insert(zb.begin(), B);
    cb.insert(cb.begin(), B);
    Tensorf z0(zb), cond(cb);
    for (int k = 0; k < B; ++k) {
      std::copy_n(corpus.stems.data() + idx[k] * z_size, z_size, z0.data() + k * z_size);
      std::copy_n(corpus.mixtures.data() + idx[k] * c_size, c_size, cond.data() + k * c_size);
    }
    Rng draw_rng = Rng::derive(tc.seed, kLdmDrawStream, static_cast<std::uint64_t>(step));
    const auto draw = diffusion::ddpm_draw(z0, &cond, tc.drop_prob, schedule, draw_rng);
    run.rows += B;
    run.unconditional_rows += draw.dropped_count;
    Rng dropout_rng = Rng::derive(tc.seed, kLdmDropoutStream, static_cast<std::uint64_t>(step));
    const nn::ForwardContext ctx{true, config.unet.dropout, &dropout_rng};
    const auto prediction = run.unet->forward(ag::Var<float>(draw.z_n), draw.steps, draw.condition_ptr(), ctx);
    const auto loss = ag::mse(prediction, ag::Var<float>(draw.eps));
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw TrainingDivergence("LDM loss became non-finite at step " + std::to_string(step + 1), step + 1);
    }
    ag::backward(loss);
    adam.step(params);
    nn::zero_grad(params);
    run.trace.steps.push_back(value);
    record_epoch(run.trace, per_epoch);
    if (options.progress) options.progress(step + 1, total, value);
    if (tc.checkpoint_every > 0 && !options.checkpoint_path.empty() && (step + 1) % tc.checkpoint_every == 0 &&
        step + 1 < total) {
      save_checkpoint(snapshot(step + 1), options.checkpoint_path);
    }
  }
  run.bundle = snapshot(step);
  if (!options.checkpoint_path.empty()) save_checkpoint(run.bundle, options.checkpoint_path);
  return run;
}

std::unique_ptr<unet::UNet3d<float>> unet_from_bundle(const CheckpointBundle& bundle) {
  if (bundle.kind != "ldm") throw FormatError("checkpoint holds a '" + bundle.kind + "' run, not an LDM");
  const ExperimentConfig config = bundle.experiment();
  auto net = std::make_unique<unet::UNet3d<float>>(config.unet, config.training.seed);
  restore_parameters(bundle, "unet.", net->parameters());
  return net;
}

}  // namespace stemdiff::pipeline
