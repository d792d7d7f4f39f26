#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "stemdiff/audio/resample.hpp"
#include "stemdiff/audio/wav_io.hpp"
#include "stemdiff/pipeline/evaluation.hpp"
#include "stemdiff/pipeline/training.hpp"

using namespace stemdiff;
using namespace stemdiff::pipeline;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitOther = 1;

struct ConfigFlags {
  std::string file;
  std::string profile = "toy";
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "JSON config file (may use \"extends\")");
    cmd->add_option("--profile", profile, "built-in profile when no config file is given")
        ->check(CLI::IsMember({"paper", "toy"}));
    cmd->add_option("--set", overrides, "override a config field, e.g. --set training.max_steps=100")->take_all();
  }

  ExperimentConfig resolve() const {
    nlohmann::json doc = file.empty() ? to_json(profile_config(profile)) : to_json(load_config(file));
    for (const auto& item : overrides) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key.path=value, got '" + item + "'");
      const std::string key = item.substr(0, eq), text = item.substr(eq + 1);
      nlohmann::json value;
      try {
        value = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception&) {
        value = text;  // bare strings need no quotes
      }
      nlohmann::json patch = value;
      std::string rest = key;
      std::vector<std::string> parts;
      for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
        parts.push_back(rest.substr(0, dot));
      }
      parts.push_back(rest);
      for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
      doc.merge_patch(patch);
    }
    return config_from_json(doc);
  }
};

struct RunFlags {
  int steps = 0;
  double eta = -1.0;
  std::uint64_t seed = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--steps", steps, "sampler steps (default from config)");
    cmd->add_option("--eta", eta, "DDIM eta in [0, 1] (default from config)");
    cmd->add_option("--seed", seed, "sampler seed");
  }
  diffusion::SamplerRun run(const ExperimentConfig& c, double default_eta, double w) const {
    return {steps > 0 ? steps : c.inference.steps, eta >= 0.0 ? eta : default_eta, seed, w};
  }
};

void progress_line(const char* what, long step, long total, double loss) {
  if (step == 1 || step == total || step % 50 == 0) {
    std::fprintf(stderr, "%s step %ld/%ld loss %.5f\n", what, step, total, loss);
  }
}

MelCorpus training_corpus(const ExperimentConfig& c, const std::string& corpus_dir) {
  if (!corpus_dir.empty()) return mel_corpus_from_directory(c, corpus_dir);
  if (!c.corpus.root.empty()) return mel_corpus_from_directory(c, c.corpus.root);
  if (c.corpus.kind == "toy") return mel_corpus_from_toy(c, 0, c.corpus.toy.n_examples);
  throw ConfigError("no corpus: pass --corpus or set corpus.root");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<float> load_mono(const fs::path& path, int rate) {
  auto audio = audio::read_wav(path);
  if (audio.sample_rate == rate) return audio.samples;
  return audio::resample(audio.samples, audio.sample_rate, rate);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-track latent diffusion: separation, generation and arrangement of music stems"};
  app.require_subcommand(1);

  ConfigFlags show_cfg, corpus_cfg, vae_cfg, ldm_cfg;
  std::string out, corpus_dir, codec_path, resume_path, checkpoint, mixture_path, given_dir, eval_dir;
  std::vector<std::string> given_stems;
  int count = 1, examples = 0, gen_count = 0, arr_examples = 0;
  double w = -1.0;
  RunFlags sep_run, gen_run, inp_run;
  long max_steps = 0;
  std::uint64_t eval_seed = 1234;

  auto* show_config = app.add_subcommand("show-config", "print the fully resolved configuration as JSON");
  show_cfg.attach(show_config);

  auto* make_corpus = app.add_subcommand("make-corpus", "synthesise the structured toy corpus as stem WAVs");
  corpus_cfg.attach(make_corpus);
  make_corpus->add_option("--out", out, "output directory")->required();

  auto* train_vae_cmd = app.add_subcommand("train-vae", "train the per-stem latent codec");
  vae_cfg.attach(train_vae_cmd);
  train_vae_cmd->add_option("--corpus", corpus_dir, "corpus directory (default: toy synthesis or corpus.root)");
  train_vae_cmd->add_option("--out", out, "codec checkpoint path")->required();
  train_vae_cmd->add_option("--resume", resume_path, "continue from a codec checkpoint");
  train_vae_cmd->add_option("--max-steps", max_steps, "stop after this many total steps");

  auto* train_ldm_cmd = app.add_subcommand("train-ldm", "train the latent denoiser");
  ldm_cfg.attach(train_ldm_cmd);
  train_ldm_cmd->add_option("--corpus", corpus_dir, "corpus directory (default: toy synthesis or corpus.root)");
  train_ldm_cmd->add_option("--codec", codec_path, "trained codec checkpoint")->required();
  train_ldm_cmd->add_option("--out", out, "LDM checkpoint path")->required();
  train_ldm_cmd->add_option("--resume", resume_path, "continue from an LDM checkpoint");
  train_ldm_cmd->add_option("--max-steps", max_steps, "stop after this many total steps");

  auto* separate_cmd = app.add_subcommand("separate", "split a mixture WAV into stems");
  separate_cmd->add_option("--checkpoint", checkpoint, "LDM checkpoint")->required();
  separate_cmd->add_option("--mixture", mixture_path, "mono mixture WAV")->required();
  separate_cmd->add_option("--out", out, "output directory")->required();
  separate_cmd->add_option("--w", w, "guidance weight (default from config)");
  sep_run.attach(separate_cmd);

  auto* generate_cmd = app.add_subcommand("generate", "generate full multi-stem pieces from noise");
  generate_cmd->add_option("--checkpoint", checkpoint, "LDM checkpoint")->required();
  generate_cmd->add_option("--out", out, "output directory")->required();
  generate_cmd->add_option("--count", count, "number of pieces")->check(CLI::PositiveNumber);
  gen_run.attach(generate_cmd);

  auto* inpaint_cmd = app.add_subcommand("inpaint", "generate the missing stems around given ones");
  inpaint_cmd->add_option("--checkpoint", checkpoint, "LDM checkpoint")->required();
  inpaint_cmd->add_option("--given-dir", given_dir, "directory holding <stem>.wav for the given stems")->required();
  inpaint_cmd->add_option("--given", given_stems, "names of the given stems")->required()->delimiter(',');
  inpaint_cmd->add_option("--out", out, "output directory")->required();
  inp_run.attach(inpaint_cmd);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Mel-MSE, generation FAD and the arrangement table");
  evaluate_cmd->add_option("--checkpoint", checkpoint, "LDM checkpoint")->required();
  evaluate_cmd->add_option("--out", out, "report path (JSON)")->required();
  evaluate_cmd->add_option("--eval-dir", eval_dir, "held-out stem directories (default: toy examples after the training set)");
  evaluate_cmd->add_option("--examples", examples, "evaluation set size (default corpus.eval_examples)");
  evaluate_cmd->add_option("--generate", gen_count, "pieces for generation FAD (default: set size)");
  evaluate_cmd->add_option("--arrangement-examples", arr_examples, "examples per arrangement subset");
  evaluate_cmd->add_option("--steps", sep_run.steps, "sampler steps (default from config)");
  evaluate_cmd->add_option("--seed", eval_seed, "base sampler seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (show_config->parsed()) {
      std::printf("%s\n", to_json(show_cfg.resolve()).dump(2).c_str());
    } else if (make_corpus->parsed()) {
      const auto c = corpus_cfg.resolve();
      audio::write_toy_corpus(out, c.toy_spec());
      std::printf("wrote %d toy examples to %s\n", c.corpus.toy.n_examples, out.c_str());
    } else if (train_vae_cmd->parsed()) {
      const auto c = vae_cfg.resolve();
      const auto corpus = training_corpus(c, corpus_dir);
      CheckpointBundle resume;
      TrainOptions opt;
      opt.checkpoint_path = out;
      opt.stop_after = max_steps;
      if (!resume_path.empty()) {
        resume = load_checkpoint(resume_path);
        opt.resume = &resume;
      }
      opt.progress = [](long s, long t, double l) { progress_line("codec", s, t, l); };
      const auto run = train_vae(c, corpus, opt);
      write_json(out + ".trace.json", run.trace.to_json());
      std::printf("codec checkpoint %s (step %ld, %s)\n", out.c_str(), run.bundle.step,
                  run.codec->trained() ? "finalised" : "partial");
    } else if (train_ldm_cmd->parsed()) {
      const auto c = ldm_cfg.resolve();
      const auto codec_bundle = load_checkpoint(codec_path, c);
      const auto codec = codec_from_bundle(codec_bundle);
      if (!codec->trained()) throw ConfigError("codec checkpoint " + codec_path + " is not finalised");
      const auto latents = encode_corpus(*codec, training_corpus(c, corpus_dir));
      CheckpointBundle resume;
      TrainOptions opt;
      opt.checkpoint_path = out;
      opt.stop_after = max_steps;
      if (!resume_path.empty()) {
        resume = load_checkpoint(resume_path);
        opt.resume = &resume;
      }
      opt.progress = [](long s, long t, double l) { progress_line("ldm", s, t, l); };
      const auto run = train_ldm(c, *codec, latents, opt);
      write_json(out + ".trace.json", run.trace.to_json());
      std::printf("LDM checkpoint %s (step %ld, %ld of %ld rows unconditional)\n", out.c_str(), run.bundle.step,
                  run.unconditional_rows, run.rows);
    } else if (separate_cmd->parsed()) {
      Model model = load_model(checkpoint);
      const auto& c = model.config;
      const auto run = sep_run.run(c, c.inference.eta_separate, w >= 0.0 ? w : c.inference.w_separate);
      const auto mixture = load_mono(mixture_path, c.mel.sample_rate);
      const auto result = separate(model, mixture, run);
      for (const auto& n : result.notices) std::fprintf(stderr, "notice: %s\n", n.c_str());
      write_task_outputs(out, result);
      std::printf("separated %s into %s\n", mixture_path.c_str(), out.c_str());
    } else if (generate_cmd->parsed()) {
      Model model = load_model(checkpoint);
      const auto results = generate_total(model, count, gen_run.run(model.config, model.config.inference.eta_generate, 0.0));
      for (std::size_t i = 0; i < results.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "piece_%03zu", i);
        write_task_outputs(fs::path(out) / name, results[i]);
      }
      std::printf("generated %d pieces in %s\n", count, out.c_str());
    } else if (inpaint_cmd->parsed()) {
      Model model = load_model(checkpoint);
      const auto& c = model.config;
      TrackMask mask = TrackMask::none(c.unet.stems);
      for (const auto& g : given_stems) {
        const auto it = std::find(c.corpus.stems.begin(), c.corpus.stems.end(), g);
        if (it == c.corpus.stems.end()) throw ArgumentError("unknown stem '" + g + "'");
        mask.given[it - c.corpus.stems.begin()] = true;
      }
      const auto given = audio::load_stems(given_dir, c.corpus.stems, audio::ClipSelector::fixed(), c.mel.sample_rate,
                                           c.clip_samples);
      const auto result = generate_partial(model, given, mask, inp_run.run(c, c.inference.eta_partial, 0.0));
      for (const auto& n : result.notices) std::fprintf(stderr, "notice: %s\n", n.c_str());
      write_task_outputs(out, result);
      std::printf("arranged around %s into %s\n", mask.label(c.corpus.stems).c_str(), out.c_str());
    } else if (evaluate_cmd->parsed()) {
      Model model = load_model(checkpoint);
      const auto& c = model.config;
      const int n = examples > 0 ? examples : c.corpus.eval_examples;
      const EvalSet set = eval_dir.empty() ? toy_eval_set(c, n) : directory_eval_set(c, eval_dir, n);
      EvaluationOptions opt;
      opt.separation_examples = set.size();
      opt.generation_count = gen_count > 0 ? gen_count : set.size();
      if (arr_examples > 0) opt.arrangement_examples = arr_examples;
      opt.steps = sep_run.steps;
      opt.seed = eval_seed;
      opt.log = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
      auto report = evaluate_model(model, set, opt);
      report["checkpoint"] = checkpoint;
      report["eval_source"] = eval_dir.empty() ? std::string("toy") : eval_dir;
      write_json(out, report);
      std::printf("%s\n", report.dump(2).c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CompatibilityError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const LengthError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const TrainingDivergence& e) {
    std::fprintf(stderr, "numeric failure at step %ld: %s\n", e.step(), e.what());
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const StatisticsError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return 0;
}
