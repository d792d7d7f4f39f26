#include "stemdiff/pipeline/config.hpp"

#include <fstream>
#include <set>

namespace stemdiff::pipeline {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

std::string mismatch(const std::string& what, long a, const std::string& other, long b) {
  return what + " " + std::to_string(a) + " does not match " + other + " " + std::to_string(b);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(profile == "paper" || profile == "toy" || profile == "custom",
          "unknown profile '" + profile + "' (expected paper, toy or custom)");
  require(clip_samples > 0, "clip_samples must be positive");
  mel.validate(clip_samples);
  codec.validate();
  unet.validate();
  diffusion::build_schedule(schedule);

  const int frames = mel.frames_for(clip_samples);
  const int r = codec.compression_ratio;
  require(codec.frames == frames, mismatch("codec.frames", codec.frames, "Mel frame count", frames));
  require(codec.mel_bins == mel.mel_bins, mismatch("codec.mel_bins", codec.mel_bins, "mel.mel_bins", mel.mel_bins));
  require(unet.latent_channels == codec.latent_channels,
          mismatch("unet.latent_channels", unet.latent_channels, "codec.latent_channels", codec.latent_channels));
  require(unet.frames == frames / r, mismatch("unet.frames", unet.frames, "latent frames", frames / r));
  require(unet.bins == mel.mel_bins / r, mismatch("unet.bins", unet.bins, "latent bins", mel.mel_bins / r));
  require(unet.stems == static_cast<int>(corpus.stems.size()),
          mismatch("unet.stems", unet.stems, "corpus stem count", static_cast<long>(corpus.stems.size())));
  require(unet.total_steps == schedule.steps,
          mismatch("unet.total_steps", unet.total_steps, "schedule.steps", schedule.steps));

  require(training.learning_rate > 0.0, "training.learning_rate must be positive");
  require(training.epochs >= 1 || training.max_steps > 0, "training needs epochs or max_steps");
  require(training.batch_size >= 1, "training.batch_size must be positive");
  require(training.drop_prob >= 0.0 && training.drop_prob <= 1.0, "training.drop_prob must lie in [0, 1]");
  require(training.max_steps >= 0 && training.checkpoint_every >= 0, "training step counts must be non-negative");
  require(training.grad_clip >= 0.0, "training.grad_clip must be non-negative");

  require(inference.steps >= 1 && inference.steps <= schedule.steps,
          "inference.steps must lie in [1, " + std::to_string(schedule.steps) + "]");
  for (double eta : {inference.eta_separate, inference.eta_generate, inference.eta_partial}) {
    require(eta >= 0.0 && eta <= 1.0, "inference eta values must lie in [0, 1]");
  }
  require(inference.griffin_lim_iterations >= 1, "inference.griffin_lim_iterations must be positive");

  require(corpus.kind == "toy" || corpus.kind == "directory", "corpus.kind must be 'toy' or 'directory'");
  require(!corpus.stems.empty(), "corpus.stems must not be empty");
  require(corpus.eval_examples >= 1, "corpus.eval_examples must be positive");
  if (corpus.kind == "toy") {
    require(corpus.stems == audio::default_stem_names(), "the toy corpus always has bass, drums, guitar and piano");
    try {
      toy_spec().validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("corpus.toy: ") + e.what());
    }
  }
}

audio::ToyCorpusSpec ExperimentConfig::toy_spec() const {
  audio::ToyCorpusSpec spec = corpus.toy;
  spec.sample_rate = mel.sample_rate;
  spec.clip_samples = clip_samples;
  return spec;
}

ExperimentConfig profile_config(const std::string& name) {
  ExperimentConfig c;
  if (name == "paper") {
    c.profile = "paper";
    c.corpus.kind = "directory";
    return c;
  }
  if (name == "toy") {
    c.profile = "toy";
    c.mel.mel_bins = 32;
    c.clip_samples = 40960;  // 2.56 s
    c.codec.latent_channels = 4;
    c.codec.widths = {8, 16, 32};
    c.codec.frames = 256;
    c.codec.mel_bins = 32;
    c.codec.learning_rate = 1e-3;
    c.codec.epochs = 1;
    c.codec.max_steps = 1500;
    c.unet.latent_channels = 4;
    c.unet.frames = 64;
    c.unet.bins = 8;
    c.unet.widths = {32, 64};
    c.unet.attention_levels = {1};
    c.unet.time_embed_dim = 64;
    c.unet.dropout = 0.0;
    c.training.learning_rate = 5e-4;
    c.training.epochs = 10;
    c.inference.steps = 100;
    c.corpus.kind = "toy";
    c.corpus.toy.n_examples = 2000;
    return c;
  }
  throw ConfigError("unknown profile '" + name + "' (expected paper or toy)");
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["profile"] = c.profile;
  j["mel"] = {{"window_length", c.mel.window_length}, {"hop", c.mel.hop},         {"mel_bins", c.mel.mel_bins},
              {"sample_rate", c.mel.sample_rate},     {"log_floor", c.mel.log_floor}, {"fmin", c.mel.fmin},
              {"fmax", c.mel.fmax}};
  j["clip_samples"] = c.clip_samples;
  j["codec"] = {{"compression_ratio", c.codec.compression_ratio},
                {"latent_channels", c.codec.latent_channels},
                {"widths", c.codec.widths},
                {"kl_weight", c.codec.kl_weight},
                {"learning_rate", c.codec.learning_rate},
                {"batch_size", c.codec.batch_size},
                {"epochs", c.codec.epochs},
                {"max_steps", c.codec.max_steps},
                {"frames", c.codec.frames},
                {"mel_bins", c.codec.mel_bins}};
  j["schedule"] = {{"kind", diffusion::to_string(c.schedule.kind)},
                   {"steps", c.schedule.steps},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end},
                   {"sigma_max", c.schedule.sigma_max}};
  j["unet"] = {{"stems", c.unet.stems},
               {"latent_channels", c.unet.latent_channels},
               {"frames", c.unet.frames},
               {"bins", c.unet.bins},
               {"widths", c.unet.widths},
               {"attention_levels", c.unet.attention_levels},
               {"res_blocks", c.unet.res_blocks},
               {"time_embed_dim", c.unet.time_embed_dim},
               {"total_steps", c.unet.total_steps},
               {"dropout", c.unet.dropout}};
  j["training"] = {{"learning_rate", c.training.learning_rate}, {"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},       {"drop_prob", c.training.drop_prob},
                   {"max_steps", c.training.max_steps},         {"checkpoint_every", c.training.checkpoint_every},
                   {"grad_clip", c.training.grad_clip},         {"seed", c.training.seed}};
  j["inference"] = {{"steps", c.inference.steps},
                    {"w_separate", c.inference.w_separate},
                    {"eta_separate", c.inference.eta_separate},
                    {"eta_generate", c.inference.eta_generate},
                    {"eta_partial", c.inference.eta_partial},
                    {"griffin_lim_iterations", c.inference.griffin_lim_iterations}};
  const auto& t = c.corpus.toy;
  j["corpus"] = {{"kind", c.corpus.kind},
                 {"root", c.corpus.root},
                 {"stems", c.corpus.stems},
                 {"eval_examples", c.corpus.eval_examples},
                 {"toy",
                  {{"n_examples", t.n_examples},
                   {"tempo_min", t.tempo_min},
                   {"tempo_max", t.tempo_max},
                   {"key_set", t.key_set},
                   {"seed", t.seed},
                   {"stem_peak", t.stem_peak}}}};
  return j;
}

namespace {

/// Keys present in `doc` but not in `known`, as dotted paths.
void unknown_keys(const json& doc, const json& known, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) {
      out.push_back(path);
    } else if (it->is_object() && known[it.key()].is_object()) {
      unknown_keys(*it, known[it.key()], path, out);
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

ExperimentConfig parse(const json& j) {
  ExperimentConfig c;
  read(j, "profile", c.profile);
  read(j, "clip_samples", c.clip_samples);
  if (j.contains("mel")) {
    const json& m = j["mel"];
    read(m, "window_length", c.mel.window_length);
    read(m, "hop", c.mel.hop);
    read(m, "mel_bins", c.mel.mel_bins);
    read(m, "sample_rate", c.mel.sample_rate);
    read(m, "log_floor", c.mel.log_floor);
    read(m, "fmin", c.mel.fmin);
    read(m, "fmax", c.mel.fmax);
  }
  if (j.contains("codec")) {
    const json& m = j["codec"];
    read(m, "compression_ratio", c.codec.compression_ratio);
    read(m, "latent_channels", c.codec.latent_channels);
    read(m, "widths", c.codec.widths);
    read(m, "kl_weight", c.codec.kl_weight);
    read(m, "learning_rate", c.codec.learning_rate);
    read(m, "batch_size", c.codec.batch_size);
    read(m, "epochs", c.codec.epochs);
    read(m, "max_steps", c.codec.max_steps);
    read(m, "frames", c.codec.frames);
    read(m, "mel_bins", c.codec.mel_bins);
  }
  if (j.contains("schedule")) {
    const json& m = j["schedule"];
    if (m.contains("kind")) c.schedule.kind = diffusion::schedule_kind_from_string(m["kind"].get<std::string>());
    read(m, "steps", c.schedule.steps);
    read(m, "beta_start", c.schedule.beta_start);
    read(m, "beta_end", c.schedule.beta_end);
    read(m, "sigma_max", c.schedule.sigma_max);
  }
  if (j.contains("unet")) {
    const json& m = j["unet"];
    read(m, "stems", c.unet.stems);
    read(m, "latent_channels", c.unet.latent_channels);
    read(m, "frames", c.unet.frames);
    read(m, "bins", c.unet.bins);
    read(m, "widths", c.unet.widths);
    read(m, "attention_levels", c.unet.attention_levels);
    read(m, "res_blocks", c.unet.res_blocks);
    read(m, "time_embed_dim", c.unet.time_embed_dim);
    read(m, "total_steps", c.unet.total_steps);
    read(m, "dropout", c.unet.dropout);
  }
  if (j.contains("training")) {
    const json& m = j["training"];
    read(m, "learning_rate", c.training.learning_rate);
    read(m, "epochs", c.training.epochs);
    read(m, "batch_size", c.training.batch_size);
    read(m, "drop_prob", c.training.drop_prob);
    read(m, "max_steps", c.training.max_steps);
    read(m, "checkpoint_every", c.training.checkpoint_every);
    read(m, "grad_clip", c.training.grad_clip);
    read(m, "seed", c.training.seed);
  }
  if (j.contains("inference")) {
    const json& m = j["inference"];
    read(m, "steps", c.inference.steps);
    read(m, "w_separate", c.inference.w_separate);
    read(m, "eta_separate", c.inference.eta_separate);
    read(m, "eta_generate", c.inference.eta_generate);
    read(m, "eta_partial", c.inference.eta_partial);
    read(m, "griffin_lim_iterations", c.inference.griffin_lim_iterations);
  }
  if (j.contains("corpus")) {
    const json& m = j["corpus"];
    read(m, "kind", c.corpus.kind);
    read(m, "root", c.corpus.root);
    read(m, "stems", c.corpus.stems);
    read(m, "eval_examples", c.corpus.eval_examples);
    if (m.contains("toy")) {
      const json& t = m["toy"];
      read(t, "n_examples", c.corpus.toy.n_examples);
      read(t, "tempo_min", c.corpus.toy.tempo_min);
      read(t, "tempo_max", c.corpus.toy.tempo_max);
      read(t, "key_set", c.corpus.toy.key_set);
      read(t, "seed", c.corpus.toy.seed);
      read(t, "stem_peak", c.corpus.toy.stem_peak);
    }
  }
  return c;
}

ExperimentConfig resolve(json doc, const std::filesystem::path& base_dir, std::set<std::filesystem::path>& seen) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  json base;
  if (doc.contains("extends")) {
    const std::string parent = doc["extends"].get<std::string>();
    doc.erase("extends");
    if (parent == "paper" || parent == "toy") {
      base = to_json(profile_config(parent));
    } else {
      const auto path = std::filesystem::weakly_canonical(base_dir / parent);
      if (!seen.insert(path).second) throw ConfigError("config inheritance cycle through " + path.string());
      std::ifstream in(path);
      if (!in) throw ConfigError("cannot read parent config " + path.string());
      json parent_doc;
      try {
        parent_doc = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
      }
      base = to_json(resolve(parent_doc, path.parent_path(), seen));
    }
  } else {
    const std::string profile = doc.value("profile", std::string("toy"));
    base = to_json(profile_config(profile == "custom" ? "toy" : profile));
  }
  std::vector<std::string> unknown;
  unknown_keys(doc, base, "", unknown);
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config keys: " + list);
  }
  base.merge_patch(doc);
  ExperimentConfig c;
  try {
    c = parse(base);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

ExperimentConfig config_from_json(const json& doc) {
  std::set<std::filesystem::path> seen;
  return resolve(doc, std::filesystem::current_path(), seen);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  std::set<std::filesystem::path> seen{std::filesystem::weakly_canonical(path)};
  return resolve(doc, path.parent_path(), seen);
}

std::uint64_t config_fingerprint(const ExperimentConfig& config) {
  const std::string text = to_json(config).dump();
  return codec::fnv1a(text.data(), text.size());
}

json model_section(const ExperimentConfig& config) {
  const json full = to_json(config);
  json out;
  out["mel"] = full["mel"];
  out["clip_samples"] = full["clip_samples"];
  out["codec"] = {{"compression_ratio", full["codec"]["compression_ratio"]},
                  {"latent_channels", full["codec"]["latent_channels"]},
                  {"widths", full["codec"]["widths"]},
                  {"frames", full["codec"]["frames"]},
                  {"mel_bins", full["codec"]["mel_bins"]}};
  out["schedule"] = full["schedule"];
  out["unet"] = full["unet"];
  out["stems"] = full["corpus"]["stems"];
  return out;
}

std::vector<std::string> json_differences(const json& a, const json& b, const std::string& prefix) {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
    for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
    for (const auto& k : keys) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      const json na = a.contains(k) ? a[k] : json(), nb = b.contains(k) ? b[k] : json();
      auto sub = json_differences(na, nb, path);
      out.insert(out.end(), sub.begin(), sub.end());
    }
  } else if (a != b) {
    out.push_back(prefix + ": " + a.dump() + " vs " + b.dump());
  }
  return out;
}

}  // namespace stemdiff::pipeline
