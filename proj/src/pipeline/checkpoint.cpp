#include "stemdiff/pipeline/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace stemdiff::pipeline {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'E', 'M', 'D', 'I', 'F', 'F'};
constexpr char kEnd[4] = {'E', 'N', 'D', '!'};

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename V>
  void pod(const V& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void text(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {
    in_.seekg(0, std::ios::end);
    remaining_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0);
  }
  void bytes(void* data, std::size_t n) {
    if (n > remaining_) throw FormatError(path_ + ": checkpoint is truncated");
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in_) throw FormatError(path_ + ": checkpoint is truncated");
    remaining_ -= n;
  }
  template <typename V>
  V pod() {
    V v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string text() {
    const auto n = pod<std::uint64_t>();
    if (n > remaining_) throw FormatError(path_ + ": checkpoint is truncated");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::uint64_t remaining() const { return remaining_; }

 private:
  std::ifstream& in_;
  std::string path_;
  std::uint64_t remaining_ = 0;
};

std::uint64_t text_fingerprint(const std::string& text) { return codec::fnv1a(text.data(), text.size()); }

}  // namespace

ExperimentConfig CheckpointBundle::experiment() const { return config_from_json(config); }

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string config_text = bundle.config.dump();
  Writer w(out);
  w.bytes(kMagic, sizeof kMagic);
  w.pod(CheckpointBundle::kFormatVersion);
  w.pod(text_fingerprint(config_text));
  w.pod(static_cast<std::int64_t>(bundle.step));
  w.text(bundle.kind);
  w.text(config_text);
  w.pod(static_cast<std::uint64_t>(bundle.scalars.size()));
  for (const auto& [name, value] : bundle.scalars) {
    w.text(name);
    w.pod(value);
  }
  w.pod(static_cast<std::uint64_t>(bundle.blobs.size()));
  for (const auto& [name, tensor] : bundle.blobs) {
    w.text(name);
    w.pod(static_cast<std::uint32_t>(tensor.rank()));
    for (int d : tensor.shape()) w.pod(static_cast<std::int32_t>(d));
    w.bytes(tensor.data(), tensor.size() * sizeof(float));
  }
  w.bytes(kEnd, sizeof kEnd);
  if (!out) throw IoError("failed while writing checkpoint " + path.string());
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(path.string() + " is not a stemdiff checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != CheckpointBundle::kFormatVersion) {
    throw UnsupportedVersionError(path.string() + ": checkpoint format version " + std::to_string(version) +
                                  " is not supported (this build reads version " +
                                  std::to_string(CheckpointBundle::kFormatVersion) + ")");
  }
  CheckpointBundle b;
  b.fingerprint = r.pod<std::uint64_t>();
  b.step = static_cast<long>(r.pod<std::int64_t>());
  b.kind = r.text();
  const std::string config_text = r.text();
  if (text_fingerprint(config_text) != b.fingerprint) {
    throw FormatError(path.string() + ": config fingerprint does not match the stored config");
  }
  try {
    b.config = nlohmann::json::parse(config_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": stored config is not valid JSON: " + e.what());
  }
  const auto n_scalars = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_scalars; ++i) {
    std::string name = r.text();
    b.scalars[name] = r.pod<double>();
  }
  const auto n_blobs = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_blobs; ++i) {
    std::string name = r.text();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw FormatError(path.string() + ": blob " + name + " has implausible rank");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = r.pod<std::int32_t>();
      if (d < 0) throw FormatError(path.string() + ": blob " + name + " has a negative dimension");
      count *= static_cast<std::uint64_t>(d);
    }
    if (count * sizeof(float) > r.remaining()) throw FormatError(path.string() + ": checkpoint is truncated");
    Tensorf t(shape);
    r.bytes(t.data(), t.size() * sizeof(float));
    b.blobs.emplace(std::move(name), std::move(t));
  }
  char end[sizeof kEnd];
  r.bytes(end, sizeof end);
  if (std::memcmp(end, kEnd, sizeof kEnd) != 0 || r.remaining() != 0) {
    throw FormatError(path.string() + ": checkpoint has a corrupt trailer");
  }
  return b;
}

void check_compatible(const CheckpointBundle& bundle, const ExperimentConfig& requested) {
  const auto stored = bundle.experiment();
  const auto diffs = json_differences(model_section(stored), model_section(requested));
  if (diffs.empty()) return;
  std::string message = "checkpoint does not match the requested config (checkpoint vs requested):";
  for (const auto& d : diffs) message += "\n  " + d;
  throw CompatibilityError(message);
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& requested) {
  CheckpointBundle b = load_checkpoint(path);
  check_compatible(b, requested);
  return b;
}

void store_parameters(CheckpointBundle& bundle, const std::string& prefix, nn::ParamList<float> params) {
  for (const auto& p : params) bundle.blobs[prefix + "param." + p.name] = p.var->value();
}

void store_optimizer(CheckpointBundle& bundle, const std::string& prefix, nn::Adam<float>& adam) {
  bundle.scalars[prefix + "adam.steps"] = static_cast<double>(adam.steps());
  for (const auto& [name, t] : adam.first_moments()) bundle.blobs[prefix + "adam.m." + name] = t;
  for (const auto& [name, t] : adam.second_moments()) bundle.blobs[prefix + "adam.v." + name] = t;
}

void restore_parameters(const CheckpointBundle& bundle, const std::string& prefix, nn::ParamList<float> params) {
  for (auto& p : params) {
    const auto it = bundle.blobs.find(prefix + "param." + p.name);
    if (it == bundle.blobs.end()) throw FormatError("checkpoint lacks parameter " + prefix + p.name);
    if (it->second.shape() != p.var->value().shape()) {
      throw FormatError("checkpoint parameter " + prefix + p.name + " has shape " + shape_string(it->second.shape()) +
                        ", model expects " + shape_string(p.var->value().shape()));
    }
    p.var->mutable_value() = it->second;
  }
}

void restore_optimizer(const CheckpointBundle& bundle, const std::string& prefix, nn::Adam<float>& adam) {
  const auto steps = bundle.scalars.find(prefix + "adam.steps");
  adam.set_steps(steps == bundle.scalars.end() ? 0 : static_cast<long>(steps->second));
  adam.first_moments().clear();
  adam.second_moments().clear();
  const std::string m = prefix + "adam.m.", v = prefix + "adam.v.";
  for (const auto& [name, t] : bundle.blobs) {
    if (name.rfind(m, 0) == 0) adam.first_moments()[name.substr(m.size())] = t;
    if (name.rfind(v, 0) == 0) adam.second_moments()[name.substr(v.size())] = t;
  }
}

}  // namespace stemdiff::pipeline
