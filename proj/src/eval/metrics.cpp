#include "stemdiff/eval/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "stemdiff/core/random.hpp"

namespace stemdiff::eval {

std::vector<double> mel_mse(const audio::MelStack& estimate, const audio::MelStack& reference) {
  require_same_shape(estimate.values.shape(), reference.values.shape(), "mel_mse");
  const int S = reference.stems();
  const std::size_t plane = reference.values.size() / std::max(S, 1);
  std::vector<double> out(S, 0.0);
  for (int s = 0; s < S; ++s) {
    double acc = 0;
    for (std::size_t i = s * plane; i < (s + 1) * plane; ++i) {
      const double d = static_cast<double>(estimate.values[i]) - reference.values[i];
      acc += d * d;
    }
    out[s] = acc / static_cast<double>(plane);
  }
  return out;
}

std::vector<double> mel_mse(const audio::WaveformStack& estimate, const audio::WaveformStack& reference,
                            const audio::MelConfig& cfg) {
  require_same_shape(estimate.samples.shape(), reference.samples.shape(), "mel_mse");
  return mel_mse(audio::mel_forward(estimate, cfg), audio::mel_forward(reference, cfg));
}

GaussianStats::GaussianStats(Eigen::VectorXd m, Eigen::MatrixXd cov, long n, StatsMetadata meta)
    : mean(std::move(m)), covariance(std::move(cov)), count(n), metadata(std::move(meta)) {
  if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
    throw ShapeError("covariance is " + std::to_string(covariance.rows()) + "x" + std::to_string(covariance.cols()) +
                     " for a mean of dimension " + std::to_string(mean.size()));
  }
  covariance = 0.5 * (covariance + covariance.transpose()).eval();
}

GaussianStats stats_from_embeddings(const Eigen::MatrixXd& embeddings, StatsMetadata metadata) {
  const long n = embeddings.rows();
  if (n < 2) throw StatisticsError("need at least 2 embedding vectors, got " + std::to_string(n));
  // rows are accumulated in lexicographic order so the result ignores input order bit for bit
  std::vector<long> order(n);
  for (long i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](long x, long y) {
    for (long c = 0; c < embeddings.cols(); ++c) {
      if (embeddings(x, c) != embeddings(y, c)) return embeddings(x, c) < embeddings(y, c);
    }
    return false;
  });
  Eigen::MatrixXd sorted(n, embeddings.cols());
  for (long i = 0; i < n; ++i) sorted.row(i) = embeddings.row(order[i]);
  const Eigen::VectorXd mean = sorted.colwise().mean().transpose();
  const Eigen::MatrixXd centered = sorted.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  return GaussianStats(mean, cov, n, std::move(metadata));
}

ToyEmbedder::ToyEmbedder(audio::MelConfig mel, double hop_seconds) : mel_(std::move(mel)), hop_seconds_(hop_seconds) {
  mel_.validate();
  if (!(hop_seconds_ > 0.0)) throw ConfigError("embedder hop must be positive");
}

std::string ToyEmbedder::id() const {
  return "toy-logmel-" + std::to_string(mel_.mel_bins) + "x1s-hop" + std::to_string(static_cast<int>(hop_seconds_ * 1000)) + "ms";
}

Eigen::MatrixXd ToyEmbedder::embed(std::span<const float> samples, int sample_rate) const {
  if (sample_rate != mel_.sample_rate) {
    throw ConfigError("embedder expects " + std::to_string(mel_.sample_rate) + " Hz audio, got " +
                      std::to_string(sample_rate));
  }
  const long hop = mel_.hop;
  const int frames = static_cast<int>(static_cast<long>(samples.size()) / hop);
  if (frames < 1) throw ShapeError("clip is shorter than one Mel hop");
  const long length = frames * hop;
  Tensorf one({1, static_cast<int>(length)}, std::vector<float>(samples.begin(), samples.begin() + length));
  const audio::MelStack mel = audio::mel_forward(audio::WaveformStack(one, sample_rate, {"clip"}), mel_);
  const int window = static_cast<int>(std::lround(static_cast<double>(sample_rate) / hop));
  const int step = std::max(1, static_cast<int>(std::lround(hop_seconds_ * sample_rate / hop)));
  const int F = mel_.mel_bins;
  std::vector<int> starts;
  for (int t = 0; t + window <= frames; t += step) starts.push_back(t);
  if (starts.empty()) starts.push_back(0);
  Eigen::MatrixXd out(static_cast<long>(starts.size()), F);
  for (std::size_t k = 0; k < starts.size(); ++k) {
    const int t0 = starts[k], t1 = std::min(frames, t0 + window);
    for (int f = 0; f < F; ++f) {
      double acc = 0;
      for (int t = t0; t < t1; ++t) acc += mel.values[static_cast<std::size_t>(t) * F + f];
      out(static_cast<long>(k), f) = acc / (t1 - t0);
    }
  }
  return out;
}

GaussianStats embed_stats(const std::vector<std::vector<float>>& clips, int sample_rate, const Embedder& embedder,
                          std::vector<std::string> stem_names) {
  std::vector<Eigen::MatrixXd> parts;
  long rows = 0;
  for (const auto& clip : clips) {
    if (clip.size() != clips.front().size()) {
      throw ShapeError("embed_stats: clip lengths differ (" + std::to_string(clip.size()) + " vs " +
                       std::to_string(clips.front().size()) + ")");
    }
    parts.push_back(embedder.embed(clip, sample_rate));
    rows += parts.back().rows();
  }
  Eigen::MatrixXd all(rows, embedder.dim());
  long r = 0;
  for (const auto& p : parts) {
    all.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return stats_from_embeddings(all, {embedder.id(), std::move(stem_names), static_cast<long>(clips.size())});
}

namespace {

Eigen::VectorXd checked_eigenvalues(const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& solver, const char* what) {
  if (solver.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd values = solver.eigenvalues();
  for (long i = 0; i < values.size(); ++i) {
    if (values[i] < -kPsdTolerance) {
      throw NumericError(std::string(what) + " is not positive semidefinite (eigenvalue " +
                         std::to_string(values[i]) + ")");
    }
    values[i] = std::max(values[i], 0.0);
  }
  return values;
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) {
    throw ShapeError("frechet_distance: dimensions " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.covariance);
  const Eigen::VectorXd la = checked_eigenvalues(ea, "first covariance");
  checked_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(b.covariance, Eigen::EigenvaluesOnly),
                      "second covariance");
  const Eigen::MatrixXd root_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd product = root_a * b.covariance * root_a;
  product = 0.5 * (product + product.transpose()).eval();
  const Eigen::VectorXd lp =
      checked_eigenvalues(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(product, Eigen::EigenvaluesOnly), "covariance product");
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const double trace_term = a.covariance.trace() + b.covariance.trace() - 2.0 * lp.cwiseSqrt().sum();
  return std::max(0.0, mean_term + trace_term);
}

std::vector<std::vector<float>> white_noise_clips(int count, long length, double peak, std::uint64_t seed) {
  std::vector<std::vector<float>> out(count, std::vector<float>(length));
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, 31, i);
    for (auto& v : out[i]) v = static_cast<float>(peak * (2.0 * rng.uniform() - 1.0));
  }
  return out;
}

}  // namespace stemdiff::eval
