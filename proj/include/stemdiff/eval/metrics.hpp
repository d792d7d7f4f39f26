#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stemdiff/audio/mel.hpp"
#include "stemdiff/audio/waveform.hpp"

namespace stemdiff::eval {

/// Mean squared log-Mel difference per stem. Throws ShapeError unless both
/// stacks share geometry.
std::vector<double> mel_mse(const audio::MelStack& estimate, const audio::MelStack& reference);
std::vector<double> mel_mse(const audio::WaveformStack& estimate, const audio::WaveformStack& reference,
                            const audio::MelConfig& cfg);

struct StatsMetadata {
  std::string embedder_id;
  std::vector<std::string> stem_names;  // which stems were mixed into each clip
  long clips = 0;
};

/// Mean and covariance of an embedding set. The covariance is symmetrised on
/// construction.
struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  long count = 0;
  StatsMetadata metadata;

  GaussianStats() = default;
  GaussianStats(Eigen::VectorXd mean, Eigen::MatrixXd covariance, long count, StatsMetadata metadata = {});
  int dim() const { return static_cast<int>(mean.size()); }
};

/// Unbiased statistics of the rows of `embeddings`. Throws StatisticsError below two rows.
GaussianStats stats_from_embeddings(const Eigen::MatrixXd& embeddings, StatsMetadata metadata = {});

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  /// One row per embedding frame.
  virtual Eigen::MatrixXd embed(std::span<const float> audio, int sample_rate) const = 0;
};

/// Log-Mel band energies averaged over 1 s windows advanced by `hop_seconds`.
class ToyEmbedder : public Embedder {
 public:
  explicit ToyEmbedder(audio::MelConfig mel, double hop_seconds = 0.5);
  std::string id() const override;
  int dim() const override { return mel_.mel_bins; }
  Eigen::MatrixXd embed(std::span<const float> audio, int sample_rate) const override;

 private:
  audio::MelConfig mel_;
  double hop_seconds_;
};

/// Pools every frame embedding of every clip. Clips must share one length.
GaussianStats embed_stats(const std::vector<std::vector<float>>& clips, int sample_rate, const Embedder& embedder,
                          std::vector<std::string> stem_names = {});

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The root trace comes
/// from the eigenvalues of S_a^(1/2) S_b S_a^(1/2). Throws ShapeError on a
/// dimension mismatch and NumericError when a covariance is not PSD.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

/// Eigenvalues below this are an error; between it and zero they are clamped.
constexpr double kPsdTolerance = 1e-8;

/// Independent uniform noise at the given peak, one clip per entry; used as
/// the reference point for generation FAD.
std::vector<std::vector<float>> white_noise_clips(int count, long length, double peak, std::uint64_t seed);

}  // namespace stemdiff::eval
