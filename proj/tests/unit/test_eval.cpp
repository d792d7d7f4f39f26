#include <cmath>
#include <numbers>

#include "doctest.h"
#include "stemdiff/core/random.hpp"
#include "stemdiff/eval/metrics.hpp"

using namespace stemdiff;
using namespace stemdiff::eval;

namespace {

audio::MelStack random_mel(int S, int T, int F, Rng& rng) {
  audio::MelStack m{Tensorf({S, T, F}), audio::MelConfig{}};
  for (auto& v : m.values.values()) v = static_cast<float>(rng.normal());
  return m;
}

/// Emits a fixed matrix of rows regardless of the audio, keyed by the first sample.
class TableEmbedder : public Embedder {
 public:
  TableEmbedder(std::vector<Eigen::MatrixXd> table) : table_(std::move(table)) {}
  std::string id() const override { return "table"; }
  int dim() const override { return static_cast<int>(table_.front().cols()); }
  Eigen::MatrixXd embed(std::span<const float> audio, int) const override {
    return table_.at(static_cast<std::size_t>(audio[0]));
  }

 private:
  std::vector<Eigen::MatrixXd> table_;
};

GaussianStats diagonal_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& diag) {
  return GaussianStats(mean, diag.asDiagonal().toDenseMatrix(), 10);
}

Eigen::MatrixXd random_psd(int d, Rng& rng) {
  Eigen::MatrixXd a(d, d);
  for (long i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  return a * a.transpose() / d;
}

}  // namespace

TEST_CASE("mel_mse of identical stacks is zero per stem") {
  Rng rng(1);
  const auto m = random_mel(4, 16, 8, rng);
  const auto e = mel_mse(m, m);
  REQUIRE(e.size() == 4);
  for (double v : e) CHECK(v == 0.0);
}

TEST_CASE("a constant log-Mel offset gives its square") {
  Rng rng(2);
  const auto ref = random_mel(4, 16, 8, rng);
  for (double delta : {0.25, -1.5, 3.0}) {
    audio::MelStack est = ref;
    for (auto& v : est.values.values()) v = static_cast<float>(v + delta);
    for (double v : mel_mse(est, ref)) CHECK(v == doctest::Approx(delta * delta).epsilon(1e-6));
  }
}

TEST_CASE("mel_mse is nonnegative, symmetric and separates stacks") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_mel(3, 8, 4, rng), b = random_mel(3, 8, 4, rng);
    const auto ab = mel_mse(a, b), ba = mel_mse(b, a);
    for (int s = 0; s < 3; ++s) {
      CHECK(ab[s] >= 0.0);
      CHECK(ab[s] == ba[s]);
    }
    audio::MelStack c = a;
    const int cell = rng.uniform_int(0, static_cast<int>(c.values.size()) - 1);
    c.values[cell] += 1e-3f;
    const auto ac = mel_mse(a, c);
    CHECK(ac[cell / 32] > 0.0);
    for (int s = 0; s < 3; ++s) {
      if (s != cell / 32) CHECK(ac[s] == 0.0);
    }
  }
}

TEST_CASE("mel_mse rejects mismatched geometry") {
  Rng rng(4);
  CHECK_THROWS_AS(mel_mse(random_mel(4, 16, 8, rng), random_mel(3, 16, 8, rng)), ShapeError);
  CHECK_THROWS_AS(mel_mse(random_mel(4, 16, 8, rng), random_mel(4, 8, 8, rng)), ShapeError);
  CHECK_THROWS_AS(mel_mse(audio::WaveformStack::zeros(4, 1600), audio::WaveformStack::zeros(4, 3200), {}),
                  ShapeError);
}

TEST_CASE("mel_mse on waveforms goes through the log-Mel transform") {
  audio::WaveformStack a = audio::WaveformStack::zeros(2, 3200), b = a;
  for (long i = 0; i < 3200; ++i) b.stem(1)[i] = static_cast<float>(0.3 * std::sin(0.2 * i));
  const auto e = mel_mse(a, b, audio::MelConfig{});
  CHECK(e[0] == 0.0);
  const auto ma = audio::mel_forward(a, {}), mb = audio::mel_forward(b, {});
  CHECK(e[1] == doctest::Approx(mel_mse(ma, mb)[1]).epsilon(1e-12));
  CHECK(e[1] > 1.0);
}

TEST_CASE("identical embeddings have zero covariance") {
  Eigen::MatrixXd rows(6, 3);
  rows.rowwise() = Eigen::RowVector3d(1.0, -2.0, 0.5);
  const auto st = stats_from_embeddings(rows);
  CHECK(st.covariance.cwiseAbs().maxCoeff() == 0.0);
  CHECK(st.mean == Eigen::Vector3d(1.0, -2.0, 0.5));
  CHECK(st.count == 6);
}

TEST_CASE("standard normal embeddings recover unit statistics") {
  Rng rng(5);
  const int d = 8;
  Eigen::MatrixXd rows(100000, d);
  for (long i = 0; i < rows.size(); ++i) rows.data()[i] = rng.normal();
  const auto st = stats_from_embeddings(rows);
  CHECK(st.mean.cwiseAbs().maxCoeff() < 0.02);
  CHECK((st.covariance - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("fewer than two vectors is a statistics error") {
  CHECK_THROWS_AS(stats_from_embeddings(Eigen::MatrixXd(1, 4)), StatisticsError);
  CHECK_THROWS_AS(stats_from_embeddings(Eigen::MatrixXd(0, 4)), StatisticsError);
  TableEmbedder one({Eigen::MatrixXd::Ones(1, 2)});
  CHECK_THROWS_AS(embed_stats({{0.0f}}, 16000, one), StatisticsError);
}

TEST_CASE("embed_stats records metadata and ignores clip order") {
  Rng rng(6);
  std::vector<Eigen::MatrixXd> table;
  std::vector<std::vector<float>> clips;
  for (int i = 0; i < 12; ++i) {
    Eigen::MatrixXd m(3, 5);
    for (long k = 0; k < m.size(); ++k) m.data()[k] = rng.normal() * 1e3;
    table.push_back(m);
    clips.push_back({static_cast<float>(i), 0.0f});
  }
  TableEmbedder emb(table);
  const auto st = embed_stats(clips, 16000, emb, {"bass", "drums"});
  CHECK(st.metadata.embedder_id == "table");
  CHECK(st.metadata.stem_names == std::vector<std::string>{"bass", "drums"});
  CHECK(st.metadata.clips == 12);
  CHECK(st.count == 36);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(clips.begin(), clips.end(), rng.engine());
    const auto sh = embed_stats(clips, 16000, emb, {"bass", "drums"});
    CHECK(sh.mean == st.mean);
    CHECK(sh.covariance == st.covariance);
  }
  clips.push_back({0.0f});
  CHECK_THROWS_AS(embed_stats(clips, 16000, emb), ShapeError);
}

TEST_CASE("frechet distance of identical stats is zero") {
  Rng rng(7);
  for (int d : {1, 4, 32}) {
    Eigen::VectorXd mu(d);
    for (int i = 0; i < d; ++i) mu[i] = rng.normal();
    const GaussianStats s(mu, random_psd(d, rng), 100);
    CHECK(frechet_distance(s, s) < 1e-9);
  }
}

TEST_CASE("equal covariances leave only the squared mean difference") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = rng.uniform_int(1, 24);
    const Eigen::MatrixXd cov = trial % 2 ? random_psd(d, rng) : Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd m(d);
    for (int i = 0; i < d; ++i) m[i] = rng.normal();
    const GaussianStats a(Eigen::VectorXd::Zero(d), cov, 10), b(m, cov, 10);
    CHECK(std::abs(frechet_distance(a, b) - m.squaredNorm()) < 1e-9);
  }
}

TEST_CASE("diagonal covariances match the closed form") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = rng.uniform_int(1, 32);
    Eigen::VectorXd ma(d), mb(d), va(d), vb(d);
    double expected = 0;
    for (int i = 0; i < d; ++i) {
      ma[i] = rng.normal();
      mb[i] = rng.normal();
      va[i] = 0.1 + 2.0 * rng.uniform();
      vb[i] = 0.1 + 2.0 * rng.uniform();
      expected += (ma[i] - mb[i]) * (ma[i] - mb[i]) + va[i] + vb[i] - 2.0 * std::sqrt(va[i] * vb[i]);
    }
    CHECK(std::abs(frechet_distance(diagonal_stats(ma, va), diagonal_stats(mb, vb)) - expected) < 1e-9);
  }
}

TEST_CASE("frechet distance is symmetric and nonnegative") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = rng.uniform_int(1, 16);
    Eigen::VectorXd ma(d), mb(d);
    for (int i = 0; i < d; ++i) {
      ma[i] = rng.normal();
      mb[i] = rng.normal();
    }
    const GaussianStats a(ma, random_psd(d, rng), 10), b(mb, random_psd(d, rng), 10);
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    CHECK(ab >= 0.0);
    CHECK(std::abs(ab - ba) < 1e-9);
    CHECK(ab > 0.0);
  }
}

TEST_CASE("frechet distance guards dimensions and definiteness") {
  const GaussianStats a(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), 2);
  const GaussianStats b(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3), 2);
  CHECK_THROWS_AS(frechet_distance(a, b), ShapeError);
  const GaussianStats bad(Eigen::VectorXd::Zero(2), Eigen::Vector2d(1.0, -1e-3).asDiagonal().toDenseMatrix(), 2);
  CHECK_THROWS_AS(frechet_distance(a, bad), NumericError);
  CHECK_THROWS_AS(frechet_distance(bad, a), NumericError);
  const GaussianStats tiny(Eigen::VectorXd::Zero(2), Eigen::Vector2d(1.0, -1e-11).asDiagonal().toDenseMatrix(), 2);
  CHECK(frechet_distance(a, tiny) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK_THROWS_AS(GaussianStats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(3, 3), 2), ShapeError);
}

TEST_CASE("covariance is symmetrised on construction") {
  Eigen::Matrix2d c;
  c << 2.0, 1.0, 0.0, 2.0;
  const GaussianStats s(Eigen::VectorXd::Zero(2), c, 2);
  CHECK(s.covariance(0, 1) == 0.5);
  CHECK(s.covariance(1, 0) == 0.5);
}

TEST_CASE("toy embedder averages log-Mel frames over one second windows") {
  audio::MelConfig mel;
  mel.mel_bins = 32;
  const ToyEmbedder emb(mel);
  CHECK(emb.dim() == 32);
  std::vector<float> clip(40960);
  for (std::size_t i = 0; i < clip.size(); ++i) {
    clip[i] = static_cast<float>(0.2 * std::sin(2 * std::numbers::pi * (220.0 + 0.05 * i) * i / 16000.0));
  }
  const Eigen::MatrixXd e = emb.embed(clip, 16000);
  // 256 frames, 100-frame windows every 50 frames
  REQUIRE(e.rows() == 4);
  REQUIRE(e.cols() == 32);
  Tensorf one({1, 40960}, clip);
  const auto m = audio::mel_forward(audio::WaveformStack(one, 16000, {"x"}), mel);
  for (int w = 0; w < 4; ++w) {
    for (int f = 0; f < 32; ++f) {
      double acc = 0;
      for (int t = 50 * w; t < 50 * w + 100; ++t) acc += m.values[t * 32 + f];
      CHECK(e(w, f) == doctest::Approx(acc / 100).epsilon(1e-9));
    }
  }
  CHECK(emb.embed(clip, 16000) == e);
  CHECK_THROWS_AS(emb.embed(clip, 44100), ConfigError);
}

TEST_CASE("white noise clips are reproducible and bounded") {
  const auto a = white_noise_clips(3, 1000, 0.5, 4), b = white_noise_clips(3, 1000, 0.5, 4);
  CHECK(a == b);
  CHECK(a[0] != a[1]);
  for (const auto& c : a) {
    for (float v : c) REQUIRE(std::abs(v) <= 0.5f);
  }
}
