#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "stemdiff/audio/toy_corpus.hpp"
#include "stemdiff/codec/vae.hpp"

using namespace stemdiff;
using namespace stemdiff::codec;

namespace {

LatentCodecConfig small_codec(int frames = 32, int bins = 16) {
  LatentCodecConfig c;
  c.latent_channels = 3;
  c.widths = {4, 4, 8};
  c.frames = frames;
  c.mel_bins = bins;
  return c;
}

audio::MelConfig mel_with_bins(int bins) {
  audio::MelConfig m;
  m.mel_bins = bins;
  return m;
}

audio::MelStack random_mel(int S, int T, int F, Rng& rng) {
  audio::MelStack m{Tensorf({S, T, F}), mel_with_bins(F)};
  for (auto& v : m.values.values()) v = static_cast<float>(-4.0 + 2.0 * rng.normal());
  return m;
}

LatentCodec ready_codec(const LatentCodecConfig& c, std::uint64_t seed = 1) {
  LatentCodec codec(c, mel_with_bins(c.mel_bins), seed);
  codec.finalize();
  return codec;
}

template <typename T>
void set_param(VaeNet<T>& net, const std::string& name, T value) {
  for (auto& p : net.parameters()) {
    if (p.name == name) p.var->mutable_value().fill(value);
  }
}

}  // namespace

TEST_CASE("codec config validation") {
  LatentCodecConfig c = small_codec();
  c.compression_ratio = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_codec();
  c.widths = {4, 4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_codec(30, 16);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(small_codec().validate());
}

TEST_CASE("full-size geometry encodes to 8 x 256 x 16 per stem and decodes back") {
  LatentCodecConfig c;
  c.widths = {4, 4, 4};
  LatentCodec codec = ready_codec(c);
  Rng rng(1);
  const auto mel = random_mel(4, 1024, 64, rng);
  const LatentStack z = codec.encode(mel, EncodeMode::Mean);
  CHECK(z.values.shape() == Shape{4, 8, 256, 16});
  CHECK(z.values.all_finite());
  const audio::MelStack back = codec.decode(z);
  CHECK(back.values.shape() == Shape{4, 1024, 64});
  for (float v : back.values.values()) REQUIRE(v >= back.floor_value());
}

TEST_CASE("shape laws hold across random codec configurations") {
  Rng rng(2);
  for (int trial = 0; trial < 8; ++trial) {
    LatentCodecConfig c;
    c.compression_ratio = 1 << rng.uniform_int(0, 3);
    c.widths.assign(1, 2 * rng.uniform_int(1, 3));
    for (int k = c.compression_ratio; k > 1; k >>= 1) c.widths.push_back(2 * rng.uniform_int(1, 3));
    c.latent_channels = rng.uniform_int(1, 4);
    c.frames = c.compression_ratio * rng.uniform_int(1, 4);
    c.mel_bins = c.compression_ratio * rng.uniform_int(1, 3);
    LatentCodec codec = ready_codec(c, trial);
    const int S = rng.uniform_int(1, 4);
    const auto mel = random_mel(S, c.frames, c.mel_bins, rng);
    const LatentStack z = codec.encode(mel, EncodeMode::Mean);
    CHECK(z.values.shape() ==
          Shape{S, c.latent_channels, c.frames / c.compression_ratio, c.mel_bins / c.compression_ratio});
    CHECK(codec.decode(z).values.shape() == mel.values.shape());
  }
}

TEST_CASE("stems are encoded independently") {
  const LatentCodecConfig c = small_codec();
  LatentCodec codec = ready_codec(c);
  Rng rng(3);
  const auto mel = random_mel(4, 32, 16, rng);
  const LatentStack z = codec.encode(mel, EncodeMode::Mean);
  const std::size_t plane = 32 * 16, lat = z.values.size() / 4;

  audio::MelStack perm = mel;
  const int order[] = {3, 1, 0, 2};
  for (int s = 0; s < 4; ++s) {
    std::copy_n(mel.values.data() + order[s] * plane, plane, perm.values.data() + s * plane);
  }
  const LatentStack zp = codec.encode(perm, EncodeMode::Mean);
  for (int s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < lat; ++i) REQUIRE(zp.values[s * lat + i] == z.values[order[s] * lat + i]);
  }

  audio::MelStack one = mel;
  for (std::size_t i = 0; i < plane; ++i) one.values[2 * plane + i] += 1.0f;
  const LatentStack zo = codec.encode(one, EncodeMode::Mean);
  const audio::MelStack d0 = codec.decode(z), d1 = codec.decode(zo);
  for (int s : {0, 1, 3}) {
    for (std::size_t i = 0; i < lat; ++i) REQUIRE(zo.values[s * lat + i] == z.values[s * lat + i]);
    for (std::size_t i = 0; i < plane; ++i) REQUIRE(d1.values[s * plane + i] == d0.values[s * plane + i]);
  }

  audio::MelStack single{Tensorf({1, 32, 16}), mel.config};
  std::copy_n(mel.values.data(), plane, single.values.data());
  CHECK(codec.decode(codec.encode(single, EncodeMode::Mean)).values.shape() == Shape{1, 32, 16});
}

TEST_CASE("mean mode is deterministic and sample mode follows the posterior") {
  const LatentCodecConfig c = small_codec();
  LatentCodec codec = ready_codec(c);
  Rng rng(4);
  const auto mel = random_mel(2, 32, 16, rng);
  CHECK(codec.encode(mel, EncodeMode::Mean).values == codec.encode(mel, EncodeMode::Mean).values);
  CHECK_THROWS_AS(codec.encode(mel, EncodeMode::Sample), ArgumentError);
  Rng a(9), b(9);
  const auto s1 = codec.encode(mel, EncodeMode::Sample, &a);
  CHECK(s1.values == codec.encode(mel, EncodeMode::Sample, &b).values);
  CHECK_FALSE(s1.values == codec.encode(mel, EncodeMode::Mean).values);
}

TEST_CASE("codec state and geometry guards") {
  const LatentCodecConfig c = small_codec();
  LatentCodec fresh(c, mel_with_bins(16), 1);
  Rng rng(5);
  const auto mel = random_mel(2, 32, 16, rng);
  CHECK_THROWS_AS(fresh.encode(mel, EncodeMode::Mean), StateError);
  LatentCodec codec = ready_codec(c, 1);
  LatentCodec other = ready_codec(c, 2);
  const LatentStack z = codec.encode(mel, EncodeMode::Mean);
  CHECK(z.codec_id == codec.codec_id());
  CHECK(codec.codec_id() != other.codec_id());
  CHECK_THROWS_AS(other.decode(z), StateError);
  CHECK_THROWS_AS(codec.encode(random_mel(2, 30, 16, rng), EncodeMode::Mean), ShapeError);
  CHECK_THROWS_AS(codec.encode(random_mel(2, 32, 8, rng), EncodeMode::Mean), ShapeError);
  CHECK_THROWS_AS(LatentCodec(c, mel_with_bins(32), 1), ConfigError);
}

TEST_CASE("decoded values stay inside the range seen when fitting") {
  const LatentCodecConfig c = small_codec();
  LatentCodec codec(c, mel_with_bins(16), 3);
  Rng rng(3);
  const auto fit = random_mel(4, 32, 16, rng);
  codec.fit_normalization(fit.values);
  // a large output bias drives the raw decoder far above the data range
  for (auto& p : codec.parameters()) {
    if (p.name == "dec.out.bias") p.var->mutable_value().fill(20.0f);
  }
  codec.finalize();
  const float peak = *std::max_element(fit.values.values().begin(), fit.values.values().end());
  CHECK(codec.input_ceiling() == doctest::Approx(peak));

  LatentStack wild{Tensorf({2, 3, 8, 4}), codec.codec_id()};
  for (auto& v : wild.values.values()) v = static_cast<float>(50.0 * rng.normal());
  const audio::MelStack out = codec.decode(wild);
  bool saturated = false;
  for (float v : out.values.values()) {
    REQUIRE(v <= peak);
    REQUIRE(v >= out.floor_value());
    saturated = saturated || v == peak;
  }
  CHECK(saturated);

  LatentCodec restored(c, mel_with_bins(16), 3);
  restored.restore(codec.input_shift(), codec.input_scale(), codec.latent_scale(), peak + 1.0, true);
  CHECK(restored.codec_id() != codec.codec_id());
}

TEST_CASE("loss terms vanish at their trivial optima") {
  const LatentCodecConfig c = small_codec(8, 8);
  VaeNet<double> net(c, 6);
  set_param(net, "enc.out.weight", 0.0);
  set_param(net, "enc.out.bias", 0.0);
  set_param(net, "dec.out.weight", 0.0);
  set_param(net, "dec.out.bias", 0.0);
  Rng rng(6);
  const Tensord eps = rng.normal_tensor<double>({2, 3, 1, 2, 2});
  const auto zero_input = ag::Var<double>(Tensord({2, 1, 1, 8, 8}));
  const auto l = net.losses(zero_input, eps);
  CHECK(l.kl.value()[0] == 0.0);
  CHECK(l.reconstruction.value()[0] == 0.0);

  const auto random_input = ag::Var<double>(rng.normal_tensor<double>({2, 1, 1, 8, 8}));
  VaeNet<double> live(c, 7);
  CHECK(live.losses(random_input, eps).kl.value()[0] >= 0.0);
}

TEST_CASE("codec loss gradients match finite differences") {
  LatentCodecConfig c = small_codec(8, 8);
  c.widths = {4, 8, 8};
  VaeNet<double> net(c, 8);
  Rng rng(8);
  const auto x = ag::Var<double>(rng.normal_tensor<double>({2, 1, 1, 8, 8}));
  const Tensord eps = rng.normal_tensor<double>({2, 3, 1, 2, 2});
  auto params = net.parameters();
  std::vector<ag::Var<double>*> vars;
  for (auto& p : params) vars.push_back(p.var);

  const auto recon = testing::grad_check(vars, [&] { return net.losses(x, eps).reconstruction; }, 100, rng);
  MESSAGE("reconstruction: " << recon.checked << " parameters, max relative error " << recon.max_rel_error);
  CHECK(recon.checked == 100);
  CHECK(recon.max_rel_error <= 1e-3);

  // the KL term depends on encoder parameters only
  std::vector<ag::Var<double>*> enc;
  for (auto& p : params) {
    if (p.name.rfind("enc.", 0) == 0) enc.push_back(p.var);
  }
  const auto kl = testing::grad_check(enc, [&] { return net.losses(x, eps).kl; }, 100, rng);
  MESSAGE("kl: " << kl.checked << " parameters, max relative error " << kl.max_rel_error);
  CHECK(kl.checked == 100);
  CHECK(kl.max_rel_error <= 1e-3);
}

TEST_CASE("training on toy clips halves the reconstruction loss within 200 steps") {
  audio::ToyCorpusSpec spec;
  spec.n_examples = 64;
  spec.seed = 11;
  audio::MelConfig mel;
  mel.mel_bins = 32;
  std::vector<Tensorf> planes;
  for (int i = 0; i < spec.n_examples; ++i) {
    const auto m = audio::mel_forward(audio::synth_toy_example(spec, i), mel);
    for (int s = 0; s < 4; ++s) planes.push_back(m.values.slice0(s));
  }
  const Tensorf all = stack(planes);

  LatentCodecConfig c;
  c.latent_channels = 4;
  c.widths = {8, 16, 32};
  c.frames = 256;
  c.mel_bins = 32;
  c.learning_rate = 1e-3;
  LatentCodec codec(c, mel, 12);
  codec.fit_normalization(all);
  Rng rng(12);
  std::vector<double> recon;
  for (int step = 0; step < 200; ++step) {
    std::vector<Tensorf> batch;
    for (int k = 0; k < c.batch_size; ++k) batch.push_back(planes[rng.uniform_int(0, static_cast<int>(planes.size()) - 1)]);
    const auto l = codec.train_step(stack(batch), rng);
    REQUIRE(l.kl >= 0.0);
    recon.push_back(l.reconstruction);
  }
  double tail = 0;
  for (int k = 190; k < 200; ++k) tail += recon[k] / 10;
  MESSAGE("reconstruction loss " << recon.front() << " -> " << tail);
  CHECK(tail <= 0.5 * recon.front());
}
