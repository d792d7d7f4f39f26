#include "stemdiff/codec/vae.hpp"

#include <algorithm>
#include <cmath>

namespace stemdiff::codec {

namespace {

constexpr ag::Triple kKernel{1, 3, 3};
constexpr ag::Triple kPad{0, 1, 1};
constexpr ag::Triple kUnit{1, 1, 1};
constexpr ag::Triple kHalve{1, 2, 2};

enum Stream : std::uint64_t { kSampleNoise = 21, kTrainNoise = 22 };

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void LatentCodecConfig::validate() const {
  const int r = compression_ratio;
  if (r < 1 || (r & (r - 1))) throw ConfigError("compression ratio " + std::to_string(r) + " is not a power of two");
  int expected = 1;
  for (int k = r; k > 1; k >>= 1) ++expected;
  if (levels() != expected) {
    throw ConfigError("codec needs " + std::to_string(expected) + " widths for r = " + std::to_string(r) + ", got " +
                      std::to_string(levels()));
  }
  for (int w : widths) {
    if (w < 1) throw ConfigError("codec widths must be positive");
  }
  if (latent_channels < 1) throw ConfigError("latent channels must be positive");
  if (frames % r || mel_bins % r || frames < r || mel_bins < r) {
    throw ConfigError("Mel plane " + std::to_string(frames) + " x " + std::to_string(mel_bins) +
                      " is not divisible by r = " + std::to_string(r));
  }
  if (!(kl_weight >= 0.0)) throw ConfigError("kl weight must be non-negative");
  if (!(learning_rate > 0.0)) throw ConfigError("codec learning rate must be positive");
  if (batch_size < 1 || epochs < 0 || max_steps < 0) {
    throw ConfigError("codec batch size, epochs and step budget must be positive");
  }
}

template <typename T>
VaeNet<T>::VaeNet(const LatentCodecConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = Rng::derive(seed, 0x766165);
  const auto& w = config_.widths;
  const int levels = config_.levels();
  const int C = config_.latent_channels;
  enc_in_ = nn::Conv3d<T>(1, w[0], kKernel, kUnit, kPad, rng);
  for (int l = 0; l < levels; ++l) {
    enc_blocks_.emplace_back(w[l], w[l], 0, kKernel, kPad, rng);
    if (l + 1 < levels) down_.emplace_back(w[l], w[l + 1], kKernel, kHalve, kPad, rng);
  }
  enc_norm_ = nn::GroupNorm<T>(w.back());
  enc_out_ = nn::Conv3d<T>(w.back(), 2 * C, kKernel, kUnit, kPad, rng);

  dec_in_ = nn::Conv3d<T>(C, w.back(), kKernel, kUnit, kPad, rng);
  for (int l = levels - 1; l >= 0; --l) {
    dec_blocks_.emplace_back(w[l], w[l], 0, kKernel, kPad, rng);
    if (l > 0) up_.emplace_back(w[l], w[l - 1], kKernel, kUnit, kPad, rng);
  }
  dec_norm_ = nn::GroupNorm<T>(w[0]);
  dec_out_ = nn::Conv3d<T>(w[0], 1, kKernel, kUnit, kPad, rng);
}

template <typename T>
typename VaeNet<T>::Posterior VaeNet<T>::encode(const ag::Var<T>& x) const {
  const nn::ForwardContext ctx;
  ag::Var<T> h = enc_in_(x);
  for (std::size_t l = 0; l < enc_blocks_.size(); ++l) {
    h = enc_blocks_[l](h, nullptr, ctx);
    if (l < down_.size()) h = down_[l](h);
  }
  h = enc_out_(ag::silu(enc_norm_(h)));
  const int C = config_.latent_channels;
  return {ag::slice_channels(h, 0, C), ag::slice_channels(h, C, C)};
}

template <typename T>
ag::Var<T> VaeNet<T>::decode(const ag::Var<T>& z) const {
  const nn::ForwardContext ctx;
  ag::Var<T> h = dec_in_(z);
  for (std::size_t k = 0; k < dec_blocks_.size(); ++k) {
    h = dec_blocks_[k](h, nullptr, ctx);
    if (k < up_.size()) h = up_[k](ag::upsample_nearest(h, kHalve));
  }
  return dec_out_(ag::silu(dec_norm_(h)));
}

template <typename T>
typename VaeNet<T>::Losses VaeNet<T>::losses(const ag::Var<T>& x, const Tensor<T>& eps) const {
  const Posterior post = encode(x);
  require_same_shape(post.mean.shape(), eps.shape(), "VAE reparameterisation noise");
  const ag::Var<T> z =
      ag::add(post.mean, ag::mul(ag::exp(ag::scale(post.log_variance, T(0.5))), ag::Var<T>(eps)));
  return {ag::mse(decode(z), x), ag::gaussian_kl(post.mean, post.log_variance)};
}

template <typename T>
nn::ParamList<T> VaeNet<T>::parameters() {
  nn::ParamList<T> out;
  enc_in_.collect("enc.in", out);
  for (std::size_t l = 0; l < enc_blocks_.size(); ++l) {
    enc_blocks_[l].collect("enc.block" + std::to_string(l), out);
    if (l < down_.size()) down_[l].collect("enc.down" + std::to_string(l), out);
  }
  enc_norm_.collect("enc.norm", out);
  enc_out_.collect("enc.out", out);
  dec_in_.collect("dec.in", out);
  for (std::size_t k = 0; k < dec_blocks_.size(); ++k) {
    dec_blocks_[k].collect("dec.block" + std::to_string(k), out);
    if (k < up_.size()) up_[k].collect("dec.up" + std::to_string(k), out);
  }
  dec_norm_.collect("dec.norm", out);
  dec_out_.collect("dec.out", out);
  return out;
}

template class VaeNet<float>;
template class VaeNet<double>;

LatentCodec::LatentCodec(const LatentCodecConfig& config, const audio::MelConfig& mel, std::uint64_t seed)
    : config_(config), mel_(mel), net_(config, seed) {
  mel_.validate();
  if (mel_.mel_bins != config_.mel_bins) {
    throw ConfigError("codec expects " + std::to_string(config_.mel_bins) + " Mel bins, Mel config has " +
                      std::to_string(mel_.mel_bins));
  }
  nn::Adam<float>::Options opt;
  opt.learning_rate = config_.learning_rate;
  opt.grad_clip = 1.0;
  optimizer_ = nn::Adam<float>(opt);
}

void LatentCodec::fit_normalization(const Tensorf& planes) {
  if (planes.empty()) throw ArgumentError("cannot fit normalisation on an empty set");
  double sum = 0, sq = 0;
  float peak = planes[0];
  for (float v : planes.values()) {
    peak = std::max(peak, v);
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(planes.size());
  shift_ = sum / n;
  scale_ = std::sqrt(std::max(sq / n - shift_ * shift_, 1e-12));
  ceiling_ = peak;
  trained_ = false;
}

Tensorf LatentCodec::normalize(const Tensorf& planes) const {
  if (planes.rank() != 3) throw ShapeError("expected [B, T, F] planes, got " + shape_string(planes.shape()));
  const int r = config_.compression_ratio;
  if (planes.dim(1) % r || planes.dim(2) % r) {
    throw ShapeError("Mel plane " + shape_string(planes.shape()) + " is not divisible by r = " + std::to_string(r));
  }
  if (planes.dim(2) != config_.mel_bins) {
    throw ShapeError("codec expects " + std::to_string(config_.mel_bins) + " Mel bins, got " +
                     std::to_string(planes.dim(2)));
  }
  Tensorf x({planes.dim(0), 1, 1, planes.dim(1), planes.dim(2)});
  const float s = static_cast<float>(shift_);
  const float inv = static_cast<float>(1.0 / scale_);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (planes[i] - s) * inv;
  return x;
}

LatentCodec::Losses LatentCodec::train_step(const Tensorf& planes, Rng& rng) {
  const Tensorf x = normalize(planes);
  Shape zshape = config_.latent_shape();
  zshape[1] = x.dim(3) / config_.compression_ratio;
  zshape[2] = x.dim(4) / config_.compression_ratio;
  const Tensorf eps = rng.normal_tensor<float>({x.dim(0), zshape[0], 1, zshape[1], zshape[2]});
  auto params = net_.parameters();
  nn::zero_grad(params);
  const auto l = net_.losses(ag::Var<float>(x), eps);
  const double recon = l.reconstruction.value()[0];
  const double kl = l.kl.value()[0];
  if (!std::isfinite(recon) || !std::isfinite(kl)) {
    throw TrainingDivergence("codec loss became non-finite (reconstruction " + std::to_string(recon) + ", kl " +
                                 std::to_string(kl) + ")",
                             optimizer_.steps() + 1);
  }
  const auto total = ag::add(l.reconstruction, ag::scale(l.kl, static_cast<float>(config_.kl_weight)));
  ag::backward(total);
  optimizer_.step(params);
  trained_ = false;
  return {recon, kl};
}

void LatentCodec::calibrate_latent_scale(const Tensorf& planes) {
  ag::NoGradGuard guard;
  const auto post = net_.encode(ag::Var<float>(normalize(planes)));
  double sq = 0;
  for (float v : post.mean.value().values()) sq += static_cast<double>(v) * v;
  latent_scale_ = std::sqrt(std::max(sq / post.mean.value().size(), 1e-12));
}

void LatentCodec::finalize() {
  trained_ = true;
  std::uint64_t h = fnv1a(&config_.latent_channels, sizeof(int));
  h = fnv1a(&config_.compression_ratio, sizeof(int), h);
  for (const auto& p : net_.parameters()) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.var->value().data(), p.var->value().size() * sizeof(float), h);
  }
  const double consts[] = {shift_, scale_, latent_scale_, ceiling_};
  id_ = fnv1a(consts, sizeof consts, h);
}

std::uint64_t LatentCodec::codec_id() const {
  require_trained();
  return id_;
}

void LatentCodec::restore(double shift, double scale, double latent_scale, double ceiling, bool trained) {
  shift_ = shift;
  scale_ = scale;
  latent_scale_ = latent_scale;
  ceiling_ = ceiling;
  trained_ = false;
  if (trained) finalize();
}

void LatentCodec::require_trained() const {
  if (!trained_) throw StateError("latent codec has not been trained or finalised");
}

Tensorf LatentCodec::stems_to_planes(const audio::MelStack& mel) const {
  if (mel.values.rank() != 3) throw ShapeError("Mel stack must be [S, T, F], got " + shape_string(mel.values.shape()));
  return mel.values;
}

PosteriorParams LatentCodec::posterior(const audio::MelStack& mel) const {
  require_trained();
  ag::NoGradGuard guard;
  const Tensorf x = normalize(stems_to_planes(mel));
  const auto post = net_.encode(ag::Var<float>(x));
  const int S = x.dim(0);
  const Shape shape{S, config_.latent_channels, x.dim(3) / config_.compression_ratio,
                    x.dim(4) / config_.compression_ratio};
  return {post.mean.value().reshaped(shape), post.log_variance.value().reshaped(shape)};
}

LatentStack LatentCodec::encode(const audio::MelStack& mel, EncodeMode mode, Rng* rng) const {
  PosteriorParams post = posterior(mel);
  Tensorf z = std::move(post.mean);
  if (mode == EncodeMode::Sample) {
    if (!rng) throw ArgumentError("sample-mode encoding needs a random generator");
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(0.5f * post.log_variance[i]) * static_cast<float>(rng->normal());
  }
  const float inv = static_cast<float>(1.0 / latent_scale_);
  for (auto& v : z.values()) v *= inv;
  return {std::move(z), id_};
}

audio::MelStack LatentCodec::decode(const LatentStack& latent) const {
  require_trained();
  if (latent.codec_id != id_) {
    throw StateError("latent was produced by codec " + std::to_string(latent.codec_id) + ", loaded codec is " +
                     std::to_string(id_));
  }
  const Tensorf& v = latent.values;
  if (v.rank() != 4 || v.dim(1) != config_.latent_channels) {
    throw ShapeError("latent " + shape_string(v.shape()) + " does not have " + std::to_string(config_.latent_channels) +
                     " channels");
  }
  ag::NoGradGuard guard;
  Tensorf z = v.reshaped({v.dim(0), v.dim(1), 1, v.dim(2), v.dim(3)});
  const float ls = static_cast<float>(latent_scale_);
  for (auto& x : z.values()) x *= ls;
  const Tensorf y = net_.decode(ag::Var<float>(std::move(z))).value();
  const int S = v.dim(0), T = y.dim(3), F = y.dim(4);
  audio::MelStack out{Tensorf({S, T, F}), mel_};
  const float floor = out.floor_value();
  const double ceiling = std::max<double>(ceiling_, floor);
  for (std::size_t i = 0; i < y.size(); ++i) {
    out.values[i] = static_cast<float>(std::clamp(y[i] * scale_ + shift_, double(floor), ceiling));
  }
  return out;
}

}  // namespace stemdiff::codec
