#include "stemdiff/unet/unet3d.hpp"

#include <algorithm>
#include <string>

#include "stemdiff/unet/conditioning.hpp"

namespace stemdiff::unet {

namespace {

constexpr ag::Triple kKernel{3, 3, 3};
constexpr ag::Triple kPad{1, 1, 1};
constexpr ag::Triple kUnit{1, 1, 1};
constexpr ag::Triple kHalve{1, 2, 2};

}  // namespace

bool UNetConfig::has_attention(int level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

Shape UNetConfig::level_spatial(int level) const {
  return {latent_channels, frames >> level, bins >> level};
}

void UNetConfig::validate() const {
  if (stems < 1 || latent_channels < 1 || frames < 1 || bins < 1) {
    throw ConfigError("U-Net latent geometry " + shape_string(latent_shape()) + " is invalid");
  }
  if (widths.empty()) throw ConfigError("U-Net width schedule is empty");
  for (int w : widths) {
    if (w < 1) throw ConfigError("U-Net widths must be positive");
  }
  const int scale = 1 << (levels() - 1);
  if (frames % scale || bins % scale) {
    throw ConfigError("latent " + std::to_string(frames) + " x " + std::to_string(bins) + " is not divisible by " +
                      std::to_string(scale) + " for " + std::to_string(levels()) + " levels");
  }
  for (int l : attention_levels) {
    if (l < 0 || l >= levels()) throw ConfigError("attention level " + std::to_string(l) + " does not exist");
  }
  if (res_blocks < 1) throw ConfigError("need at least one residual block per level");
  if (time_embed_dim <= 0 || time_embed_dim % 2) throw ConfigError("timestep embedding dimension must be even");
  if (total_steps < 1) throw ConfigError("total diffusion steps must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

template <typename T>
struct UNet3d<T>::Layers {
  nn::Linear<T> time1, time2;
  nn::Conv3d<T> in_conv;
  std::vector<std::vector<nn::ResBlock<T>>> enc_blocks, dec_blocks;
  std::vector<nn::SelfAttention<T>> enc_attn, dec_attn;
  std::vector<nn::Conv3d<T>> down, up;
  nn::ResBlock<T> mid;
  nn::SelfAttention<T> mid_attn;
  nn::GroupNorm<T> out_norm;
  nn::Conv3d<T> out_conv;
};

template <typename T>
UNet3d<T>::UNet3d(const UNetConfig& config, std::uint64_t seed) : config_(config), layers_(std::make_unique<Layers>()) {
  config_.validate();
  Rng rng = Rng::derive(seed, 0x756e6574);
  auto& L = *layers_;
  const auto& w = config_.widths;
  const int levels = config_.levels();
  const int temb = 4 * w[0];
  L.time1 = nn::Linear<T>(config_.time_embed_dim, temb, rng);
  L.time2 = nn::Linear<T>(temb, temb, rng);
  L.in_conv = nn::Conv3d<T>(config_.stems, w[0], kKernel, kUnit, kPad, rng);

  int ch = w[0];
  L.enc_blocks.resize(levels);
  L.enc_attn.resize(levels);
  L.down.resize(levels);
  for (int l = 0; l < levels; ++l) {
    for (int r = 0; r < config_.res_blocks; ++r) {
      L.enc_blocks[l].emplace_back(ch, w[l], temb, kKernel, kPad, rng);
      ch = w[l];
    }
    if (config_.has_attention(l)) L.enc_attn[l] = nn::SelfAttention<T>(ch, rng);
    if (l + 1 < levels) L.down[l] = nn::Conv3d<T>(ch, ch, kKernel, kHalve, kPad, rng);
  }
  L.mid = nn::ResBlock<T>(ch, ch, temb, kKernel, kPad, rng);
  if (config_.has_attention(levels - 1)) L.mid_attn = nn::SelfAttention<T>(ch, rng);

  L.dec_blocks.resize(levels);
  L.dec_attn.resize(levels);
  L.up.resize(levels);
  for (int l = levels - 1; l >= 0; --l) {
    for (int r = 0; r < config_.res_blocks; ++r) {
      const int in = r == 0 ? ch + w[l] : w[l];
      L.dec_blocks[l].emplace_back(in, w[l], temb, kKernel, kPad, rng);
    }
    ch = w[l];
    if (config_.has_attention(l)) L.dec_attn[l] = nn::SelfAttention<T>(ch, rng);
    if (l > 0) {
      L.up[l] = nn::Conv3d<T>(ch, w[l - 1], kKernel, kUnit, kPad, rng);
      ch = w[l - 1];
    }
  }
  L.out_norm = nn::GroupNorm<T>(ch);
  L.out_conv = nn::Conv3d<T>(ch, config_.stems, kKernel, kUnit, kPad, rng, /*zero_init=*/true);
}

template <typename T>
UNet3d<T>::~UNet3d() = default;
template <typename T>
UNet3d<T>::UNet3d(UNet3d&&) noexcept = default;
template <typename T>
UNet3d<T>& UNet3d<T>::operator=(UNet3d&&) noexcept = default;

template <typename T>
ag::Var<T> UNet3d<T>::forward(const ag::Var<T>& z, const std::vector<int>& steps, const Tensor<T>* condition,
                              const nn::ForwardContext& ctx) const {
  const auto& L = *layers_;
  Shape expected = config_.latent_shape();
  if (z.shape().size() != 5 || !std::equal(expected.begin(), expected.end(), z.shape().begin() + 1)) {
    throw ShapeError("denoiser expects [B, " + shape_string(expected) + "], got " + shape_string(z.shape()));
  }
  const int B = z.shape()[0];
  if (static_cast<int>(steps.size()) != B) throw ShapeError("one diffusion step per batch row is required");
  if (condition) {
    Shape cshape = config_.condition_shape();
    cshape.insert(cshape.begin(), B);
    require_same_shape(condition->shape(), cshape, "denoiser condition");
  }

  const int E = config_.time_embed_dim;
  Tensor<T> raw({B, E});
  for (int b = 0; b < B; ++b) {
    const auto e = timestep_embed(steps[b], E, config_.total_steps);
    std::transform(e.begin(), e.end(), raw.data() + static_cast<std::size_t>(b) * E,
                   [](double v) { return static_cast<T>(v); });
  }
  const ag::Var<T> temb = L.time2(ag::silu(L.time1(ag::Var<T>(std::move(raw)))));

  auto inject = [&](const ag::Var<T>& h, int level, bool decoder) {
    const int width = h.shape()[1];
    const Shape spatial = config_.level_spatial(level);
    if (!condition) {
      if (observer_) observer_(InjectionEvent<T>{level, decoder, Tensor<T>(h.shape())});
      return h;
    }
    Shape mshape{B, width};
    mshape.insert(mshape.end(), spatial.begin(), spatial.end());
    Tensor<T> map(mshape);
    const Shape volume{1, config_.latent_channels, config_.frames, config_.bins};
    for (int b = 0; b < B; ++b) map.set_slice0(b, inject_condition(condition->slice0(b).reshaped(volume), width, spatial));
    if (observer_) observer_(InjectionEvent<T>{level, decoder, map});
    return ag::add(h, ag::Var<T>(std::move(map)));
  };

  const int levels = config_.levels();
  std::vector<ag::Var<T>> skips(levels);
  ag::Var<T> h = L.in_conv(z);
  for (int l = 0; l < levels; ++l) {
    h = inject(h, l, false);
    for (const auto& block : L.enc_blocks[l]) h = block(h, &temb, ctx);
    if (config_.has_attention(l)) h = L.enc_attn[l](h);
    skips[l] = h;
    if (l + 1 < levels) h = L.down[l](h);
  }
  h = L.mid(h, &temb, ctx);
  if (config_.has_attention(levels - 1)) h = L.mid_attn(h);
  for (int l = levels - 1; l >= 0; --l) {
    h = inject(h, l, true);
    h = ag::concat_channels(h, skips[l]);
    for (const auto& block : L.dec_blocks[l]) h = block(h, &temb, ctx);
    if (config_.has_attention(l)) h = L.dec_attn[l](h);
    if (l > 0) h = L.up[l](ag::upsample_nearest(h, kHalve));
  }
  return L.out_conv(ag::silu(L.out_norm(h)));
}

template <typename T>
Tensor<T> UNet3d<T>::predict(const Tensor<T>& z, const std::vector<int>& steps, const Tensor<T>* condition) {
  ag::NoGradGuard guard;
  return forward(ag::Var<T>(z), steps, condition, nn::ForwardContext{}).value();
}

template <typename T>
nn::ParamList<T> UNet3d<T>::parameters() {
  auto& L = *layers_;
  nn::ParamList<T> out;
  L.time1.collect("time.0", out);
  L.time2.collect("time.1", out);
  L.in_conv.collect("in", out);
  const int levels = config_.levels();
  for (int l = 0; l < levels; ++l) {
    const std::string p = "enc." + std::to_string(l);
    for (std::size_t r = 0; r < L.enc_blocks[l].size(); ++r) L.enc_blocks[l][r].collect(p + ".block" + std::to_string(r), out);
    if (config_.has_attention(l)) L.enc_attn[l].collect(p + ".attn", out);
    if (l + 1 < levels) L.down[l].collect(p + ".down", out);
  }
  L.mid.collect("mid.block", out);
  if (config_.has_attention(levels - 1)) L.mid_attn.collect("mid.attn", out);
  for (int l = levels - 1; l >= 0; --l) {
    const std::string p = "dec." + std::to_string(l);
    for (std::size_t r = 0; r < L.dec_blocks[l].size(); ++r) L.dec_blocks[l][r].collect(p + ".block" + std::to_string(r), out);
    if (config_.has_attention(l)) L.dec_attn[l].collect(p + ".attn", out);
    if (l > 0) L.up[l].collect(p + ".up", out);
  }
  L.out_norm.collect("out.norm", out);
  L.out_conv.collect("out.conv", out);
  return out;
}

template class UNet3d<float>;
template class UNet3d<double>;

}  // namespace stemdiff::unet
