#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "stemdiff/core/nn.hpp"
#include "stemdiff/diffusion/sampler.hpp"

namespace stemdiff::unet {

struct UNetConfig {
  int stems = 4;            // S, the convolution channel axis
  int latent_channels = 8;  // C, convolved as a third spatial axis
  int frames = 256;         // T / r
  int bins = 16;            // F / r
  std::vector<int> widths{128, 256, 384, 640};
  std::vector<int> attention_levels{3};
  int res_blocks = 1;
  int time_embed_dim = 128;
  int total_steps = 1000;
  double dropout = 0.1;

  int levels() const { return static_cast<int>(widths.size()); }
  bool has_attention(int level) const;
  /// [S, C, T/r, F/r]
  Shape latent_shape() const { return {stems, latent_channels, frames, bins}; }
  /// [C, T/r, F/r]
  Shape condition_shape() const { return {latent_channels, frames, bins}; }
  /// Spatial extent (D, H, W) of the feature maps at a level.
  Shape level_spatial(int level) const;
  /// Throws ConfigError when the geometry cannot be built.
  void validate() const;
  bool operator==(const UNetConfig&) const = default;
};

/// Additive condition map handed to an observer at each injection site.
template <typename T>
struct InjectionEvent {
  int level;
  bool decoder;
  const Tensor<T>& map;  // [B, width, D, H, W]; all zeros for the null condition
};

/// 3D-convolutional U-Net noise predictor over [B, S, C, T/r, F/r] latents.
/// The mixture latent ([B, C, T/r, F/r]) is pooled and channel-tiled onto the
/// features at every encoder and decoder level before that level's blocks.
template <typename T>
class UNet3d : public diffusion::Denoiser<T> {
 public:
  UNet3d(const UNetConfig& config, std::uint64_t seed);
  ~UNet3d() override;
  UNet3d(UNet3d&&) noexcept;
  UNet3d& operator=(UNet3d&&) noexcept;

  ag::Var<T> forward(const ag::Var<T>& z, const std::vector<int>& steps, const Tensor<T>* condition,
                     const nn::ForwardContext& ctx) const;

  /// Evaluation-mode forward without a graph.
  Tensor<T> predict(const Tensor<T>& z, const std::vector<int>& steps, const Tensor<T>* condition) override;

  nn::ParamList<T> parameters();
  const UNetConfig& config() const { return config_; }
  void set_injection_observer(std::function<void(const InjectionEvent<T>&)> observer) {
    observer_ = std::move(observer);
  }

 private:
  struct Layers;
  UNetConfig config_;
  std::unique_ptr<Layers> layers_;
  std::function<void(const InjectionEvent<T>&)> observer_;
};

}  // namespace stemdiff::unet
