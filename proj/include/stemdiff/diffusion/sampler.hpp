#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "stemdiff/core/random.hpp"
#include "stemdiff/diffusion/schedule.hpp"

namespace stemdiff::diffusion {

/// Noise predictor eps(z_n, n, c). Batches run along axis 0.
template <typename T>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  /// z: [B, ...]; steps: one step per row; condition: [B, ...] or null for the unconditional branch.
  virtual Tensor<T> predict(const Tensor<T>& z, const std::vector<int>& steps, const Tensor<T>* condition) = 0;
};

/// w * eps_c + (1 - w) * eps_u, elementwise.
template <typename T>
Tensor<T> cfg_blend(const Tensor<T>& eps_c, const Tensor<T>& eps_u, double w);

/// Random quantities of one training draw: per-row step, noise, noised input and
/// condition dropout. Rows whose condition is dropped carry the all-zero null condition.
template <typename T>
struct DdpmDraw {
  std::vector<int> steps;
  Tensor<T> eps;
  Tensor<T> z_n;
  std::vector<bool> dropped;
  int dropped_count = 0;
  std::optional<Tensor<T>> condition;  // empty when no row keeps its condition

  const Tensor<T>* condition_ptr() const { return condition ? &*condition : nullptr; }
};

template <typename T>
DdpmDraw<T> ddpm_draw(const Tensor<T>& z0, const Tensor<T>* condition, double drop_prob, const NoiseSchedule& schedule,
                      Rng& rng);

/// Mean squared error between the drawn noise and the denoiser's prediction.
/// Throws NumericError when the prediction is not finite.
template <typename T>
double ddpm_loss(Denoiser<T>& denoiser, const Tensor<T>& z0, const Tensor<T>* condition, double drop_prob,
                 const NoiseSchedule& schedule, Rng& rng, DdpmDraw<T>* draw_out = nullptr);

struct SamplerRun {
  int steps = 200;
  double eta = 0.0;
  std::uint64_t seed = 0;
  double w = 0.0;
};

/// eps prediction under guidance weight w. One denoiser call when w is 0 or 1, two otherwise.
template <typename T>
Tensor<T> guided_prediction(Denoiser<T>& denoiser, const Tensor<T>& z, int step, const Tensor<T>* condition,
                            double w);

/// One DDIM transition from step t to s < t, given the noise estimate at t.
/// `rng` is drawn from only when the transition is stochastic (eta > 0, s > 0).
template <typename T>
Tensor<T> ddim_transition(const Tensor<T>& z, const Tensor<T>& eps, int t, int s, double eta,
                          const NoiseSchedule& schedule, Rng& rng);

/// Starts from standard normal noise seeded by run.seed and walks the step grid.
/// shape includes the batch axis; condition is [B, ...] and required when w != 0.
template <typename T>
Tensor<T> ddim_sample(Denoiser<T>& denoiser, const SamplerRun& run, const NoiseSchedule& schedule, const Shape& shape,
                      const Tensor<T>* condition = nullptr);

/// Replacement inpainting over axis 1 of z_known ([B, S, ...]). After each
/// transition to step s, rows with given[s] set are overwritten by a fresh
/// forward-diffused copy of z_known at s, so they end exactly at z_known.
/// Requires an unconditional run (w = 0).
template <typename T>
Tensor<T> inpaint_sample(Denoiser<T>& denoiser, const Tensor<T>& z_known, const std::vector<bool>& given,
                         const SamplerRun& run, const NoiseSchedule& schedule);

}  // namespace stemdiff::diffusion
