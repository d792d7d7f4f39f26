#include "stemdiff/diffusion/sampler.hpp"

#include <algorithm>
#include <cmath>

namespace stemdiff::diffusion {

namespace {

enum Stream : std::uint64_t { kInitialNoise = 11, kReplacementNoise = 12 };

template <typename T>
void require_finite(const Tensor<T>& t, const char* what, int step) {
  if (!t.all_finite()) throw NumericError(std::string(what) + " became non-finite at diffusion step " + std::to_string(step));
}

/// Overwrites slabs z[b, s, ...] with a_n * known + b_n * fresh noise for each given s.
template <typename T>
void replace_given(Tensor<T>& z, const Tensor<T>& known, const std::vector<bool>& given, int n,
                   const NoiseSchedule& schedule, Rng& rng) {
  const int B = z.dim(0);
  const int S = z.dim(1);
  const std::size_t slab = z.size() / (static_cast<std::size_t>(B) * S);
  const double a = schedule.signal(n);
  const double b = schedule.noise(n);
  for (int bi = 0; bi < B; ++bi) {
    for (int s = 0; s < S; ++s) {
      if (!given[s]) continue;
      const std::size_t base = (static_cast<std::size_t>(bi) * S + s) * slab;
      for (std::size_t i = 0; i < slab; ++i) {
        z[base + i] = n == 0 ? known[base + i] : static_cast<T>(a * known[base + i] + b * rng.normal());
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> cfg_blend(const Tensor<T>& eps_c, const Tensor<T>& eps_u, double w) {
  require_same_shape(eps_c.shape(), eps_u.shape(), "cfg_blend");
  const T wc = static_cast<T>(w);
  const T wu = static_cast<T>(1.0 - w);
  Tensor<T> out(eps_c.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wc * eps_c[i] + wu * eps_u[i];
  return out;
}

template <typename T>
DdpmDraw<T> ddpm_draw(const Tensor<T>& z0, const Tensor<T>* condition, double drop_prob, const NoiseSchedule& schedule,
                      Rng& rng) {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ArgumentError("drop probability must lie in [0, 1]");
  if (z0.rank() < 1 || z0.dim(0) < 1) throw ShapeError("ddpm draw needs a batch axis");
  const int B = z0.dim(0);
  if (condition && (condition->rank() < 1 || condition->dim(0) != B)) {
    throw ShapeError("condition batch " + shape_string(condition->shape()) + " does not match latent batch " +
                     std::to_string(B));
  }
  DdpmDraw<T> d;
  d.steps.resize(B);
  for (int& n : d.steps) n = rng.uniform_int(1, schedule.steps());
  d.eps = rng.normal_tensor<T>(z0.shape());
  d.z_n = Tensor<T>(z0.shape());
  const std::size_t row = z0.size() / B;
  for (int b = 0; b < B; ++b) {
    const double a = schedule.signal(d.steps[b]);
    const double s = schedule.noise(d.steps[b]);
    for (std::size_t i = b * row; i < (b + 1) * row; ++i) d.z_n[i] = static_cast<T>(a * z0[i] + s * d.eps[i]);
  }
  d.dropped.assign(B, true);
  if (condition) {
    for (int b = 0; b < B; ++b) d.dropped[b] = rng.bernoulli(drop_prob);
  }
  d.dropped_count = static_cast<int>(std::count(d.dropped.begin(), d.dropped.end(), true));
  if (condition && d.dropped_count < B) {
    Tensor<T> c = *condition;
    const std::size_t crow = c.size() / B;
    for (int b = 0; b < B; ++b) {
      if (d.dropped[b]) std::fill_n(c.data() + b * crow, crow, T(0));
    }
    d.condition = std::move(c);
  }
  return d;
}

template <typename T>
double ddpm_loss(Denoiser<T>& denoiser, const Tensor<T>& z0, const Tensor<T>* condition, double drop_prob,
                 const NoiseSchedule& schedule, Rng& rng, DdpmDraw<T>* draw_out) {
  DdpmDraw<T> d = ddpm_draw(z0, condition, drop_prob, schedule, rng);
  const Tensor<T> pred = denoiser.predict(d.z_n, d.steps, d.condition_ptr());
  require_same_shape(pred.shape(), d.eps.shape(), "ddpm_loss prediction");
  if (!pred.all_finite()) {
    throw NumericError("denoiser returned non-finite values for steps [" + std::to_string(d.steps.front()) + ", ...] " +
                       "in a batch of " + std::to_string(d.steps.size()));
  }
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = static_cast<double>(pred[i]) - d.eps[i];
    acc += e * e;
  }
  if (draw_out) *draw_out = std::move(d);
  return acc / static_cast<double>(pred.size());
}

template <typename T>
Tensor<T> guided_prediction(Denoiser<T>& denoiser, const Tensor<T>& z, int step, const Tensor<T>* condition,
                            double w) {
  const std::vector<int> steps(z.dim(0), step);
  if (w == 0.0) return denoiser.predict(z, steps, nullptr);
  if (!condition) throw ArgumentError("guidance weight " + std::to_string(w) + " needs a condition");
  if (w == 1.0) return denoiser.predict(z, steps, condition);
  const Tensor<T> eps_c = denoiser.predict(z, steps, condition);
  const Tensor<T> eps_u = denoiser.predict(z, steps, nullptr);
  return cfg_blend(eps_c, eps_u, w);
}

template <typename T>
Tensor<T> ddim_transition(const Tensor<T>& z, const Tensor<T>& eps, int t, int s, double eta,
                          const NoiseSchedule& schedule, Rng& rng) {
  require_same_shape(z.shape(), eps.shape(), "ddim_transition");
  const double at = schedule.signal(t), bt = schedule.noise(t);
  const double as = schedule.signal(s), bs = schedule.noise(s);
  // posterior spread, expressed through signal/noise coefficients so VP and VE share it
  const double ratio = at / as;
  const double var = eta * eta * (bs * bs) / (bt * bt) * std::max(0.0, bt * bt - ratio * ratio * bs * bs);
  const double sigma = std::sqrt(var);
  const double direction = std::sqrt(std::max(0.0, bs * bs - var));
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (static_cast<double>(z[i]) - bt * eps[i]) / at;
    double v = as * x0 + direction * eps[i];
    if (sigma > 0.0) v += sigma * rng.normal();
    out[i] = static_cast<T>(v);
  }
  return out;
}

template <typename T>
Tensor<T> ddim_sample(Denoiser<T>& denoiser, const SamplerRun& run, const NoiseSchedule& schedule, const Shape& shape,
                      const Tensor<T>* condition) {
  if (run.w != 0.0 && !condition) throw ArgumentError("sampling with w = " + std::to_string(run.w) + " needs a condition");
  if (!(run.eta >= 0.0 && run.eta <= 1.0)) throw ArgumentError("eta must lie in [0, 1]");
  const std::vector<int> grid = step_grid(run.steps, schedule.steps());
  Rng rng = Rng::derive(run.seed, kInitialNoise);
  Tensor<T> z = rng.normal_tensor<T>(shape);
  if (schedule.kind() == ScheduleKind::VarianceExploding) {
    for (auto& v : z.values()) v = static_cast<T>(v * schedule.noise(schedule.steps()));
  }
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const Tensor<T> eps = guided_prediction(denoiser, z, grid[k], condition, run.w);
    require_finite(eps, "noise prediction", grid[k]);
    z = ddim_transition(z, eps, grid[k], grid[k + 1], run.eta, schedule, rng);
    require_finite(z, "sampler state", grid[k + 1]);
  }
  return z;
}

template <typename T>
Tensor<T> inpaint_sample(Denoiser<T>& denoiser, const Tensor<T>& z_known, const std::vector<bool>& given,
                         const SamplerRun& run, const NoiseSchedule& schedule) {
  if (run.w != 0.0) throw ArgumentError("inpainting runs unconditionally; got w = " + std::to_string(run.w));
  if (z_known.rank() < 2) throw ArgumentError("inpainting needs [B, S, ...] latents");
  if (static_cast<int>(given.size()) != z_known.dim(1)) {
    throw ArgumentError("track mask has " + std::to_string(given.size()) + " entries for " +
                        std::to_string(z_known.dim(1)) + " stems");
  }
  if (!z_known.all_finite()) throw ArgumentError("known latents contain non-finite values");
  const bool all_given = std::all_of(given.begin(), given.end(), [](bool g) { return g; });
  if (all_given) return z_known;
  const bool any_given = std::any_of(given.begin(), given.end(), [](bool g) { return g; });
  if (!(run.eta >= 0.0 && run.eta <= 1.0)) throw ArgumentError("eta must lie in [0, 1]");

  const std::vector<int> grid = step_grid(run.steps, schedule.steps());
  Rng rng = Rng::derive(run.seed, kInitialNoise);
  Rng fresh = Rng::derive(run.seed, kReplacementNoise);
  Tensor<T> z = rng.normal_tensor<T>(z_known.shape());
  if (schedule.kind() == ScheduleKind::VarianceExploding) {
    for (auto& v : z.values()) v = static_cast<T>(v * schedule.noise(schedule.steps()));
  }
  if (any_given) replace_given(z, z_known, given, grid.front(), schedule, fresh);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const Tensor<T> eps = guided_prediction<T>(denoiser, z, grid[k], nullptr, 0.0);
    require_finite(eps, "noise prediction", grid[k]);
    z = ddim_transition(z, eps, grid[k], grid[k + 1], run.eta, schedule, rng);
    if (any_given) replace_given(z, z_known, given, grid[k + 1], schedule, fresh);
    require_finite(z, "sampler state", grid[k + 1]);
  }
  return z;
}

#define STEMDIFF_INSTANTIATE(T)                                                                                      \
  template Tensor<T> cfg_blend(const Tensor<T>&, const Tensor<T>&, double);                                        \
  template DdpmDraw<T> ddpm_draw(const Tensor<T>&, const Tensor<T>*, double, const NoiseSchedule&, Rng&);          \
  template double ddpm_loss(Denoiser<T>&, const Tensor<T>&, const Tensor<T>*, double, const NoiseSchedule&, Rng&,  \
                            DdpmDraw<T>*);                                                                           \
  template Tensor<T> guided_prediction(Denoiser<T>&, const Tensor<T>&, int, const Tensor<T>*, double);             \
  template Tensor<T> ddim_transition(const Tensor<T>&, const Tensor<T>&, int, int, double, const NoiseSchedule&,   \
                                     Rng&);                                                                          \
  template Tensor<T> ddim_sample(Denoiser<T>&, const SamplerRun&, const NoiseSchedule&, const Shape&,              \
                                 const Tensor<T>*);                                                                  \
  template Tensor<T> inpaint_sample(Denoiser<T>&, const Tensor<T>&, const std::vector<bool>&, const SamplerRun&,   \
                                    const NoiseSchedule&);

STEMDIFF_INSTANTIATE(float)
STEMDIFF_INSTANTIATE(double)

}  // namespace stemdiff::diffusion
