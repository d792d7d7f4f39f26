#include "stemdiff/diffusion/schedule.hpp"

#include <cmath>

namespace stemdiff::diffusion {

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::VariancePreserving ? "vp_linear" : "ve_linear";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "vp_linear" || name == "vp") return ScheduleKind::VariancePreserving;
  if (name == "ve_linear" || name == "ve") return ScheduleKind::VarianceExploding;
  throw ConfigError("unknown schedule kind '" + name + "'");
}

NoiseSchedule build_schedule(const ScheduleParams& params) {
  const int N = params.steps;
  if (N < 1) throw ConfigError("schedule needs N >= 1, got " + std::to_string(N));
  NoiseSchedule s;
  s.kind_ = params.kind;
  s.steps_ = N;
  s.params_ = params;
  s.beta_.assign(N + 1, 0.0);
  s.alpha_bar_.assign(N + 1, 1.0);
  s.sigma_.assign(N + 1, 0.0);
  s.signal_.assign(N + 1, 1.0);
  s.noise_.assign(N + 1, 0.0);

  if (params.kind == ScheduleKind::VariancePreserving) {
    if (!(params.beta_start > 0.0) || !(params.beta_end < 1.0) || params.beta_start > params.beta_end) {
      throw ConfigError("VP schedule needs 0 < beta_start <= beta_end < 1");
    }
    for (int n = 1; n <= N; ++n) {
      const double frac = N == 1 ? 0.0 : static_cast<double>(n - 1) / (N - 1);
      s.beta_[n] = params.beta_start + (params.beta_end - params.beta_start) * frac;
      s.alpha_bar_[n] = s.alpha_bar_[n - 1] * (1.0 - s.beta_[n]);
      s.signal_[n] = std::sqrt(s.alpha_bar_[n]);
      s.noise_[n] = std::sqrt(1.0 - s.alpha_bar_[n]);
      s.sigma_[n] = s.noise_[n] / s.signal_[n];
    }
    for (int n = 1; n <= N; ++n) {
      if (!(s.alpha_bar_[n] < s.alpha_bar_[n - 1])) throw ConfigError("alpha_bar is not strictly decreasing");
    }
  } else {
    if (!(params.sigma_max > 0.0)) throw ConfigError("VE schedule needs sigma_max > 0");
    for (int n = 1; n <= N; ++n) {
      s.sigma_[n] = params.sigma_max * n / N;
      s.noise_[n] = s.sigma_[n];
    }
  }
  return s;
}

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int n, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  if (n < 0 || n > schedule.steps()) {
    throw ArgumentError("diffusion step " + std::to_string(n) + " outside [0, " + std::to_string(schedule.steps()) +
                        "]");
  }
  require_same_shape(z0.shape(), eps.shape(), "forward_diffuse");
  if (n == 0) return z0;
  const double a = schedule.signal(n);
  const double b = schedule.noise(n);
  Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * z0[i] + b * eps[i]);
  return out;
}

std::vector<int> step_grid(int steps, int total_steps) {
  if (steps < 1 || steps > total_steps) {
    throw ArgumentError("inference steps " + std::to_string(steps) + " must be in [1, " +
                        std::to_string(total_steps) + "]");
  }
  std::vector<int> grid;
  grid.reserve(steps + 1);
  for (int k = steps; k >= 1; --k) {
    grid.push_back(static_cast<int>(std::lround(static_cast<double>(k) * total_steps / steps)));
  }
  grid.push_back(0);
  return grid;
}

template Tensor<float> forward_diffuse(const Tensor<float>&, int, const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> forward_diffuse(const Tensor<double>&, int, const Tensor<double>&, const NoiseSchedule&);

}  // namespace stemdiff::diffusion
