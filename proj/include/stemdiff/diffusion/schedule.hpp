#pragma once

#include <string>
#include <vector>

#include "stemdiff/core/tensor.hpp"

namespace stemdiff::diffusion {

enum class ScheduleKind { VariancePreserving, VarianceExploding };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::VariancePreserving;
  int steps = 1000;  // N
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  double sigma_max = 1.0;  // VE: sigma_n = sigma_max * n / N
};

/// Immutable coefficient tables indexed by step n in [0, N].
/// Every kind is expressed as z_n = signal(n) * z_0 + noise(n) * eps.
class NoiseSchedule {
 public:
  ScheduleKind kind() const { return kind_; }
  int steps() const { return steps_; }
  double beta(int n) const { return beta_.at(n); }
  double alpha_bar(int n) const { return alpha_bar_.at(n); }
  double sigma(int n) const { return sigma_.at(n); }
  double signal(int n) const { return signal_.at(n); }
  double noise(int n) const { return noise_.at(n); }
  const ScheduleParams& params() const { return params_; }

 private:
  friend NoiseSchedule build_schedule(const ScheduleParams& params);
  NoiseSchedule() = default;

  ScheduleKind kind_ = ScheduleKind::VariancePreserving;
  int steps_ = 0;
  ScheduleParams params_;
  std::vector<double> beta_, alpha_bar_, sigma_, signal_, noise_;
};

/// Throws ConfigError on N < 1, betas outside (0, 1), beta_start > beta_end,
/// or a non-positive sigma_max.
NoiseSchedule build_schedule(const ScheduleParams& params);

/// Closed-form marginal sample z_n. Pure; throws ArgumentError for n outside [0, N].
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int n, const Tensor<T>& eps, const NoiseSchedule& schedule);

/// Evenly spaced decreasing visit order round(k N / steps), k = steps..1, followed by 0.
std::vector<int> step_grid(int steps, int total_steps);

}  // namespace stemdiff::diffusion
