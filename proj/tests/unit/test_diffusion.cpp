#include <cmath>
#include <limits>

#include "doctest.h"
#include "oracles.hpp"

using namespace stemdiff;
using namespace stemdiff::diffusion;
using stemdiff::testing::BivariateOracle;
using stemdiff::testing::GaussianOracle;

namespace {

NoiseSchedule vp_default() { return build_schedule(ScheduleParams{}); }

/// Returns the drawn noise verbatim; records what condition it was handed.
class EchoDenoiser : public Denoiser<double> {
 public:
  explicit EchoDenoiser(Tensor<double> reply) : reply_(std::move(reply)) {}
  Tensor<double> predict(const Tensor<double>&, const std::vector<int>&, const Tensor<double>* c) override {
    ++calls;
    if (c) ++conditioned_calls;
    return reply_;
  }
  int calls = 0;
  int conditioned_calls = 0;

 private:
  Tensor<double> reply_;
};

/// Linear stand-in predictor that distinguishes conditional from unconditional calls.
class CountingDenoiser : public Denoiser<double> {
 public:
  Tensor<double> predict(const Tensor<double>& z, const std::vector<int>&, const Tensor<double>* c) override {
    ++calls;
    Tensor<double> out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = 0.1 * z[i] + (c ? 0.05 * (*c)[i] : 0.0);
    return out;
  }
  int calls = 0;
};

double vp_alpha_bar(int n) {
  double p = 1;
  for (int i = 1; i <= n; ++i) p *= 1.0 - (1e-4 + (2e-2 - 1e-4) * (i - 1) / 999.0);
  return p;
}

// DDIM transition coefficients written directly in terms of alpha_bar.
struct VpStep {
  double at, as, sigma, dir;
};
VpStep vp_step(int t, int s, double eta) {
  const double at = vp_alpha_bar(t), as = vp_alpha_bar(s);
  const double var = eta * eta * (1 - as) / (1 - at) * (1 - at / as);
  return {at, as, std::sqrt(var), std::sqrt(std::max(0.0, 1 - as - var))};
}

}  // namespace

TEST_CASE("VP schedule starts at alpha_bar 1 and matches the high-precision product") {
  for (double end : {1e-3, 2e-2, 0.2}) {
    const NoiseSchedule s = build_schedule({ScheduleKind::VariancePreserving, 50, 1e-4, end});
    CHECK(s.alpha_bar(0) == 1.0);
    for (int n = 1; n <= 50; ++n) CHECK(s.alpha_bar(n) < s.alpha_bar(n - 1));
  }
  const NoiseSchedule s = vp_default();
  // cumulative products evaluated with 50-digit arithmetic
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.0358297653756833e-05).epsilon(1e-10));
  CHECK(s.alpha_bar(500) == doctest::Approx(0.078587242881778237).epsilon(1e-12));
}

TEST_CASE("VE schedule is linear in the step") {
  const NoiseSchedule s = build_schedule({ScheduleKind::VarianceExploding, 10, 0, 0, 1.0});
  CHECK(s.sigma(0) == 0.0);
  CHECK(s.sigma(5) == doctest::Approx(0.5).epsilon(1e-15));
  for (int n = 1; n <= 10; ++n) CHECK(s.sigma(n) > s.sigma(n - 1));
}

TEST_CASE("schedule parameters are validated") {
  CHECK_THROWS_AS(build_schedule({ScheduleKind::VariancePreserving, 0}), ConfigError);
  CHECK_THROWS_AS(build_schedule({ScheduleKind::VariancePreserving, 10, 0.02, 0.01}), ConfigError);
  CHECK_THROWS_AS(build_schedule({ScheduleKind::VariancePreserving, 10, 0.0, 0.01}), ConfigError);
  CHECK_THROWS_AS(build_schedule({ScheduleKind::VariancePreserving, 10, 0.1, 1.0}), ConfigError);
  CHECK_THROWS_AS(build_schedule({ScheduleKind::VarianceExploding, 10, 0, 0, 0.0}), ConfigError);
  CHECK_THROWS_AS(schedule_kind_from_string("cosine"), ConfigError);
}

TEST_CASE("forward diffusion arithmetic") {
  const Tensor<double> z0({3}, {1.0, -2.0, 0.5});
  const Tensor<double> eps({3}, {0.3, 0.1, -0.7});
  for (auto kind : {ScheduleKind::VariancePreserving, ScheduleKind::VarianceExploding}) {
    const NoiseSchedule s = build_schedule({kind, 100});
    CHECK(forward_diffuse(z0, 0, eps, s) == z0);
    CHECK_THROWS_AS(forward_diffuse(z0, 101, eps, s), ArgumentError);
    CHECK_THROWS_AS(forward_diffuse(z0, -1, eps, s), ArgumentError);
  }
  const NoiseSchedule quarter = build_schedule({ScheduleKind::VariancePreserving, 1, 0.75, 0.75});
  CHECK(quarter.alpha_bar(1) == 0.25);
  CHECK(forward_diffuse(Tensor<double>({1}, 1.0), 1, Tensor<double>({1}, 0.0), quarter)[0] == 0.5);
  const NoiseSchedule ve = build_schedule({ScheduleKind::VarianceExploding, 10, 0, 0, 2.0});
  CHECK(forward_diffuse(Tensor<double>({1}, 1.0), 5, Tensor<double>({1}, 1.0), ve)[0] == doctest::Approx(2.0));
}

TEST_CASE("forward diffusion second moments match the closed form") {
  const NoiseSchedule s = vp_default();
  Rng rng(21);
  const int draws = 100000;
  for (int trial = 0; trial < 10; ++trial) {
    const int n = rng.uniform_int(1, 1000);
    const double z0 = 0.8;
    const Tensor<double> x = forward_diffuse(Tensor<double>({draws}, z0), n, rng.normal_tensor<double>({draws}), s);
    double m2 = 0;
    for (double v : x.values()) m2 += v * v;
    m2 /= draws;
    const double expected = vp_alpha_bar(n) * z0 * z0 + (1 - vp_alpha_bar(n));
    CHECK(std::abs(m2 - expected) / expected < 0.02);

    // unit-variance data keeps unit variance
    const Tensor<double> y = forward_diffuse(rng.normal_tensor<double>({draws}), n, rng.normal_tensor<double>({draws}), s);
    double v2 = 0;
    for (double v : y.values()) v2 += v * v;
    CHECK(std::abs(v2 / draws - 1.0) < 0.02);
  }
}

TEST_CASE("step grid decreases strictly to zero") {
  for (auto [steps, total] : {std::pair{200, 1000}, {100, 1000}, {1000, 1000}, {7, 10}, {1, 5}, {3, 1000}}) {
    const auto grid = step_grid(steps, total);
    REQUIRE(grid.size() == static_cast<std::size_t>(steps + 1));
    CHECK(grid.front() == total);
    CHECK(grid.back() == 0);
    for (std::size_t k = 1; k < grid.size(); ++k) CHECK(grid[k] < grid[k - 1]);
  }
  CHECK_THROWS_AS(step_grid(1001, 1000), ArgumentError);
  CHECK_THROWS_AS(step_grid(0, 1000), ArgumentError);
}

TEST_CASE("cfg blend endpoints are exact") {
  Rng rng(22);
  for (int trial = 0; trial < 1000; ++trial) {
    const Shape shape{rng.uniform_int(1, 4), rng.uniform_int(1, 9)};
    const auto c = rng.normal_tensor<double>(shape);
    const auto u = rng.normal_tensor<double>(shape);
    REQUIRE(cfg_blend(c, u, 0.0) == u);
    REQUIRE(cfg_blend(c, u, 1.0) == c);
  }
  CHECK(cfg_blend(Tensor<double>({1}, 2.0), Tensor<double>({1}, 1.0), 2.0)[0] == 3.0);
  CHECK_THROWS_AS(cfg_blend(Tensor<double>({2}), Tensor<double>({3}), 0.5), ShapeError);
}

TEST_CASE("ddpm loss of a perfect predictor is zero") {
  const NoiseSchedule s = vp_default();
  Rng probe(23), rng(23);
  const auto z0 = Rng(1).normal_tensor<double>({4, 6});
  const auto draw = ddpm_draw<double>(z0, nullptr, 0.1, s, probe);
  EchoDenoiser perfect(draw.eps);
  CHECK(ddpm_loss<double>(perfect, z0, nullptr, 0.1, s, rng) == 0.0);
  for (int n : draw.steps) CHECK((n >= 1 && n <= 1000));
}

TEST_CASE("ddpm loss of a zero predictor is about one") {
  const NoiseSchedule s = vp_default();
  Rng rng(24);
  const auto z0 = rng.normal_tensor<double>({100000, 1});
  EchoDenoiser zero(Tensor<double>({100000, 1}));
  CHECK(std::abs(ddpm_loss<double>(zero, z0, nullptr, 0.0, s, rng) - 1.0) < 0.02);
}

TEST_CASE("condition dropout") {
  const NoiseSchedule s = vp_default();
  Rng rng(25);
  const auto z0 = rng.normal_tensor<double>({8, 3});
  const auto cond = rng.normal_tensor<double>({8, 3});
  EchoDenoiser stub(Tensor<double>({8, 3}));
  for (int i = 0; i < 50; ++i) ddpm_loss<double>(stub, z0, &cond, 1.0, s, rng);
  CHECK(stub.calls == 50);
  CHECK(stub.conditioned_calls == 0);

  EchoDenoiser keep(Tensor<double>({8, 3}));
  DdpmDraw<double> d;
  ddpm_loss<double>(keep, z0, &cond, 0.0, s, rng, &d);
  CHECK(keep.conditioned_calls == 1);
  CHECK(*d.condition == cond);

  // per-row dropout zeroes exactly the dropped rows
  int dropped = 0, rows = 0;
  for (int batch = 0; batch < 1250; ++batch) {
    const auto draw = ddpm_draw<double>(z0, &cond, 0.1, s, rng);
    dropped += draw.dropped_count;
    rows += 8;
    if (!draw.condition) continue;
    for (int b = 0; b < 8; ++b) {
      for (int k = 0; k < 3; ++k) {
        REQUIRE((*draw.condition)[b * 3 + k] == (draw.dropped[b] ? 0.0 : cond[b * 3 + k]));
      }
    }
  }
  const double frac = double(dropped) / rows;
  CHECK(frac >= 0.08);
  CHECK(frac <= 0.12);
  CHECK_THROWS_AS(ddpm_draw<double>(z0, &cond, 1.5, s, rng), ArgumentError);
}

TEST_CASE("non-finite predictions abort the loss") {
  const NoiseSchedule s = vp_default();
  Rng rng(26);
  EchoDenoiser bad(Tensor<double>({2, 2}, std::numeric_limits<double>::quiet_NaN()));
  CHECK_THROWS_AS(ddpm_loss<double>(bad, Tensor<double>({2, 2}), nullptr, 0.0, s, rng), NumericError);
}

TEST_CASE("Gaussian noise predictor agrees with a brute-force posterior") {
  const NoiseSchedule s = vp_default();
  const double mu = 0.7, sd = 0.3;
  for (int n : {1, 10, 100, 400, 1000}) {
    const double a = s.signal(n), b = s.noise(n);
    for (double z : {-1.5, 0.0, 0.4, 0.9, 2.0}) {
      // E[x0 | z] by quadrature of prior times likelihood
      double w_sum = 0, x_sum = 0;
      const int points = 200001;
      for (int i = 0; i < points; ++i) {
        const double x = mu - 10 * sd + 20 * sd * i / (points - 1);
        const double log_w = -0.5 * std::pow((x - mu) / sd, 2) - 0.5 * std::pow((z - a * x) / b, 2);
        const double w = std::exp(log_w + 0.5 * std::pow((z - a * mu) / std::sqrt(a * a * sd * sd + b * b), 2));
        w_sum += w;
        x_sum += w * x;
      }
      const double eps_brute = (z - a * x_sum / w_sum) / b;
      CHECK(GaussianOracle::eps(z, a, b, mu, sd) == doctest::Approx(eps_brute).epsilon(1e-6));
    }
  }
}

TEST_CASE("DDIM is deterministic and calls the denoiser once per branch") {
  const NoiseSchedule s = build_schedule({ScheduleKind::VariancePreserving, 100});
  const auto cond = Rng(2).normal_tensor<double>({2, 5});
  SamplerRun run{20, 0.0, 9, 0.0};
  CountingDenoiser d;
  const auto a = ddim_sample<double>(d, run, s, {2, 5});
  CHECK(d.calls == 20);
  CHECK(a == ddim_sample<double>(d, run, s, {2, 5}));
  CHECK_FALSE(a == ddim_sample<double>(d, SamplerRun{20, 0.0, 10, 0.0}, s, {2, 5}));

  d.calls = 0;
  run.w = 1.0;
  ddim_sample<double>(d, run, s, {2, 5}, &cond);
  CHECK(d.calls == 20);
  d.calls = 0;
  run.w = 2.0;
  ddim_sample<double>(d, run, s, {2, 5}, &cond);
  CHECK(d.calls == 40);
  CHECK_THROWS_AS(ddim_sample<double>(d, run, s, {2, 5}), ArgumentError);
  run.steps = 101;
  CHECK_THROWS_AS(ddim_sample<double>(d, run, s, {2, 5}, &cond), ArgumentError);
}

TEST_CASE("DDIM on Gaussian data reproduces the exactly propagated moments") {
  const NoiseSchedule s = vp_default();
  const double mu = 0.7, sd = 0.3;
  GaussianOracle oracle(s, mu, sd);
  const auto grid = step_grid(200, 1000);
  // deterministic DDIM is affine in the initial noise: z = k xi + c
  double k = 1, c = 0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const VpStep st = vp_step(grid[i], grid[i + 1], 0.0);
    const double g = std::sqrt(1 - st.at) / (st.at * sd * sd + 1 - st.at);
    const double lin = (1 - std::sqrt(1 - st.at) * g) / std::sqrt(st.at) * std::sqrt(st.as) + st.dir * g;
    const double off = g * std::sqrt(st.at) * mu * (std::sqrt(1 - st.at) * std::sqrt(st.as) / std::sqrt(st.at) - st.dir);
    k *= lin;
    c = lin * c + off;
  }
  const auto out = ddim_sample<double>(oracle, SamplerRun{200, 0.0, 31, 0.0}, s, {10000, 1});
  const auto m = testing::moments(out.storage());
  MESSAGE("DDIM moments " << m.mean << " / " << m.variance << ", propagated " << c << " / " << k * k);
  CHECK(std::abs(m.mean - c) < 4 * k / 100);
  CHECK(std::abs(m.variance / (k * k) - 1) < 4 * std::sqrt(2.0 / 10000));
  CHECK(std::abs(c - mu) < 0.01);
}

TEST_CASE("full-step stochastic DDIM matches ancestral DDPM in distribution") {
  const NoiseSchedule s = vp_default();
  const double mu = 0.7, sd = 0.3;
  GaussianOracle oracle(s, mu, sd);
  const auto ddim = ddim_sample<double>(oracle, SamplerRun{1000, 1.0, 41, 0.0}, s, {5000, 1});

  // ancestral sampler written out independently
  Rng rng(42);
  std::vector<double> ddpm(5000);
  for (double& z : ddpm) z = rng.normal();
  for (int t = 1000; t >= 1; --t) {
    const double ab = vp_alpha_bar(t), ab_prev = vp_alpha_bar(t - 1);
    const double beta = 1 - ab / ab_prev;
    const double var = t > 1 ? (1 - ab_prev) / (1 - ab) * beta : 0.0;
    for (double& z : ddpm) {
      const double e = GaussianOracle::eps(z, std::sqrt(ab), std::sqrt(1 - ab), mu, sd);
      z = (z - beta / std::sqrt(1 - ab) * e) / std::sqrt(1 - beta) + std::sqrt(var) * rng.normal();
    }
  }
  const auto ks = testing::ks_two_sample(ddim.storage(), ddpm);
  MESSAGE("KS statistic " << ks.statistic << ", p = " << ks.p_value);
  CHECK(ks.p_value > 0.01);
}

TEST_CASE("inpainting degenerate masks") {
  const NoiseSchedule s = build_schedule({ScheduleKind::VariancePreserving, 100});
  CountingDenoiser d;
  const auto known = Rng(3).normal_tensor<double>({2, 4, 3});
  SamplerRun run{25, 1.0, 5, 0.0};
  CHECK(inpaint_sample<double>(d, known, {true, true, true, true}, run, s) == known);
  CHECK(d.calls == 0);
  CHECK(inpaint_sample<double>(d, known, {false, false, false, false}, run, s) ==
        ddim_sample<double>(d, run, s, known.shape()));

  const auto out = inpaint_sample<double>(d, known, {true, false, true, false}, run, s);
  for (int b = 0; b < 2; ++b) {
    for (int st : {0, 2}) {
      for (int i = 0; i < 3; ++i) REQUIRE(out[(b * 4 + st) * 3 + i] == known[(b * 4 + st) * 3 + i]);
    }
  }
  CHECK_THROWS_AS(inpaint_sample<double>(d, known, {true, false}, run, s), ArgumentError);
  run.w = 1.0;
  CHECK_THROWS_AS(inpaint_sample<double>(d, known, {true, false, true, false}, run, s), ArgumentError);
}

TEST_CASE("replacement inpainting matches its exact mean propagation") {
  const NoiseSchedule s = vp_default();
  const double rho = 0.8, g = 1.5;
  BivariateOracle oracle(s, rho);
  const int runs = 5000;
  Tensor<double> known({runs, 2});
  for (int r = 0; r < runs; ++r) known[2 * r] = g;

  // every operation is linear, so the mean of the free track follows a closed recursion
  const auto grid = step_grid(200, 1000);
  double m0 = std::sqrt(vp_alpha_bar(1000)) * g, m1 = 0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const VpStep st = vp_step(grid[i], grid[i + 1], 1.0);
    const double a = std::sqrt(st.at), b = std::sqrt(1 - st.at);
    const double d = a * a + b * b, o = a * a * rho, det = d * d - o * o;
    const double e1 = b * (-o * m0 + d * m1) / det;
    m1 = std::sqrt(st.as) * (m1 - b * e1) / a + st.dir * e1;
    m0 = std::sqrt(st.as) * g;
  }
  const auto out = inpaint_sample<double>(oracle, known, {true, false}, SamplerRun{200, 1.0, 51, 0.0}, s);
  std::vector<double> free_track(runs);
  for (int r = 0; r < runs; ++r) free_track[r] = out[2 * r + 1];
  const auto m = testing::moments(free_track);
  MESSAGE("inpainted mean " << m.mean << ", propagated " << m1 << ", conditional mean " << rho * g);
  CHECK(std::abs(m.mean - m1) < 4 * std::sqrt(m.variance / runs));
}

TEST_CASE("variance-exploding sampling follows its exact moment recursion") {
  const double sigma_max = 5.0, mu = 0.7, sd = 0.3;
  const NoiseSchedule s = build_schedule({ScheduleKind::VarianceExploding, 1000, 0, 0, sigma_max});
  GaussianOracle oracle(s, mu, sd);
  // mean and variance of the state, pushed through each stochastic step
  double m = 0, v = sigma_max * sigma_max;
  for (int t = 1000; t >= 1; --t) {
    const double bt = sigma_max * t / 1000, bs = sigma_max * (t - 1) / 1000;
    const double g = bt / (sd * sd + bt * bt);
    const double var = bs * bs * (bt * bt - bs * bs) / (bt * bt);
    const double d = std::sqrt(bs * bs - var);
    const double lin = 1 - bt * g + d * g;
    m = lin * m + mu * g * (bt - d);
    v = lin * lin * v + var;
  }
  const auto out = ddim_sample<double>(oracle, SamplerRun{1000, 1.0, 61, 0.0}, s, {10000, 1});
  const auto mo = testing::moments(out.storage());
  MESSAGE("VE moments " << mo.mean << " / " << mo.variance << ", propagated " << m << " / " << v);
  CHECK(std::abs(mo.mean - m) < 4 * std::sqrt(v) / 100);
  CHECK(std::abs(mo.variance / v - 1) < 4 * std::sqrt(2.0 / 10000));
}
