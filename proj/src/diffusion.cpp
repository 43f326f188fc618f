#include "kinediff/diffusion.h"

#include "kinediff/errors.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace kinediff {

double DiffusionSchedule::at(int t) const {
  if (t < 0 || t > T) {
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(t)];
}

DiffusionSchedule cosine_schedule(int T, double s) {
  if (T < 1) {
    throw ConfigError("diffusion.T must be >= 1");
  }
  if (!(s > 0.0)) {
    throw ConfigError("diffusion.cosine_s must be positive");
  }
  const auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  DiffusionSchedule sch;
  sch.T = T;
  sch.s = s;
  sch.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  const double f0 = f(0);
  sch.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double prev = sch.alpha_bar[static_cast<std::size_t>(t) - 1];
    const double closed = f(t) / f0;
    sch.alpha_bar[static_cast<std::size_t>(t)] = (1.0 - closed / prev > kMaxBeta) ? prev * (1.0 - kMaxBeta) : closed;
  }
  return sch;
}

NoisedSample forward_noise(const DiffusionSchedule& schedule, const Tensor& x0, int t, Rng& rng) {
  const double ab = schedule.at(t);
  Tensor eps = rng.normal_tensor(x0.shape());
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  std::vector<double> xt(x0.numel());
  const auto xv = x0.values();
  const auto ev = eps.values();
  for (std::size_t i = 0; i < xt.size(); ++i) {
    xt[i] = a * xv[i] + b * ev[i];
  }
  return {Tensor(x0.shape(), std::move(xt)), eps};
}

Tensor implied_noise(const DiffusionSchedule& schedule, const Tensor& clean_est, const Tensor& noisy_t, int t) {
  if (clean_est.shape() != noisy_t.shape()) {
    throw DimensionError("clean estimate and noisy sample shapes differ");
  }
  const double ab = schedule.at(t);
  if (ab >= 1.0) {
    throw ContractError("implied noise is undefined at a noise-free timestep");
  }
  const double a = std::sqrt(ab);
  const double inv = 1.0 / std::sqrt(1.0 - ab);
  std::vector<double> eps(noisy_t.numel());
  const auto xv = noisy_t.values();
  const auto cv = clean_est.values();
  for (std::size_t i = 0; i < eps.size(); ++i) {
    eps[i] = (xv[i] - a * cv[i]) * inv;
  }
  return Tensor(noisy_t.shape(), std::move(eps));
}

Tensor ddim_step(
    const DiffusionSchedule& schedule,
    const Tensor& clean_est,
    const Tensor& noisy_t,
    int t,
    int t_next,
    double sigma,
    Rng* rng) {
  if (!(t_next < t) || t_next < 0 || t > schedule.T) {
    throw ContractError(
        "ddim_step needs 0 <= t_next < t <= T, got t=" + std::to_string(t) + " t_next=" + std::to_string(t_next));
  }
  if (sigma < 0.0 || (sigma > 0.0 && rng == nullptr)) {
    throw ContractError("ddim_step with sigma > 0 needs an rng");
  }
  const Tensor eps_hat = implied_noise(schedule, clean_est, noisy_t, t);
  const double ab_next = schedule.at(t_next);
  const double c = std::sqrt(ab_next);
  const double s = std::sqrt(std::max(0.0, 1.0 - ab_next - sigma * sigma));
  std::vector<double> out(clean_est.numel());
  const auto cv = clean_est.values();
  const auto ev = eps_hat.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = c * cv[i] + s * ev[i];
  }
  if (sigma > 0.0) {
    for (double& v : out) {
      v += sigma * rng->normal();
    }
  }
  return Tensor(clean_est.shape(), std::move(out));
}

std::vector<int> timestep_subsequence(int T, int W) {
  if (W < 1 || T < 1) {
    throw ConfigError("timestep_subsequence needs T >= 1 and W >= 1");
  }
  if (W > T) {
    throw ConfigError(
        "diffusion.W (" + std::to_string(W) + ") exceeds diffusion.T (" + std::to_string(T) + ")");
  }
  std::vector<int> steps;
  for (int k = 0; k <= W; ++k) {
    steps.push_back(static_cast<int>(static_cast<long long>(T) * (W - k) / W));
  }
  return steps;
}

} // namespace kinediff
