#pragma once

#include "kinediff/rng.h"
#include "kinediff/tensor.h"

#include <vector>

namespace kinediff {

/// Upper bound on per-step beta; keeps the final alpha_bar positive.
inline constexpr double kMaxBeta = 0.999;

/// Cumulative signal fractions alpha_bar[0..T], alpha_bar[0] = 1.
struct DiffusionSchedule {
  int T = 1000;
  double s = 0.008;
  std::vector<double> alpha_bar;

  double at(int t) const;
};

/// alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), with
/// each step's beta = 1 - alpha_bar(t)/alpha_bar(t-1) capped at kMaxBeta.
DiffusionSchedule cosine_schedule(int T, double s = 0.008);

struct NoisedSample {
  Tensor xt;
  Tensor eps;
};

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps with eps ~ N(0, I) drawn from rng.
NoisedSample forward_noise(const DiffusionSchedule& schedule, const Tensor& x0, int t, Rng& rng);

/// The noise implied by a clean estimate: (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t).
Tensor implied_noise(const DiffusionSchedule& schedule, const Tensor& clean_est, const Tensor& noisy_t, int t);

/// One DDIM transition t -> t_next:
///   sqrt(ab_next) x0 + sqrt(1 - ab_next - sigma^2) eps_hat + sigma eps_new.
/// `rng` is only consulted when sigma > 0.
Tensor ddim_step(
    const DiffusionSchedule& schedule,
    const Tensor& clean_est,
    const Tensor& noisy_t,
    int t,
    int t_next,
    double sigma = 0.0,
    Rng* rng = nullptr);

/// W + 1 uniformly spaced timesteps from T down to 0.
std::vector<int> timestep_subsequence(int T, int W);

} // namespace kinediff
