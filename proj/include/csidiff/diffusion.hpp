#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace csidiff {

// Variance schedule over T steps. alpha_bar has T+1 entries with
// alpha_bar[0] = 1 (empty product) and alpha_bar[t] = alpha_bar[t-1]*alpha[t-1]
// held exactly.
struct NoiseSchedule {
  std::int64_t T = 0;
  std::vector<double> beta;       // beta[t-1] is the step-t variance
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative products, index 0..T

  void validate() const;

  // Loss weight alpha_bar[t] / (1 - alpha_bar[t]).
  double snr_weight(std::int64_t t) const;
};

// Cosine schedule: alpha_bar ratios follow f(t)/f(0) with
// f(t) = cos^2(((t/T + s)/(1 + s))*pi/2), s = 0.008, and per-step beta clipped
// at 0.999 before the cumulative products are rebuilt.
NoiseSchedule cosine_schedule(std::int64_t T);

// z_t = sqrt(ab_t)*z0 + sqrt(1-ab_t)*eps for t in [1, T].
torch::Tensor perturb(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                      const NoiseSchedule& schedule);

// Posterior mean (1/sqrt(alpha_t))*(z_t - beta_t*(z_t - sqrt(ab_t)*pred_z0)/(1 - ab_t)).
torch::Tensor posterior_mu(const torch::Tensor& z_t, const torch::Tensor& pred_z0, std::int64_t t,
                           const NoiseSchedule& schedule);

using DenoiseFn = std::function<torch::Tensor(const torch::Tensor& z_t, std::int64_t t)>;

// Deterministic decode: z_T = 0, then for t = T..1
//   z_{t-1} = sqrt(ab_{t-1})*d + sqrt(1-ab_{t-1})*(z_t - sqrt(ab_t)*d)/sqrt(1-ab_t)
// with d = denoise(z_t, t). Exactly T denoiser evaluations, no randomness.
torch::Tensor ddim_loop(const DenoiseFn& denoise, torch::IntArrayRef shape,
                        const NoiseSchedule& schedule,
                        torch::TensorOptions options = torch::TensorOptions());

}  // namespace csidiff
