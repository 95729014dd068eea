#include "csidiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "csidiff/errors.hpp"

namespace csidiff {

namespace {

constexpr double kDivFloor = 1e-12;
constexpr double kBetaClip = 0.999;

void check_step(std::int64_t t, std::int64_t T, const char* what) {
  if (t < 1 || t > T) {
    throw config_error(std::string(what) + ": step " + std::to_string(t) +
                       " outside [1, " + std::to_string(T) + "]");
  }
}

}  // namespace

void NoiseSchedule::validate() const {
  if (T < 1) throw config_error("schedule: T must be >= 1");
  if (static_cast<std::int64_t>(beta.size()) != T ||
      static_cast<std::int64_t>(alpha.size()) != T ||
      static_cast<std::int64_t>(alpha_bar.size()) != T + 1) {
    throw config_error("schedule: inconsistent array lengths");
  }
  if (alpha_bar[0] != 1.0) throw config_error("schedule: alpha_bar[0] must be 1");
  for (std::int64_t t = 1; t <= T; ++t) {
    if (!(alpha[t - 1] > 0.0 && alpha[t - 1] < 1.0)) {
      throw config_error("schedule: alpha out of (0, 1) at step " + std::to_string(t));
    }
    if (!(alpha_bar[t] < alpha_bar[t - 1])) {
      throw config_error("schedule: alpha_bar not strictly decreasing at step " + std::to_string(t));
    }
    if (alpha_bar[t] != alpha_bar[t - 1] * alpha[t - 1]) {
      throw config_error("schedule: alpha_bar is not the exact cumulative product");
    }
  }
}

double NoiseSchedule::snr_weight(std::int64_t t) const {
  check_step(t, T, "snr_weight");
  return alpha_bar[t] / std::max(1.0 - alpha_bar[t], kDivFloor);
}

NoiseSchedule cosine_schedule(std::int64_t T) {
  if (T < 1) throw config_error("cosine_schedule: T must be >= 1");
  constexpr double s = 0.008;
  auto f = [&](double t) {
    const double arg = ((t / static_cast<double>(T) + s) / (1.0 + s)) * M_PI / 2.0;
    const double c = std::cos(arg);
    return c * c;
  };

  NoiseSchedule sched;
  sched.T = T;
  sched.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  const double f0 = f(0.0);
  double prev_raw = 1.0;
  for (std::int64_t t = 1; t <= T; ++t) {
    const double raw = f(static_cast<double>(t)) / f0;
    const double beta = std::min(1.0 - raw / prev_raw, kBetaClip);
    prev_raw = raw;
    sched.beta.push_back(beta);
    sched.alpha.push_back(1.0 - beta);
    sched.alpha_bar[t] = sched.alpha_bar[t - 1] * sched.alpha.back();
  }
  sched.validate();
  return sched;
}

torch::Tensor perturb(const torch::Tensor& z0, std::int64_t t, const torch::Tensor& eps,
                      const NoiseSchedule& schedule) {
  check_step(t, schedule.T, "perturb");
  if (eps.sizes() != z0.sizes()) {
    throw data_error(data_error::kind::shape_mismatch, "perturb: eps shape differs from z0");
  }
  const double ab = schedule.alpha_bar[t];
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor posterior_mu(const torch::Tensor& z_t, const torch::Tensor& pred_z0, std::int64_t t,
                           const NoiseSchedule& schedule) {
  check_step(t, schedule.T, "posterior_mu");
  if (z_t.sizes() != pred_z0.sizes()) {
    throw data_error(data_error::kind::shape_mismatch, "posterior_mu: shape mismatch");
  }
  const double beta = schedule.beta[t - 1];
  const double ab = schedule.alpha_bar[t];
  const double denom = std::max(1.0 - ab, kDivFloor);
  auto noise_part = (z_t - std::sqrt(ab) * pred_z0) * (beta / denom);
  return (z_t - noise_part) / std::sqrt(schedule.alpha[t - 1]);
}

torch::Tensor ddim_loop(const DenoiseFn& denoise, torch::IntArrayRef shape,
                        const NoiseSchedule& schedule, torch::TensorOptions options) {
  schedule.validate();
  auto z = torch::zeros(shape, options);
  for (std::int64_t t = schedule.T; t >= 1; --t) {
    const auto d = denoise(z, t);
    if (d.sizes() != z.sizes()) {
      throw data_error(data_error::kind::shape_mismatch, "ddim: denoiser changed the shape");
    }
    const double ab_prev = schedule.alpha_bar[t - 1];
    const double ab = schedule.alpha_bar[t];
    const double dir = std::sqrt(1.0 - ab_prev) / std::max(std::sqrt(1.0 - ab), kDivFloor);
    z = std::sqrt(ab_prev) * d + dir * (z - std::sqrt(ab) * d);
  }
  return z;
}

}  // namespace csidiff
