#include <cmath>
#include <vector>

#include "csidiff/diffusion.hpp"
#include "csidiff/errors.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_compat.hpp"

using namespace csidiff;

TEST_CASE("four-step cosine schedule reproduces the reference constants") {
  auto s = cosine_schedule(4);
  const std::vector<double> expected{8.47e-1, 4.93e-1, 1.44e-1, 1.44e-4};
  for (int t = 1; t <= 4; ++t) {
    const double rel = std::abs(s.alpha_bar[t] - expected[t - 1]) / expected[t - 1];
    INFO("t=", t, " alpha_bar=", s.alpha_bar[t]);
    CHECK(rel < 0.005);
  }
  // the final step hits the clip
  CHECK(s.beta[3] == 0.999);
}

TEST_CASE("alpha_bar starts at 1 and decreases strictly for any T") {
  for (std::int64_t T = 1; T <= 64; ++T) {
    auto s = cosine_schedule(T);
    CHECK(s.alpha_bar[0] == 1.0);
    for (std::int64_t t = 1; t <= T; ++t) {
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
  }
}

TEST_CASE("alpha_bar is the exact running product of alpha") {
  auto s = cosine_schedule(4);
  for (std::int64_t t = 1; t <= 4; ++t) {
    CHECK(s.alpha_bar[t] == s.alpha_bar[t - 1] * s.alpha[t - 1]);
    CHECK(std::abs(s.alpha_bar[t] / s.alpha_bar[t - 1] - s.alpha[t - 1]) < 1e-12);
  }
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("schedule validation rejects corrupted schedules") {
  auto s = cosine_schedule(4);
  auto broken = s;
  broken.alpha_bar[2] *= 1.0000001;
  CHECK_THROWS_AS(broken.validate(), config_error);
  broken = s;
  broken.alpha_bar[0] = 0.99;
  CHECK_THROWS_AS(broken.validate(), config_error);
  CHECK_THROWS_AS(cosine_schedule(0), config_error);
}

TEST_CASE("snr weight at the first step") {
  auto s = cosine_schedule(4);
  const double w = s.snr_weight(1);
  CHECK(std::abs(w - 0.847 / 0.153) / (0.847 / 0.153) < 0.005);
  CHECK_THROWS_AS(s.snr_weight(0), config_error);
  CHECK_THROWS_AS(s.snr_weight(5), config_error);
}

TEST_CASE("perturb interpolates between signal and noise") {
  auto s = cosine_schedule(4);
  auto one = torch::ones({1}, torch::kDouble);
  auto zero_eps = torch::zeros({1}, torch::kDouble);
  auto z1 = perturb(one, 1, zero_eps, s);
  CHECK(z1.item<double>() == doctest::Approx(0.9203).epsilon(1e-3));

  // by the last step the signal coefficient is nearly gone
  CHECK(std::sqrt(s.alpha_bar[4]) < 0.02);
  CHECK(std::sqrt(1.0 - s.alpha_bar[4]) > 0.9999);

  CHECK_THROWS_AS(perturb(one, 0, zero_eps, s), config_error);
  CHECK_THROWS_AS(perturb(one, 5, zero_eps, s), config_error);
  CHECK_THROWS_AS(perturb(one, 1, torch::zeros({2}, torch::kDouble), s), data_error);
}

TEST_CASE("perturbed second moment matches the schedule") {
  auto s = cosine_schedule(4);
  torch::manual_seed(123);
  const std::int64_t n = 200000;
  auto z0 = torch::ones({n}, torch::kDouble);
  for (std::int64_t t : {1, 2, 3}) {
    auto eps = torch::randn({n}, torch::kDouble);
    auto zt = perturb(z0, t, eps, s);
    const double second_moment = zt.pow(2).mean().item<double>();
    const double expected = s.alpha_bar[t] * 1.0 + (1.0 - s.alpha_bar[t]);
    CHECK(second_moment == doctest::Approx(expected).epsilon(0.02));
  }
}

TEST_CASE("posterior mean collapses correctly in the noise-free case") {
  auto s = cosine_schedule(4);
  torch::manual_seed(3);
  auto z0 = torch::randn({8}, torch::kDouble);
  for (std::int64_t t = 1; t <= 4; ++t) {
    auto z_t = std::sqrt(s.alpha_bar[t]) * z0;
    auto mu = posterior_mu(z_t, z0, t, s);
    auto want = std::sqrt(s.alpha_bar[t - 1]) * z0;
    CHECK(((mu - want).norm() / want.norm()).item<double>() < 1e-12);
  }
}

TEST_CASE("posterior mean is the identity under a degenerate schedule") {
  NoiseSchedule flat;
  flat.T = 1;
  flat.beta = {0.0};
  flat.alpha = {1.0};
  flat.alpha_bar = {1.0, 1.0};
  auto z_t = torch::tensor({0.3, -1.2}, torch::kDouble);
  auto mu = posterior_mu(z_t, torch::zeros_like(z_t), 1, flat);
  CHECK(torch::allclose(mu, z_t, 1e-12, 1e-12));
}

TEST_CASE("posterior mean matches an independently derived form") {
  auto s = cosine_schedule(4);
  torch::manual_seed(7);
  auto z_t = torch::randn({16}, torch::kDouble);
  auto z0 = torch::randn({16}, torch::kDouble);
  for (std::int64_t t = 1; t <= 4; ++t) {
    auto mu = posterior_mu(z_t, z0, t, s);
    // sqrt(ab_{t-1})*beta_t/(1-ab_t) * z0 + sqrt(alpha_t)*(1-ab_{t-1})/(1-ab_t) * z_t
    const double ab = s.alpha_bar[t], ab_prev = s.alpha_bar[t - 1], beta = s.beta[t - 1];
    auto want = (std::sqrt(ab_prev) * beta / (1 - ab)) * z0 +
                (std::sqrt(s.alpha[t - 1]) * (1 - ab_prev) / (1 - ab)) * z_t;
    CHECK(((mu - want).norm() / want.norm()).item<double>() < 1e-9);
  }
  CHECK_THROWS_AS(posterior_mu(z_t, z0, 0, s), config_error);
}

TEST_CASE("a perfect denoiser is a fixed point of the decode loop") {
  torch::manual_seed(11);
  for (std::int64_t T : {1, 4, 16}) {
    auto s = cosine_schedule(T);
    auto z_star = torch::randn({2, 32, 32}, torch::kDouble);
    auto fixed = [&](const torch::Tensor&, std::int64_t) { return z_star; };
    auto out = ddim_loop(fixed, z_star.sizes(), s, z_star.options());
    CHECK(((out - z_star).norm() / z_star.norm()).item<double>() <= 1e-5);
  }
}

TEST_CASE("the decode loop matches a hand-unrolled recurrence") {
  auto s = cosine_schedule(4);
  torch::manual_seed(13);
  auto z_star = torch::randn({4, 4}, torch::kDouble);
  auto fixed = [&](const torch::Tensor&, std::int64_t) { return z_star; };
  auto out = ddim_loop(fixed, z_star.sizes(), s, z_star.options());

  auto z = torch::zeros_like(z_star);
  for (std::int64_t t = 4; t >= 1; --t) {
    const double ab = s.alpha_bar[t], ab_prev = s.alpha_bar[t - 1];
    z = std::sqrt(ab_prev) * z_star +
        std::sqrt(1.0 - ab_prev) * (z - std::sqrt(ab) * z_star) / std::sqrt(1.0 - ab);
  }
  CHECK(torch::allclose(out, z, 1e-12, 1e-12));
}

TEST_CASE("a zero denoiser decodes to zero") {
  auto s = cosine_schedule(4);
  auto zero = [](const torch::Tensor& z, std::int64_t) { return torch::zeros_like(z); };
  auto out = ddim_loop(zero, {2, 32, 32}, s);
  CHECK(out.abs().max().item<float>() == 0.0f);
}

TEST_CASE("decoding is deterministic and calls the denoiser exactly T times") {
  auto s = cosine_schedule(4);
  int calls = 0;
  auto noisy_affine = [&](const torch::Tensor& z, std::int64_t t) {
    ++calls;
    return 0.5 * z + 0.1 * static_cast<double>(t);
  };
  auto a = ddim_loop(noisy_affine, {3, 3}, s, torch::TensorOptions().dtype(torch::kDouble));
  CHECK(calls == 4);
  calls = 0;
  auto b = ddim_loop(noisy_affine, {3, 3}, s, torch::TensorOptions().dtype(torch::kDouble));
  CHECK(calls == 4);
  CHECK(torch::equal(a, b));
}

TEST_CASE("the loop rejects a denoiser that changes shapes") {
  auto s = cosine_schedule(2);
  auto bad = [](const torch::Tensor&, std::int64_t) { return torch::zeros({5}); };
  CHECK_THROWS_AS(ddim_loop(bad, {3}, s), data_error);
}
