#include "csidiff/channel.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "csidiff/errors.hpp"
#include "csidiff/rng.hpp"

namespace csidiff {

namespace {

constexpr double kSpeedOfLight = 299792458.0;

struct PathSet {
  std::vector<double> sin_angle;   // sin of departure angle
  std::vector<std::int64_t> delay_bin;
  std::vector<std::complex<double>> gain;
  std::vector<double> doppler_cos;  // cosine of motion-to-path angle
};

// Draws the per-sample path geometry. Delays are exponential with mean
// delay_spread, then snapped to the FFT delay grid 1/(K * spacing) and
// clamped into the first 32 taps so the cropped angular-delay form is a
// lossless representation of the generated channel.
PathSet draw_paths(const ChannelConfig& cfg, SplitRng& rng) {
  PathSet ps;
  const std::int64_t max_bin = std::min<std::int64_t>(31, cfg.n_subcarriers - 1);
  const double grid = 1.0 / (static_cast<double>(cfg.n_subcarriers) * cfg.subcarrier_spacing);
  for (std::int64_t p = 0; p < cfg.n_paths; ++p) {
    const double theta = rng.uniform(-std::numbers::pi / 2.0, std::numbers::pi / 2.0);
    ps.sin_angle.push_back(std::sin(theta));
    const double tau = rng.exponential(cfg.delay_spread);
    std::int64_t bin = static_cast<std::int64_t>(std::llround(tau / grid));
    bin = std::min(std::max<std::int64_t>(bin, 0), max_bin);
    ps.delay_bin.push_back(bin);
    const double scale = std::sqrt(1.0 / (2.0 * static_cast<double>(cfg.n_paths)));
    ps.gain.emplace_back(scale * rng.normal(), scale * rng.normal());
    ps.doppler_cos.push_back(rng.uniform(-1.0, 1.0));
  }
  return ps;
}

// h(a, k) = sum_p g_p * exp(j * 2pi * f_D,p * t) * exp(-j*pi*a*u_p*r) *
//           exp(-j*2pi*bin_p*k/K), with r the carrier ratio relative to the
// DL design carrier (antenna spacing is half the DL wavelength).
torch::Tensor synthesize(const ChannelConfig& cfg, const PathSet& ps, double carrier_hz,
                         double time_s) {
  const std::int64_t A = cfg.n_bs_antennas;
  const std::int64_t K = cfg.n_subcarriers;
  const double ratio = carrier_hz / cfg.dl_carrier;

  auto out = torch::zeros({A, K}, torch::kComplexFloat);
  auto acc = out.accessor<c10::complex<float>, 2>();

  std::vector<std::complex<double>> steer(A);
  std::vector<std::complex<double>> tone(K);
  std::vector<std::complex<double>> row(K);
  std::vector<std::complex<double>> sum(A * K, {0.0, 0.0});

  for (std::size_t p = 0; p < ps.gain.size(); ++p) {
    const double doppler_hz = (cfg.ue_speed / kSpeedOfLight) * carrier_hz * ps.doppler_cos[p];
    const std::complex<double> g =
        ps.gain[p] * std::polar(1.0, 2.0 * std::numbers::pi * doppler_hz * time_s);
    const double u = ps.sin_angle[p] * ratio;
    for (std::int64_t a = 0; a < A; ++a) {
      steer[a] = std::polar(1.0, -std::numbers::pi * static_cast<double>(a) * u);
    }
    const double w = -2.0 * std::numbers::pi * static_cast<double>(ps.delay_bin[p]) /
                     static_cast<double>(K);
    for (std::int64_t k = 0; k < K; ++k) {
      tone[k] = std::polar(1.0, w * static_cast<double>(k));
    }
    for (std::int64_t k = 0; k < K; ++k) row[k] = g * tone[k];
    for (std::int64_t a = 0; a < A; ++a) {
      std::complex<double>* dst = sum.data() + a * K;
      const std::complex<double> s = steer[a];
      for (std::int64_t k = 0; k < K; ++k) dst[k] += s * row[k];
    }
  }

  for (std::int64_t a = 0; a < A; ++a) {
    for (std::int64_t k = 0; k < K; ++k) {
      const std::complex<double>& v = sum[a * K + k];
      acc[a][k] = c10::complex<float>(static_cast<float>(v.real()), static_cast<float>(v.imag()));
    }
  }
  return out;
}

}  // namespace

void ChannelConfig::validate() const {
  auto count_ok = [](std::int64_t v) { return v >= 1; };
  if (!count_ok(n_bs_antennas) || !count_ok(n_subcarriers) || !count_ok(n_paths) ||
      !count_ok(n_slots)) {
    throw config_error("channel config: all counts must be >= 1");
  }
  auto pos = [](double v) { return v > 0.0; };
  if (!pos(subcarrier_spacing) || !pos(delay_spread) || !pos(dl_carrier) || !pos(ul_carrier) ||
      !pos(slot_interval)) {
    throw config_error("channel config: physical quantities must be > 0");
  }
  if (ue_speed < 0.0) {
    throw config_error("channel config: ue_speed must be >= 0");
  }
}

CsiSample generate_sample(const ChannelConfig& config, std::uint64_t sample_seed) {
  config.validate();
  SplitRng rng = SplitRng(config.seed).split(sample_seed);
  const PathSet ps = draw_paths(config, rng);
  const double t_last = static_cast<double>(config.n_slots - 1) * config.slot_interval;

  CsiSample s;
  s.x_raw = synthesize(config, ps, config.dl_carrier, 0.0);
  s.z_raw = synthesize(config, ps, config.dl_carrier, t_last);
  s.y_raw = synthesize(config, ps, config.ul_carrier, t_last);
  return s;
}

Dataset generate_dataset(const ChannelConfig& config, std::size_t count, Split split,
                         std::uint64_t sample_seed_offset) {
  Dataset ds;
  ds.split = split;
  ds.source = Source::synthetic;
  ds.config = config;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ds.samples.push_back(generate_sample(config, sample_seed_offset + i));
  }
  return ds;
}

const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }
const char* source_name(Source s) { return s == Source::synthetic ? "synthetic" : "ingested"; }

}  // namespace csidiff
