#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace csidiff {

// Simplified geometric multipath generator configuration. Stands in for a
// full CDL simulation: n_paths plane-wave components with uniform angles,
// exponential delays snapped to the FFT delay grid, complex normal gains,
// and per-path Doppler rotation across slots.
struct ChannelConfig {
  std::int64_t n_bs_antennas = 32;
  std::int64_t n_subcarriers = 667;
  double subcarrier_spacing = 15e3;   // Hz
  std::int64_t n_paths = 24;
  double delay_spread = 300e-9;       // seconds
  double dl_carrier = 2.11e9;         // Hz
  double ul_carrier = 1.91e9;         // Hz
  double ue_speed = 5.0;              // m/s
  double slot_interval = 5e-3;        // seconds
  std::int64_t n_slots = 71;
  std::uint64_t seed = 0;

  // Throws config_error when a count is < 1 or a physical quantity is <= 0.
  void validate() const;
};

// One (input X, side info Y, target Z) triple. Raw matrices are complex
// [n_bs_antennas x n_subcarriers]; angular-delay forms are real [32 x 32 x 2]
// and stay undefined until preprocessing has run.
struct CsiSample {
  torch::Tensor x_raw;  // DL CSI at the first slot
  torch::Tensor y_raw;  // UL CSI at the last slot (side information)
  torch::Tensor z_raw;  // DL CSI at the last slot (prediction target)
  torch::Tensor x_ad;
  torch::Tensor y_ad;
  torch::Tensor z_ad;

  bool has_raw() const { return x_raw.defined(); }
  bool has_side_info() const { return y_raw.defined() || y_ad.defined(); }
  bool has_angular_delay() const { return x_ad.defined(); }
};

enum class Split { train, test };
enum class Source { synthetic, ingested };

struct Dataset {
  std::vector<CsiSample> samples;
  Split split = Split::train;
  Source source = Source::synthetic;
  ChannelConfig config;       // meaningful when source == synthetic
  std::string source_desc;    // external-source descriptor when ingested

  std::size_t size() const { return samples.size(); }
};

// Pure function of (config.seed, sample_seed): repeated calls with the same
// arguments return bit-identical samples.
CsiSample generate_sample(const ChannelConfig& config, std::uint64_t sample_seed);

// Generates `count` samples with sample seeds offset..offset+count-1.
Dataset generate_dataset(const ChannelConfig& config, std::size_t count, Split split,
                         std::uint64_t sample_seed_offset = 0);

const char* split_name(Split s);
const char* source_name(Source s);

}  // namespace csidiff
