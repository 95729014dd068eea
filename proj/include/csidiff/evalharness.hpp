#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "csidiff/baseline.hpp"
#include "csidiff/channel.hpp"
#include "csidiff/codec.hpp"
#include "csidiff/training.hpp"

namespace csidiff {

enum class CodecKind { diffusion, baseline };

const char* codec_name(CodecKind kind);
CodecKind codec_from_name(const std::string& name);

// One measured rate-distortion cell.
struct RDPoint {
  CodecKind codec = CodecKind::diffusion;
  std::int64_t rate_bits = 0;
  double nmse_db = 0.0;
  bool side_info = false;
  std::int64_t train_steps = 0;
  std::uint64_t seed = 0;
  std::string dataset;

  bool operator==(const RDPoint& other) const = default;
};

// Header: codec,rate_bits,nmse_db,side_info,train_steps,seed,dataset.
// nmse_db is written with enough digits to round trip exactly.
std::string rd_csv(const std::vector<RDPoint>& points);
std::vector<RDPoint> parse_rd_csv(const std::string& text);

// Self-contained SVG scatter/line plot: rate on a linear x axis, NMSE in dB on
// y, one series per (codec, side_info) pair, each annotated with whether its
// NMSE is non-increasing in rate.
std::string rd_svg(const std::vector<RDPoint>& points);

// Codec-agnostic evaluation hooks. encode returns the serialized codeword
// record; decode parses those exact bytes back. Keeping the byte round trip in
// the loop makes file-based and in-memory evaluation provably identical.
struct EvalCodec {
  std::function<std::vector<std::uint8_t>(const torch::Tensor& x_ad)> encode;
  std::function<torch::Tensor(const std::vector<std::uint8_t>& record,
                              const std::optional<torch::Tensor>& y_ad)>
      decode;
  bool use_side_info = false;
  std::int64_t rate_bits = 0;
};

// Mean NMSE in dB over the split via encode -> serialize -> parse -> decode.
double evaluate_nmse_db(const EvalCodec& codec, const Dataset& split);

// Wrappers borrow the codec; it must outlive the handle.
EvalCodec wrap_codec(DiffusionCodec& codec);
EvalCodec wrap_codec(BaselineCodec& codec);

// Either codec family, loaded from a checkpoint by its metadata kind.
struct LoadedCodec {
  CodecKind kind = CodecKind::diffusion;
  std::optional<DiffusionCodec> diffusion;
  std::optional<BaselineCodec> baseline;

  std::int64_t rate_bits() const;
  EvalCodec handle();  // borrows; the LoadedCodec must outlive it
};

LoadedCodec load_codec(const std::string& checkpoint_path);

nlohmann::json channel_config_to_json(const ChannelConfig& config);
ChannelConfig channel_config_from_json(const nlohmann::json& j);

// One synthetic-data sweep: a shared training recipe applied per rate point.
struct ExperimentConfig {
  ChannelConfig channel;
  std::size_t n_train_samples = 32;
  std::size_t n_eval_samples = 8;
  std::vector<std::int64_t> diffusion_rates;  // codebook sizes N_v
  std::vector<std::int64_t> baseline_rates;   // latent dimensions N_clf
  TrainingConfig training;
  ArchDescriptor arch = ArchDescriptor::desk_scale();
  BaselineConfig baseline_arch;
  std::string dataset_id = "synthetic";

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct SweepResult {
  std::vector<RDPoint> points;
  std::string csv;
  std::string svg;
};

// Trains and evaluates every (codec, rate) cell. The architecture side-info
// flags follow training.use_side_info.
SweepResult rd_sweep(const ExperimentConfig& config);

// Encodes every sample of the dataset into a stream of codeword records.
// The checkpoint kind (diffusion or baseline) is read from its metadata.
// Returns the number of records written.
std::size_t encode_file(const std::string& checkpoint_path, const std::string& data_path,
                        const std::string& out_path);

// Decodes a codeword record stream into a dataset of reconstructions
// (angular-delay blocks; raw matrices too when raw_subcarriers > 0).
// side_data_path supplies decoder side information when the checkpoint needs
// it. Returns the number of records decoded.
std::size_t decode_file(const std::string& checkpoint_path, const std::string& codes_path,
                        const std::optional<std::string>& side_data_path,
                        const std::string& out_path, std::int64_t raw_subcarriers = 0);

}  // namespace csidiff
