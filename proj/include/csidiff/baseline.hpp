#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "csidiff/channel.hpp"
#include "csidiff/checkpoint.hpp"
#include "csidiff/codebook.hpp"
#include "csidiff/nn_blocks.hpp"
#include "csidiff/training.hpp"

namespace csidiff {

// Uniform-quantization autoencoder reference codec: tanh-bounded latent of
// n_clf elements, each stored with bits_per_element bits.
struct BaselineConfig {
  std::int64_t n_clf = 22;
  std::int64_t bits_per_element = 6;
  std::int64_t base_width = 16;  // conv width; multiple of 8
  bool use_side_info = false;

  std::int64_t rate_bits() const { return n_clf * bits_per_element; }
  void validate() const;
  nlohmann::json to_json() const;
  static BaselineConfig from_json(const nlohmann::json& j);
};

// Mid-rise quantizer on [-1, 1] with 2^bits levels; inputs are clamped first.
//   level = clamp(floor((v+1)/2 * 2^bits), 0, 2^bits - 1)
//   value = (level + 0.5)/2^bits * 2 - 1
std::pair<std::int64_t, double> uniform_quantize(double v, std::int64_t bits);
double uniform_dequantize(std::int64_t level, std::int64_t bits);
torch::Tensor uniform_quantize_levels(const torch::Tensor& v, std::int64_t bits);
torch::Tensor uniform_dequantize_levels(const torch::Tensor& levels, std::int64_t bits);

// Forward: dequantized quantization of v. Backward: identity to v.
torch::Tensor uniform_quantize_straight_through(const torch::Tensor& v, std::int64_t bits);

// Conv stack -> dense -> tanh latent in [-1, 1]^n_clf.
class BaselineEncoderImpl : public torch::nn::Module {
 public:
  explicit BaselineEncoderImpl(const BaselineConfig& config);
  torch::Tensor forward(const torch::Tensor& x);  // [B,2,32,32] -> [B,n_clf]

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(BaselineEncoder);

// Dense -> reshape -> optional side-info concatenation -> two refinement
// blocks -> tanh-bounded [B,2,32,32] output.
class BaselineDecoderImpl : public torch::nn::Module {
 public:
  explicit BaselineDecoderImpl(const BaselineConfig& config);
  torch::Tensor forward(const torch::Tensor& latent, const std::optional<torch::Tensor>& y);

 private:
  BaselineConfig config_;
  torch::nn::Linear fc_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr}, conv_out_{nullptr};
  std::vector<ResnetBlock> refine_;
};
TORCH_MODULE(BaselineDecoder);

struct BaselineCodec {
  BaselineConfig config;
  BaselineEncoder encoder{nullptr};
  BaselineDecoder decoder{nullptr};
  float norm_scale = 1.0f;

  static BaselineCodec create(const BaselineConfig& config, std::uint64_t seed = 0);

  std::int64_t rate_bits() const { return config.rate_bits(); }

  // x_ad: unnormalized [32,32,2] block. Exactly n_clf * bits_per_element bits.
  BitString encode(const torch::Tensor& x_ad);

  // Denormalized [32,32,2] reconstruction; y_ad required exactly when the
  // config uses side info.
  torch::Tensor decode(const BitString& bits, const std::optional<torch::Tensor>& y_ad);

  std::vector<torch::Tensor> trainable_parameters();
  void train_mode(bool on);

  CheckpointData to_checkpoint();
  static BaselineCodec from_checkpoint(const CheckpointData& data);
};

struct BaselineTrainState {
  BaselineCodec codec;
  TrainingConfig config;  // eta, T, and n_v are ignored by the baseline
  std::int64_t step = 0;
  torch::Tensor epoch_perm;
  std::int64_t cursor = 0;
  std::vector<MetricsRow> log;
  std::shared_ptr<torch::optim::Adam> optimizer;

  static BaselineTrainState init(const TrainingConfig& config, const BaselineConfig& arch);
};

// One Adam update on the straight-through MSE between decode(encode(x)) and
// the normalized target.
StepStats baseline_train_step(BaselineTrainState& state, const Batch& batch);

double baseline_validation_nmse_db(BaselineCodec& codec, const Dataset& split);

void baseline_continue_training(BaselineTrainState& state, const Dataset& train_split,
                                const Dataset* val_split, const std::string& checkpoint_path = "");

BaselineTrainState baseline_train(const TrainingConfig& config, const BaselineConfig& arch,
                                  const Dataset& train_split, const Dataset* val_split = nullptr,
                                  const std::string& checkpoint_path = "");

void save_baseline_checkpoint(BaselineTrainState& state, const std::string& path);
BaselineTrainState load_baseline_checkpoint(const std::string& path);

}  // namespace csidiff
