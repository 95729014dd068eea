#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "csidiff/channel.hpp"
#include "csidiff/codec.hpp"

namespace csidiff {

struct TrainingConfig {
  double eta = 4.5e-4;           // codebook-loss weight
  std::int64_t n_train = 300000;
  std::int64_t batch_size = 100;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::int64_t T = 4;
  std::int64_t n_v = 4;
  std::int64_t val_every = 1000;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;
  bool use_side_info = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
};

struct StepStats {
  double loss = 0.0;
  double denoise_loss = 0.0;
  double cb_loss = 0.0;
};

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double denoise_loss = 0.0;
  double cb_loss = 0.0;
  // NaN marks steps without a validation pass
  double val_nmse_db = std::numeric_limits<double>::quiet_NaN();
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);

// Metrics log <-> [n,5] double tensor, for checkpoint embedding.
torch::Tensor metrics_to_tensor(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> metrics_from_tensor(const torch::Tensor& t);

// Epoch-shuffled minibatch draw: consumes `perm` from `cursor`, reshuffling
// via the global torch generator whenever the permutation runs out.
std::vector<std::int64_t> draw_epoch_indices(torch::Tensor& perm, std::int64_t& cursor,
                                             std::int64_t batch_size, std::int64_t n_samples);

// Adam state as a byte tensor for checkpoint embedding. The layout follows
// parameter order, so identical runs serialize to identical bytes.
torch::Tensor optimizer_blob(const torch::optim::Optimizer& opt);
void load_optimizer_blob(torch::optim::Optimizer& opt, const torch::Tensor& blob);

// One normalized training minibatch in NCHW layout.
struct Batch {
  torch::Tensor x;
  torch::Tensor z;
  std::optional<torch::Tensor> y;
};

Batch make_batch(const Dataset& dataset, const std::vector<std::int64_t>& indices, float scale,
                 bool side_info);

// Everything needed to continue a run: model, optimizer, RNG position, and the
// in-epoch sampling cursor.
struct TrainState {
  DiffusionCodec codec;
  TrainingConfig config;
  std::int64_t step = 0;
  torch::Tensor epoch_perm;  // undefined until the first epoch starts
  std::int64_t cursor = 0;
  std::vector<std::int64_t> usage_counts;
  std::vector<MetricsRow> log;
  std::shared_ptr<torch::optim::Adam> optimizer;

  static TrainState init(const TrainingConfig& config, const ArchDescriptor& desc);
};

// One Adam update over one minibatch. Throws numerical_error with step
// diagnostics when the loss stops being finite.
StepStats train_step(TrainState& state, const Batch& batch);

// Mean NMSE in dB over the split via full encode -> decode.
double validation_nmse_db(DiffusionCodec& codec, const Dataset& split);

// Runs until state.step == config.n_train, drawing epoch-shuffled minibatches
// and logging one MetricsRow per step. checkpoint_path, when non-empty, gets a
// checkpoint every checkpoint_every steps and at the end.
void continue_training(TrainState& state, const Dataset& train_split, const Dataset* val_split,
                       const std::string& checkpoint_path = "");

// init + norm-scale fit + continue_training.
TrainState train(const TrainingConfig& config, const ArchDescriptor& desc,
                 const Dataset& train_split, const Dataset* val_split = nullptr,
                 const std::string& checkpoint_path = "");

void save_train_checkpoint(TrainState& state, const std::string& path);
TrainState load_train_checkpoint(const std::string& path,
                                 const std::optional<ArchDescriptor>& expected = std::nullopt);

}  // namespace csidiff
