#pragma once

#include <torch/torch.h>

#include "csidiff/channel.hpp"

namespace csidiff {

inline constexpr std::int64_t kAngularBins = 32;
inline constexpr std::int64_t kDelayBins = 32;

// Cropped angular-delay representation: real [32 x 32 x 2] (angle x delay x
// {real, imag}). `scale` records the factor the original data was divided by;
// 1 means unnormalized.
struct AngularDelayBlock {
  torch::Tensor data;
  float scale = 1.0f;
};

// Unitary 2D IFFT over (antenna, subcarrier), keep the first 32 delay
// columns, split complex into two real channels. Requires raw [32 x N_sc]
// complex with N_sc >= 32.
AngularDelayBlock to_angular_delay(const torch::Tensor& raw);

// Reassembles complex 32x32, zero-pads the delay axis to n_subcarriers and
// applies the unitary 2D FFT. Exact left-inverse of to_angular_delay whenever
// the raw signal's delay support is confined to the first 32 taps.
torch::Tensor from_angular_delay(const AngularDelayBlock& block, std::int64_t n_subcarriers);

// Fills the angular-delay fields of every sample from its raw matrices.
void preprocess_dataset(Dataset& dataset);

// Mean over the batch of per-sample ||z - z_hat||^2_F / ||z||^2_F, accumulated
// in double. Tensors of rank >= 4 are treated as batches along dim 0, lower
// ranks as a single sample. Throws numerical_error on an all-zero reference.
double nmse(const torch::Tensor& z, const torch::Tensor& z_hat);

// 10*log10 of the linear value, floored at 1e-12 before conversion.
double nmse_db(double linear);
double nmse_db(const torch::Tensor& z, const torch::Tensor& z_hat);

// Dataset-level normalization scale: the 99.9th percentile of |entries| over
// all angular-delay fields present. Returns 1 for an all-zero dataset.
float compute_norm_scale(const Dataset& dataset);

AngularDelayBlock normalize(const AngularDelayBlock& block, float scale);
AngularDelayBlock denormalize(const AngularDelayBlock& block);

}  // namespace csidiff
