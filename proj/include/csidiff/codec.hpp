#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "csidiff/checkpoint.hpp"
#include "csidiff/codebook.hpp"
#include "csidiff/diffusion.hpp"
#include "csidiff/nn_blocks.hpp"

namespace csidiff {

// The full fixed-rate codec: encoder + codebook on the transmit side, code
// up-projection + conditional U-Net + DDIM loop on the receive side.
struct DiffusionCodec {
  ArchDescriptor desc;
  EncoderNet encoder{nullptr};
  CodeUpProjector upproj{nullptr};
  UNet unet{nullptr};
  Codebook codebook;
  NoiseSchedule schedule;
  float norm_scale = 1.0f;

  static DiffusionCodec create(const ArchDescriptor& desc, std::int64_t n_v,
                               std::int64_t T = 4, std::uint64_t seed = 0);

  std::int64_t rate_bits() const { return rate_for(codebook.n_vectors()); }

  // x_ad: unnormalized [32,32,2] angular-delay block. Inference only.
  Codeword encode(const torch::Tensor& x_ad);

  // Deterministic decode; y_ad must be present exactly when the descriptor
  // uses side info. Returns the denormalized [32,32,2] reconstruction.
  torch::Tensor decode(const Codeword& word, const std::optional<torch::Tensor>& y_ad);

  // All trainable tensors including the codebook.
  std::vector<torch::Tensor> trainable_parameters();

  void train_mode(bool on);

  CheckpointData to_checkpoint();
  static DiffusionCodec from_checkpoint(const CheckpointData& data);
};

}  // namespace csidiff
