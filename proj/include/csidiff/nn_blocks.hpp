#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

namespace csidiff {

// Network sizing. paper_scale() is the full model; desk_scale() is a reduced
// profile for tests that must run in minutes on a CPU.
struct ArchDescriptor {
  std::int64_t enc_base = 64;     // first encoder stage width
  std::int64_t code_dim = 128;    // continuous-code vector dimension
  std::int64_t cond_channels = 8; // up-projected conditioning channels
  std::int64_t unet_base = 64;
  std::vector<std::int64_t> unet_mults{1, 2, 3, 4};
  bool use_side_info = true;

  static ArchDescriptor paper_scale(bool side_info = true);
  static ArchDescriptor desk_scale(bool side_info = true);

  std::int64_t unet_in_channels() const {
    return 2 + cond_channels + (use_side_info ? 2 : 0);
  }
  std::int64_t time_dim() const { return 4 * unet_base; }

  void validate() const;
  nlohmann::json to_json() const;
  static ArchDescriptor from_json(const nlohmann::json& j);
};

// Layout shims between the [H,W,2] block convention and NCHW tensors.
torch::Tensor to_nchw(const torch::Tensor& hwc);   // [H,W,C] -> [1,C,H,W]; [B,H,W,C] -> [B,C,H,W]
torch::Tensor to_hwc(const torch::Tensor& nchw);   // [B,C,H,W] -> [B,H,W,C]

std::int64_t parameter_count(const torch::nn::Module& module);

// Two 3x3 convolutions with group norm and SiLU, residual skip (1x1 projection
// when the width changes). time_dim > 0 adds a per-channel shift from the step
// embedding between the convolutions.
class ResnetBlockImpl : public torch::nn::Module {
 public:
  ResnetBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t time_dim = 0);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {});

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResnetBlock);

// Stride-2 convolution; halves each spatial dimension.
class DownsampleImpl : public torch::nn::Module {
 public:
  explicit DownsampleImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Downsample);

// Transposed convolution (k4 s2 p1); doubles each spatial dimension.
class UpsampleImpl : public torch::nn::Module {
 public:
  explicit UpsampleImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::ConvTranspose2d conv_{nullptr};
};
TORCH_MODULE(Upsample);

// Single-head linear attention with a pre-norm and residual connection.
class LinearAttentionImpl : public torch::nn::Module {
 public:
  explicit LinearAttentionImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d to_qkv_{nullptr};
  torch::nn::Conv2d to_out_{nullptr};
};
TORCH_MODULE(LinearAttention);

// Sinusoidal features of the integer step projected through a two-layer MLP.
class TimeEmbeddingImpl : public torch::nn::Module {
 public:
  TimeEmbeddingImpl(std::int64_t n_freqs, std::int64_t out_dim);
  torch::Tensor forward(const torch::Tensor& t);  // [B] integer -> [B, out_dim]

 private:
  std::int64_t n_freqs_;
  torch::nn::Linear lin1_{nullptr}, lin2_{nullptr};
};
TORCH_MODULE(TimeEmbedding);

// [B,2,32,32] -> [B,code_dim,8,8] through two ResNet + downsample stages with
// widths enc_base and code_dim.
class EncoderNetImpl : public torch::nn::Module {
 public:
  explicit EncoderNetImpl(const ArchDescriptor& desc);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_in_{nullptr};
  ResnetBlock rnb1_{nullptr}, rnb2_{nullptr};
  Downsample down1_{nullptr}, down2_{nullptr};
};
TORCH_MODULE(EncoderNet);

// [B,code_dim,8,8] -> [B,cond_channels,32,32] through two ResNet + upsample
// stages; part of the decoder's parameters.
class CodeUpProjectorImpl : public torch::nn::Module {
 public:
  explicit CodeUpProjectorImpl(const ArchDescriptor& desc);
  torch::Tensor forward(const torch::Tensor& code);

 private:
  ResnetBlock rnb1_{nullptr}, rnb2_{nullptr};
  Upsample up1_{nullptr}, up2_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(CodeUpProjector);

// Conditional U-Net denoiser. Input channels: 2 (state) + cond_channels
// (up-projected code) + 2 more when side info is in use. Linear attention sits
// only at the bottleneck. The output convolution is zero-initialized, so an
// untrained network predicts exactly 0.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const ArchDescriptor& desc);

  // z_t [B,2,32,32], cond [B,cond_channels,32,32], y [B,2,32,32] (required
  // exactly when the descriptor uses side info), t [B] integer steps.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& cond,
                        const std::optional<torch::Tensor>& y, const torch::Tensor& t);

  const ArchDescriptor& descriptor() const { return desc_; }

 private:
  ArchDescriptor desc_;
  TimeEmbedding time_embed_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr};
  std::vector<ResnetBlock> down_blocks_;
  std::vector<Downsample> downs_;
  ResnetBlock mid1_{nullptr}, mid2_{nullptr};
  LinearAttention mid_attn_{nullptr};
  std::vector<ResnetBlock> up_blocks_;
  std::vector<Upsample> ups_;
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace csidiff
