#include "csidiff/nn_blocks.hpp"

#include <cmath>
#include <string>

#include "csidiff/errors.hpp"

namespace csidiff {

namespace {

constexpr std::int64_t kGroups = 8;

torch::nn::Conv2dOptions conv3x3(std::int64_t in, std::int64_t out) {
  return torch::nn::Conv2dOptions(in, out, 3).padding(1);
}

void check_4d(const torch::Tensor& x, std::int64_t channels, const char* what) {
  if (x.dim() != 4 || x.size(1) != channels) {
    throw data_error(data_error::kind::shape_mismatch,
                     std::string(what) + ": expected [B," + std::to_string(channels) +
                         ",H,W], got " + std::to_string(x.dim()) + "d tensor");
  }
}

}  // namespace

ArchDescriptor ArchDescriptor::paper_scale(bool side_info) {
  ArchDescriptor d;
  d.use_side_info = side_info;
  return d;
}

ArchDescriptor ArchDescriptor::desk_scale(bool side_info) {
  ArchDescriptor d;
  d.enc_base = 16;
  d.code_dim = 32;
  d.unet_base = 16;
  d.unet_mults = {1, 2};
  d.use_side_info = side_info;
  return d;
}

void ArchDescriptor::validate() const {
  auto mult_of_groups = [](std::int64_t v) { return v >= kGroups && v % kGroups == 0; };
  if (!mult_of_groups(enc_base) || !mult_of_groups(code_dim) || !mult_of_groups(unet_base)) {
    throw config_error("arch: widths must be positive multiples of " + std::to_string(kGroups));
  }
  if (cond_channels < 1) throw config_error("arch: cond_channels must be >= 1");
  if (unet_mults.empty() || unet_mults.size() > 4) {
    throw config_error("arch: unet_mults must hold 1..4 entries");
  }
  for (auto m : unet_mults) {
    if (m < 1) throw config_error("arch: stage multipliers must be >= 1");
  }
}

nlohmann::json ArchDescriptor::to_json() const {
  return {{"enc_base", enc_base},       {"code_dim", code_dim},
          {"cond_channels", cond_channels}, {"unet_base", unet_base},
          {"unet_mults", unet_mults},   {"use_side_info", use_side_info}};
}

ArchDescriptor ArchDescriptor::from_json(const nlohmann::json& j) {
  ArchDescriptor d;
  try {
    d.enc_base = j.at("enc_base").get<std::int64_t>();
    d.code_dim = j.at("code_dim").get<std::int64_t>();
    d.cond_channels = j.at("cond_channels").get<std::int64_t>();
    d.unet_base = j.at("unet_base").get<std::int64_t>();
    d.unet_mults = j.at("unet_mults").get<std::vector<std::int64_t>>();
    d.use_side_info = j.at("use_side_info").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("arch descriptor: ") + e.what());
  }
  d.validate();
  return d;
}

torch::Tensor to_nchw(const torch::Tensor& hwc) {
  if (hwc.dim() == 3) return hwc.permute({2, 0, 1}).unsqueeze(0).contiguous();
  if (hwc.dim() == 4) return hwc.permute({0, 3, 1, 2}).contiguous();
  throw data_error(data_error::kind::shape_mismatch, "to_nchw: expected rank 3 or 4");
}

torch::Tensor to_hwc(const torch::Tensor& nchw) {
  if (nchw.dim() != 4) {
    throw data_error(data_error::kind::shape_mismatch, "to_hwc: expected rank 4");
  }
  return nchw.permute({0, 2, 3, 1}).contiguous();
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

ResnetBlockImpl::ResnetBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t time_dim) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(kGroups, in_ch));
  conv1_ = register_module("conv1", torch::nn::Conv2d(conv3x3(in_ch, out_ch)));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(kGroups, out_ch));
  conv2_ = register_module("conv2", torch::nn::Conv2d(conv3x3(out_ch, out_ch)));
  if (time_dim > 0) {
    time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out_ch));
  }
  if (in_ch != out_ch) {
    skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
  }
}

torch::Tensor ResnetBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  if (time_proj_) {
    if (!temb.defined()) {
      throw data_error(data_error::kind::shape_mismatch,
                       "resnet block built with a time path but called without an embedding");
    }
    h = h + time_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  }
  h = conv2_(torch::silu(norm2_(h)));
  return h + (skip_ ? skip_(x) : x);
}

DownsampleImpl::DownsampleImpl(std::int64_t channels) {
  conv_ = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).stride(2).padding(1)));
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) {
  if (x.size(-1) % 2 != 0 || x.size(-2) % 2 != 0) {
    throw data_error(data_error::kind::shape_mismatch, "downsample: odd spatial size");
  }
  auto out = conv_(x);
  TORCH_INTERNAL_ASSERT(out.size(-1) * 2 == x.size(-1) && out.size(-2) * 2 == x.size(-2));
  return out;
}

UpsampleImpl::UpsampleImpl(std::int64_t channels) {
  conv_ = register_module("conv", torch::nn::ConvTranspose2d(
                                      torch::nn::ConvTranspose2dOptions(channels, channels, 4)
                                          .stride(2)
                                          .padding(1)));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) {
  auto out = conv_(x);
  TORCH_INTERNAL_ASSERT(out.size(-1) == x.size(-1) * 2 && out.size(-2) == x.size(-2) * 2);
  return out;
}

LinearAttentionImpl::LinearAttentionImpl(std::int64_t channels) {
  norm_ = register_module("norm", torch::nn::GroupNorm(kGroups, channels));
  to_qkv_ = register_module(
      "to_qkv",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels * 3, 1).bias(false)));
  to_out_ = register_module("to_out",
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor LinearAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto qkv = to_qkv_(norm_(x)).reshape({b, 3, c, h * w}).unbind(1);
  auto q = qkv[0].softmax(1) * std::pow(static_cast<double>(c), -0.5);
  auto k = qkv[1].softmax(2);
  auto context = torch::bmm(k, qkv[2].transpose(1, 2));          // [B, c, c]
  auto out = torch::bmm(context.transpose(1, 2), q);             // [B, c, hw]
  return x + to_out_(out.reshape({b, c, h, w}));
}

TimeEmbeddingImpl::TimeEmbeddingImpl(std::int64_t n_freqs, std::int64_t out_dim)
    : n_freqs_(n_freqs) {
  lin1_ = register_module("lin1", torch::nn::Linear(2 * n_freqs, out_dim));
  lin2_ = register_module("lin2", torch::nn::Linear(out_dim, out_dim));
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
  if (t.dim() != 1) {
    throw data_error(data_error::kind::shape_mismatch, "time embedding: t must be a [B] vector");
  }
  const auto dtype = lin1_->weight.scalar_type();
  auto steps = t.to(dtype).unsqueeze(1);
  auto idx = torch::arange(n_freqs_, torch::TensorOptions().dtype(dtype));
  auto freqs = torch::exp(idx * (-std::log(10000.0) / static_cast<double>(n_freqs_ - 1)));
  auto args = steps * freqs.unsqueeze(0);
  auto feats = torch::cat({args.sin(), args.cos()}, 1);
  return lin2_(torch::silu(lin1_(feats)));
}

EncoderNetImpl::EncoderNetImpl(const ArchDescriptor& desc) {
  desc.validate();
  conv_in_ = register_module("conv_in", torch::nn::Conv2d(conv3x3(2, desc.enc_base)));
  rnb1_ = register_module("rnb1", ResnetBlock(desc.enc_base, desc.enc_base));
  down1_ = register_module("down1", Downsample(desc.enc_base));
  rnb2_ = register_module("rnb2", ResnetBlock(desc.enc_base, desc.code_dim));
  down2_ = register_module("down2", Downsample(desc.code_dim));
}

torch::Tensor EncoderNetImpl::forward(const torch::Tensor& x) {
  check_4d(x, 2, "encoder");
  if (x.size(2) != 32 || x.size(3) != 32) {
    throw data_error(data_error::kind::shape_mismatch, "encoder: expected 32x32 input");
  }
  auto h = conv_in_(x);
  h = down1_(rnb1_(h));
  h = down2_(rnb2_(h));
  return h;
}

CodeUpProjectorImpl::CodeUpProjectorImpl(const ArchDescriptor& desc) {
  desc.validate();
  const auto w1 = desc.unet_base;
  const auto w2 = std::max<std::int64_t>(desc.unet_base / 2, kGroups);
  rnb1_ = register_module("rnb1", ResnetBlock(desc.code_dim, w1));
  up1_ = register_module("up1", Upsample(w1));
  rnb2_ = register_module("rnb2", ResnetBlock(w1, w2));
  up2_ = register_module("up2", Upsample(w2));
  conv_out_ = register_module("conv_out", torch::nn::Conv2d(conv3x3(w2, desc.cond_channels)));
}

torch::Tensor CodeUpProjectorImpl::forward(const torch::Tensor& code) {
  if (code.dim() != 4 || code.size(2) != 8 || code.size(3) != 8) {
    throw data_error(data_error::kind::shape_mismatch, "up-projector: expected [B,dim,8,8]");
  }
  auto h = up1_(rnb1_(code));
  h = up2_(rnb2_(h));
  return conv_out_(h);
}

UNetImpl::UNetImpl(const ArchDescriptor& desc) : desc_(desc) {
  desc_.validate();
  const auto td = desc_.time_dim();
  time_embed_ = register_module("time_embed", TimeEmbedding(desc_.unet_base, td));
  conv_in_ = register_module("conv_in",
                             torch::nn::Conv2d(conv3x3(desc_.unet_in_channels(), desc_.unet_base)));

  const auto& mults = desc_.unet_mults;
  const auto levels = static_cast<std::int64_t>(mults.size());
  std::int64_t ch = desc_.unet_base;
  std::vector<std::int64_t> level_ch;
  for (std::int64_t i = 0; i < levels; ++i) {
    const auto out = desc_.unet_base * mults[i];
    down_blocks_.push_back(ResnetBlock(ch, out, td));
    register_module("down_rnb" + std::to_string(i), down_blocks_.back());
    level_ch.push_back(out);
    if (i + 1 < levels) {
      downs_.push_back(Downsample(out));
      register_module("down" + std::to_string(i), downs_.back());
    }
    ch = out;
  }

  mid1_ = register_module("mid1", ResnetBlock(ch, ch, td));
  mid_attn_ = register_module("mid_attn", LinearAttention(ch));
  mid2_ = register_module("mid2", ResnetBlock(ch, ch, td));

  for (std::int64_t i = levels - 1; i >= 0; --i) {
    const auto out = desc_.unet_base * mults[std::max<std::int64_t>(i - 1, 0)];
    up_blocks_.push_back(ResnetBlock(ch + level_ch[i], out, td));
    register_module("up_rnb" + std::to_string(i), up_blocks_.back());
    if (i > 0) {
      ups_.push_back(Upsample(out));
      register_module("up" + std::to_string(i), ups_.back());
    }
    ch = out;
  }

  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(kGroups, ch));
  conv_out_ = register_module("conv_out", torch::nn::Conv2d(conv3x3(ch, 2)));
  torch::NoGradGuard no_grad;
  conv_out_->weight.zero_();
  conv_out_->bias.zero_();
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& cond,
                                const std::optional<torch::Tensor>& y, const torch::Tensor& t) {
  check_4d(z_t, 2, "denoiser state");
  check_4d(cond, desc_.cond_channels, "denoiser conditioning");
  if (desc_.use_side_info != y.has_value()) {
    throw data_error(data_error::kind::shape_mismatch,
                     desc_.use_side_info ? "denoiser: side info required but missing"
                                         : "denoiser: side info passed to a model built without it");
  }
  if (t.numel() != z_t.size(0)) {
    throw data_error(data_error::kind::shape_mismatch, "denoiser: one step index per sample");
  }

  torch::Tensor x;
  if (y.has_value()) {
    check_4d(*y, 2, "denoiser side info");
    x = torch::cat({z_t, cond, *y}, 1);
  } else {
    x = torch::cat({z_t, cond}, 1);
  }

  auto temb = time_embed_(t);
  auto h = conv_in_(x);
  std::vector<torch::Tensor> skips;
  for (std::size_t i = 0; i < down_blocks_.size(); ++i) {
    h = down_blocks_[i](h, temb);
    skips.push_back(h);
    if (i < downs_.size()) h = downs_[i](h);
  }

  h = mid2_(mid_attn_(mid1_(h, temb)), temb);

  for (std::size_t j = 0; j < up_blocks_.size(); ++j) {
    const auto level = skips.size() - 1 - j;
    h = torch::cat({h, skips[level]}, 1);
    h = up_blocks_[j](h, temb);
    if (j < ups_.size()) h = ups_[j](h);
  }

  return conv_out_(torch::silu(norm_out_(h)));
}

}  // namespace csidiff
