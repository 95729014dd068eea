#include "csidiff/codec.hpp"

#include <cmath>

#include "csidiff/errors.hpp"
#include "csidiff/transform.hpp"

namespace csidiff {

namespace {

void check_block(const torch::Tensor& block, const char* what) {
  if (block.dim() != 3 || block.size(0) != 32 || block.size(1) != 32 || block.size(2) != 2) {
    throw data_error(data_error::kind::shape_mismatch,
                     std::string(what) + ": expected a [32,32,2] block");
  }
}

}  // namespace

DiffusionCodec DiffusionCodec::create(const ArchDescriptor& desc, std::int64_t n_v,
                                      std::int64_t T, std::uint64_t seed) {
  desc.validate();
  rate_for(n_v);  // validates n_v
  torch::manual_seed(seed);
  DiffusionCodec codec;
  codec.desc = desc;
  codec.encoder = EncoderNet(desc);
  codec.upproj = CodeUpProjector(desc);
  codec.unet = UNet(desc);
  codec.codebook = Codebook::init(n_v, desc.code_dim);
  codec.codebook.vectors.requires_grad_(true);
  codec.schedule = cosine_schedule(T);
  return codec;
}

Codeword DiffusionCodec::encode(const torch::Tensor& x_ad) {
  check_block(x_ad, "encode");
  torch::NoGradGuard no_grad;
  auto x = to_nchw(x_ad / norm_scale);
  auto code = encoder->forward(x);  // [1, dim, 8, 8]
  auto vecs = code.squeeze(0).permute({1, 2, 0}).reshape({kCodeVectors, desc.code_dim});
  auto [word, e] = quantize(vecs, codebook);
  return word;
}

torch::Tensor DiffusionCodec::decode(const Codeword& word,
                                     const std::optional<torch::Tensor>& y_ad) {
  if (word.n_v != codebook.n_vectors()) {
    throw data_error(data_error::kind::shape_mismatch,
                     "decode: codeword N_v " + std::to_string(word.n_v) +
                         " does not match the checkpoint codebook (" +
                         std::to_string(codebook.n_vectors()) + ")");
  }
  if (desc.use_side_info != y_ad.has_value()) {
    throw data_error(data_error::kind::shape_mismatch,
                     desc.use_side_info ? "decode: side info required but missing"
                                        : "decode: side info passed but the model has none");
  }
  torch::NoGradGuard no_grad;
  auto e = dequantize(word, codebook);  // [8, 8, dim]
  auto cond = upproj->forward(to_nchw(e));

  std::optional<torch::Tensor> y;
  if (y_ad.has_value()) {
    check_block(*y_ad, "decode side info");
    y = to_nchw(*y_ad / norm_scale);
  }

  auto denoise = [&](const torch::Tensor& z_t, std::int64_t t) {
    auto steps = torch::full({z_t.size(0)}, t, torch::kLong);
    return unet->forward(z_t, cond, y, steps);
  };
  auto z0 = ddim_loop(denoise, {1, 2, 32, 32}, schedule);
  return to_hwc(z0).squeeze(0) * norm_scale;
}

std::vector<torch::Tensor> DiffusionCodec::trainable_parameters() {
  std::vector<torch::Tensor> params;
  for (const auto& p : encoder->parameters()) params.push_back(p);
  for (const auto& p : upproj->parameters()) params.push_back(p);
  for (const auto& p : unet->parameters()) params.push_back(p);
  params.push_back(codebook.vectors);
  return params;
}

void DiffusionCodec::train_mode(bool on) {
  encoder->train(on);
  upproj->train(on);
  unet->train(on);
}

CheckpointData DiffusionCodec::to_checkpoint() {
  CheckpointData data;
  data.meta["kind"] = "diffusion-codec";
  data.meta["arch"] = desc.to_json();
  data.meta["n_v"] = codebook.n_vectors();
  data.meta["T"] = schedule.T;
  data.meta["norm_scale"] = norm_scale;
  for (const auto& item : encoder->named_parameters()) {
    data.tensors.emplace_back("encoder." + item.key(), item.value());
  }
  for (const auto& item : upproj->named_parameters()) {
    data.tensors.emplace_back("upproj." + item.key(), item.value());
  }
  for (const auto& item : unet->named_parameters()) {
    data.tensors.emplace_back("unet." + item.key(), item.value());
  }
  data.tensors.emplace_back("codebook.vectors", codebook.vectors);
  return data;
}

DiffusionCodec DiffusionCodec::from_checkpoint(const CheckpointData& data) {
  if (!data.meta.contains("kind") || data.meta["kind"] != "diffusion-codec") {
    throw data_error(data_error::kind::malformed_header,
                     "checkpoint: not a diffusion codec checkpoint");
  }
  const auto desc = ArchDescriptor::from_json(data.meta.at("arch"));
  const auto n_v = data.meta.at("n_v").get<std::int64_t>();
  const auto T = data.meta.at("T").get<std::int64_t>();
  auto codec = create(desc, n_v, T);
  codec.norm_scale = data.meta.at("norm_scale").get<float>();

  torch::NoGradGuard no_grad;
  auto restore = [&](torch::nn::Module& module, const std::string& prefix) {
    for (auto& p : module.named_parameters()) {
      const auto& saved = data.tensor(prefix + p.key());
      if (saved.sizes() != p.value().sizes()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "checkpoint: shape mismatch for " + prefix + p.key());
      }
      p.value().copy_(saved);
    }
  };
  restore(*codec.encoder, "encoder.");
  restore(*codec.upproj, "upproj.");
  restore(*codec.unet, "unet.");
  const auto& book = data.tensor("codebook.vectors");
  if (book.sizes() != codec.codebook.vectors.sizes()) {
    throw data_error(data_error::kind::shape_mismatch, "checkpoint: codebook shape mismatch");
  }
  codec.codebook.vectors.copy_(book);
  return codec;
}

}  // namespace csidiff
