#include "csidiff/transform.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "csidiff/errors.hpp"

namespace csidiff {

namespace {

void check_raw(const torch::Tensor& raw) {
  if (raw.dim() != 2 || raw.size(0) != kAngularBins) {
    throw data_error(data_error::kind::shape_mismatch,
                     "to_angular_delay: expected complex [32 x N_sc] matrix");
  }
  if (raw.size(1) < kDelayBins) {
    throw data_error(data_error::kind::shape_mismatch,
                     "to_angular_delay: N_sc must be >= 32");
  }
  if (!raw.is_complex()) {
    throw data_error(data_error::kind::shape_mismatch, "to_angular_delay: input must be complex");
  }
}

}  // namespace

AngularDelayBlock to_angular_delay(const torch::Tensor& raw) {
  check_raw(raw);
  auto ad = torch::fft::ifft2(raw, std::nullopt, {-2, -1}, "ortho");
  ad = ad.index({torch::indexing::Slice(), torch::indexing::Slice(0, kDelayBins)});
  AngularDelayBlock block;
  block.data = torch::view_as_real(ad.contiguous()).to(torch::kFloat).contiguous();
  block.scale = 1.0f;
  return block;
}

torch::Tensor from_angular_delay(const AngularDelayBlock& block, std::int64_t n_subcarriers) {
  if (n_subcarriers < kDelayBins) {
    throw data_error(data_error::kind::shape_mismatch, "from_angular_delay: N_sc must be >= 32");
  }
  if (!block.data.defined() || block.data.dim() != 3 || block.data.size(0) != kAngularBins ||
      block.data.size(1) != kDelayBins || block.data.size(2) != 2) {
    throw data_error(data_error::kind::shape_mismatch,
                     "from_angular_delay: expected [32 x 32 x 2] block");
  }
  auto c = torch::view_as_complex(block.data.to(torch::kFloat).contiguous());
  c = torch::constant_pad_nd(c, {0, n_subcarriers - kDelayBins});
  return torch::fft::fft2(c, std::nullopt, {-2, -1}, "ortho");
}

void preprocess_dataset(Dataset& dataset) {
  for (auto& s : dataset.samples) {
    if (!s.has_raw()) continue;
    s.x_ad = to_angular_delay(s.x_raw).data;
    s.z_ad = to_angular_delay(s.z_raw).data;
    if (s.y_raw.defined()) s.y_ad = to_angular_delay(s.y_raw).data;
  }
}

double nmse(const torch::Tensor& z, const torch::Tensor& z_hat) {
  if (!z.sizes().equals(z_hat.sizes())) {
    throw data_error(data_error::kind::shape_mismatch, "nmse: shape mismatch");
  }
  auto zd = z.to(torch::kDouble);
  auto hd = z_hat.to(torch::kDouble);
  if (zd.dim() < 4) {
    zd = zd.unsqueeze(0);
    hd = hd.unsqueeze(0);
  }
  const std::int64_t n = zd.size(0);
  zd = zd.reshape({n, -1});
  hd = hd.reshape({n, -1});
  auto num = (zd - hd).pow(2).sum(1);
  auto den = zd.pow(2).sum(1);
  if (den.min().item<double>() <= 0.0) {
    throw numerical_error("nmse: all-zero reference sample");
  }
  return (num / den).mean().item<double>();
}

double nmse_db(double linear) { return 10.0 * std::log10(std::max(linear, 1e-12)); }

double nmse_db(const torch::Tensor& z, const torch::Tensor& z_hat) {
  return nmse_db(nmse(z, z_hat));
}

float compute_norm_scale(const Dataset& dataset) {
  std::vector<torch::Tensor> parts;
  for (const auto& s : dataset.samples) {
    if (s.x_ad.defined()) parts.push_back(s.x_ad.reshape(-1));
    if (s.y_ad.defined()) parts.push_back(s.y_ad.reshape(-1));
    if (s.z_ad.defined()) parts.push_back(s.z_ad.reshape(-1));
  }
  if (parts.empty()) {
    throw data_error(data_error::kind::shape_mismatch,
                     "compute_norm_scale: dataset has no angular-delay data");
  }
  auto flat = torch::cat(parts).abs().to(torch::kFloat);
  // quantile() is O(n log n); a strided subsample is plenty for a percentile.
  constexpr std::int64_t kMaxEntries = 1 << 23;
  if (flat.numel() > kMaxEntries) {
    const std::int64_t stride = (flat.numel() + kMaxEntries - 1) / kMaxEntries;
    flat = flat.index({torch::indexing::Slice(0, torch::indexing::None, stride)});
  }
  const float q = torch::quantile(flat.to(torch::kDouble), 0.999).item<float>();
  return q > 0.0f ? q : 1.0f;
}

AngularDelayBlock normalize(const AngularDelayBlock& block, float scale) {
  if (scale <= 0.0f) throw config_error("normalize: scale must be > 0");
  AngularDelayBlock out;
  out.data = block.data / scale;
  out.scale = block.scale * scale;
  return out;
}

AngularDelayBlock denormalize(const AngularDelayBlock& block) {
  AngularDelayBlock out;
  out.data = block.data * block.scale;
  out.scale = 1.0f;
  return out;
}

}  // namespace csidiff
