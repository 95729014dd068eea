#include "csidiff/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "csidiff/errors.hpp"
#include "csidiff/transform.hpp"

namespace csidiff {

namespace {

constexpr std::int64_t kFlatSize = 2 * kAngularBins * kDelayBins;

void check_block(const torch::Tensor& t, const char* what) {
  if (!t.defined() || t.dim() != 3 || t.size(0) != kAngularBins || t.size(1) != kDelayBins ||
      t.size(2) != 2) {
    throw data_error(data_error::kind::shape_mismatch,
                     std::string(what) + " must be a [32, 32, 2] angular-delay block");
  }
}

std::shared_ptr<torch::optim::Adam> make_optimizer(BaselineCodec& codec,
                                                   const TrainingConfig& config) {
  auto options = torch::optim::AdamOptions(config.learning_rate)
                     .betas({config.adam_beta1, config.adam_beta2})
                     .eps(config.adam_eps);
  return std::make_shared<torch::optim::Adam>(codec.trainable_parameters(), options);
}

}  // namespace

void BaselineConfig::validate() const {
  if (n_clf < 1) throw config_error("n_clf must be >= 1");
  if (bits_per_element < 1 || bits_per_element > 16) {
    throw config_error("bits_per_element must lie in [1, 16]");
  }
  if (base_width < 8 || base_width % 8 != 0) {
    throw config_error("base_width must be a positive multiple of 8");
  }
}

nlohmann::json BaselineConfig::to_json() const {
  return {
      {"n_clf", n_clf},
      {"bits_per_element", bits_per_element},
      {"base_width", base_width},
      {"use_side_info", use_side_info},
  };
}

BaselineConfig BaselineConfig::from_json(const nlohmann::json& j) {
  BaselineConfig c;
  try {
    c.n_clf = j.value("n_clf", c.n_clf);
    c.bits_per_element = j.value("bits_per_element", c.bits_per_element);
    c.base_width = j.value("base_width", c.base_width);
    c.use_side_info = j.value("use_side_info", c.use_side_info);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("bad baseline config document: ") + e.what());
  }
  c.validate();
  return c;
}

std::pair<std::int64_t, double> uniform_quantize(double v, std::int64_t bits) {
  if (bits < 1 || bits > 16) throw config_error("bits must lie in [1, 16]");
  const auto n_levels = std::int64_t{1} << bits;
  const double clamped = std::min(1.0, std::max(-1.0, v));
  auto level = static_cast<std::int64_t>(std::floor((clamped + 1.0) / 2.0 *
                                                    static_cast<double>(n_levels)));
  level = std::min(n_levels - 1, std::max<std::int64_t>(0, level));
  return {level, uniform_dequantize(level, bits)};
}

double uniform_dequantize(std::int64_t level, std::int64_t bits) {
  if (bits < 1 || bits > 16) throw config_error("bits must lie in [1, 16]");
  const auto n_levels = std::int64_t{1} << bits;
  level = std::min(n_levels - 1, std::max<std::int64_t>(0, level));
  return (static_cast<double>(level) + 0.5) / static_cast<double>(n_levels) * 2.0 - 1.0;
}

torch::Tensor uniform_quantize_levels(const torch::Tensor& v, std::int64_t bits) {
  if (bits < 1 || bits > 16) throw config_error("bits must lie in [1, 16]");
  const auto n_levels = static_cast<double>(std::int64_t{1} << bits);
  auto clamped = v.to(torch::kDouble).clamp(-1.0, 1.0);
  return ((clamped + 1.0) / 2.0 * n_levels).floor().clamp(0.0, n_levels - 1.0).to(torch::kLong);
}

torch::Tensor uniform_dequantize_levels(const torch::Tensor& levels, std::int64_t bits) {
  if (bits < 1 || bits > 16) throw config_error("bits must lie in [1, 16]");
  const auto n_levels = static_cast<double>(std::int64_t{1} << bits);
  auto deq = (levels.to(torch::kDouble) + 0.5) / n_levels * 2.0 - 1.0;
  return deq.to(torch::kFloat);
}

torch::Tensor uniform_quantize_straight_through(const torch::Tensor& v, std::int64_t bits) {
  auto deq = uniform_dequantize_levels(uniform_quantize_levels(v, bits), bits)
                 .to(v.scalar_type());
  return v + (deq - v).detach();
}

BaselineEncoderImpl::BaselineEncoderImpl(const BaselineConfig& config) {
  config.validate();
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, config.base_width, 3).padding(1)));
  conv2_ = register_module(
      "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.base_width, 2, 3).padding(1)));
  fc_ = register_module("fc", torch::nn::Linear(kFlatSize, config.n_clf));
}

torch::Tensor BaselineEncoderImpl::forward(const torch::Tensor& x) {
  if (!x.defined() || x.dim() != 4 || x.size(1) != 2 || x.size(2) != kAngularBins ||
      x.size(3) != kDelayBins) {
    throw data_error(data_error::kind::shape_mismatch,
                     "baseline encoder expects [B, 2, 32, 32] input");
  }
  auto h = torch::silu(conv1_->forward(x));
  h = torch::silu(conv2_->forward(h));
  return torch::tanh(fc_->forward(h.flatten(1)));
}

BaselineDecoderImpl::BaselineDecoderImpl(const BaselineConfig& config) : config_(config) {
  config.validate();
  fc_ = register_module("fc", torch::nn::Linear(config.n_clf, kFlatSize));
  const std::int64_t in_ch = config.use_side_info ? 4 : 2;
  conv_in_ = register_module(
      "conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, config.base_width, 3).padding(1)));
  for (int i = 0; i < 2; ++i) {
    refine_.push_back(ResnetBlock(config.base_width, config.base_width));
    register_module("refine" + std::to_string(i), refine_.back());
  }
  conv_out_ = register_module(
      "conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.base_width, 2, 3).padding(1)));
}

torch::Tensor BaselineDecoderImpl::forward(const torch::Tensor& latent,
                                           const std::optional<torch::Tensor>& y) {
  if (!latent.defined() || latent.dim() != 2 || latent.size(1) != config_.n_clf) {
    throw data_error(data_error::kind::shape_mismatch,
                     "baseline decoder expects a [B, n_clf] latent");
  }
  if (config_.use_side_info != y.has_value()) {
    throw data_error(data_error::kind::shape_mismatch,
                     config_.use_side_info ? "baseline decoder requires side information"
                                           : "baseline decoder takes no side information");
  }
  auto h = fc_->forward(latent).reshape({latent.size(0), 2, kAngularBins, kDelayBins});
  if (y.has_value()) {
    if (y->dim() != 4 || y->size(0) != latent.size(0) || y->size(1) != 2 ||
        y->size(2) != kAngularBins || y->size(3) != kDelayBins) {
      throw data_error(data_error::kind::shape_mismatch,
                       "side information must be [B, 2, 32, 32]");
    }
    h = torch::cat({h, *y}, 1);
  }
  h = conv_in_->forward(h);
  for (auto& block : refine_) h = block->forward(h);
  return torch::tanh(conv_out_->forward(torch::silu(h)));
}

BaselineCodec BaselineCodec::create(const BaselineConfig& config, std::uint64_t seed) {
  config.validate();
  torch::manual_seed(seed);
  BaselineCodec codec;
  codec.config = config;
  codec.encoder = BaselineEncoder(config);
  codec.decoder = BaselineDecoder(config);
  return codec;
}

BitString BaselineCodec::encode(const torch::Tensor& x_ad) {
  check_block(x_ad, "encoder input");
  torch::NoGradGuard no_grad;
  auto x = to_nchw(x_ad / norm_scale);
  auto latent = encoder->forward(x).squeeze(0);
  auto levels = uniform_quantize_levels(latent, config.bits_per_element).contiguous();
  std::vector<std::uint32_t> values(static_cast<std::size_t>(levels.numel()));
  const auto* ptr = levels.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<std::uint32_t>(ptr[i]);
  return pack_fixed_width(values, config.bits_per_element);
}

torch::Tensor BaselineCodec::decode(const BitString& bits,
                                    const std::optional<torch::Tensor>& y_ad) {
  if (bits.n_bits != static_cast<std::uint64_t>(rate_bits())) {
    std::ostringstream msg;
    msg << "codeword holds " << bits.n_bits << " bits but the configuration requires "
        << rate_bits();
    throw data_error(data_error::kind::shape_mismatch, msg.str());
  }
  if (config.use_side_info != y_ad.has_value()) {
    throw data_error(data_error::kind::shape_mismatch,
                     config.use_side_info ? "decoding requires side information"
                                          : "unexpected side information");
  }
  auto values = unpack_fixed_width(bits, config.bits_per_element);
  torch::NoGradGuard no_grad;
  auto levels = torch::empty({static_cast<std::int64_t>(values.size())}, torch::kLong);
  auto* ptr = levels.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < values.size(); ++i) ptr[i] = static_cast<std::int64_t>(values[i]);
  auto latent = uniform_dequantize_levels(levels, config.bits_per_element).unsqueeze(0);
  std::optional<torch::Tensor> y;
  if (y_ad.has_value()) {
    check_block(*y_ad, "side information");
    y = to_nchw(*y_ad / norm_scale);
  }
  auto out = decoder->forward(latent, y);
  return to_hwc(out).squeeze(0) * norm_scale;
}

std::vector<torch::Tensor> BaselineCodec::trainable_parameters() {
  std::vector<torch::Tensor> params;
  for (const auto& p : encoder->parameters()) params.push_back(p);
  for (const auto& p : decoder->parameters()) params.push_back(p);
  return params;
}

void BaselineCodec::train_mode(bool on) {
  encoder->train(on);
  decoder->train(on);
}

CheckpointData BaselineCodec::to_checkpoint() {
  CheckpointData data;
  data.meta["kind"] = "baseline-codec";
  data.meta["config"] = config.to_json();
  data.meta["norm_scale"] = norm_scale;
  for (const auto& item : encoder->named_parameters()) {
    data.tensors.emplace_back("encoder." + item.key(), item.value());
  }
  for (const auto& item : decoder->named_parameters()) {
    data.tensors.emplace_back("decoder." + item.key(), item.value());
  }
  return data;
}

BaselineCodec BaselineCodec::from_checkpoint(const CheckpointData& data) {
  BaselineConfig config;
  float scale = 1.0f;
  try {
    if (data.meta.at("kind").get<std::string>() != "baseline-codec") {
      throw data_error(data_error::kind::malformed_header, "not a baseline codec checkpoint");
    }
    config = BaselineConfig::from_json(data.meta.at("config"));
    scale = data.meta.at("norm_scale").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("bad baseline checkpoint metadata: ") + e.what());
  }
  auto codec = create(config);
  codec.norm_scale = scale;
  torch::NoGradGuard no_grad;
  auto restore = [&](const std::string& prefix, torch::nn::Module& module) {
    for (const auto& item : module.named_parameters()) {
      const auto& stored = data.tensor(prefix + item.key());
      if (stored.sizes() != item.value().sizes()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "checkpoint tensor " + prefix + item.key() + " has the wrong shape");
      }
      item.value().copy_(stored);
    }
  };
  restore("encoder.", *codec.encoder);
  restore("decoder.", *codec.decoder);
  return codec;
}

BaselineTrainState BaselineTrainState::init(const TrainingConfig& config,
                                            const BaselineConfig& arch) {
  config.validate();
  arch.validate();
  if (arch.use_side_info != config.use_side_info) {
    throw config_error("training config and baseline config disagree on side info");
  }
  BaselineTrainState state{BaselineCodec::create(arch, config.seed), config};
  state.optimizer = make_optimizer(state.codec, config);
  return state;
}

StepStats baseline_train_step(BaselineTrainState& state, const Batch& batch) {
  if (!state.optimizer) throw config_error("train state has no optimizer; build it with init");
  auto& codec = state.codec;
  codec.train_mode(true);
  auto latent = codec.encoder->forward(batch.x);
  auto quantized = uniform_quantize_straight_through(latent, codec.config.bits_per_element);
  auto out = codec.decoder->forward(quantized, batch.y);
  auto loss = (batch.z - out).pow(2).mean();

  StepStats stats;
  stats.loss = loss.item<double>();
  stats.denoise_loss = stats.loss;
  stats.cb_loss = 0.0;
  if (!std::isfinite(stats.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step + 1 << ": loss=" << stats.loss;
    throw numerical_error(msg.str());
  }

  state.optimizer->zero_grad();
  loss.backward();
  if (state.config.grad_clip > 0) {
    auto params = codec.trainable_parameters();
    torch::nn::utils::clip_grad_norm_(params, state.config.grad_clip);
  }
  state.optimizer->step();
  ++state.step;
  return stats;
}

double baseline_validation_nmse_db(BaselineCodec& codec, const Dataset& split) {
  if (split.size() == 0) throw config_error("validation split is empty");
  const bool was_training = codec.encoder->is_training();
  codec.train_mode(false);
  std::vector<torch::Tensor> targets, recons;
  targets.reserve(split.size());
  recons.reserve(split.size());
  for (const auto& s : split.samples) {
    if (!s.x_ad.defined() || !s.z_ad.defined()) {
      throw data_error(data_error::kind::shape_mismatch,
                       "validation sample lacks angular-delay fields");
    }
    auto bits = codec.encode(s.x_ad);
    std::optional<torch::Tensor> y;
    if (codec.config.use_side_info) {
      if (!s.y_ad.defined()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "validation sample has no side information");
      }
      y = s.y_ad;
    }
    targets.push_back(s.z_ad);
    recons.push_back(codec.decode(bits, y));
  }
  codec.train_mode(was_training);
  return nmse_db(torch::stack(targets, 0), torch::stack(recons, 0));
}

void baseline_continue_training(BaselineTrainState& state, const Dataset& train_split,
                                const Dataset* val_split, const std::string& checkpoint_path) {
  const auto& cfg = state.config;
  if (state.step < cfg.n_train && train_split.size() == 0) {
    throw config_error("training requires a non-empty dataset");
  }
  state.codec.train_mode(true);
  while (state.step < cfg.n_train) {
    auto indices = draw_epoch_indices(state.epoch_perm, state.cursor, cfg.batch_size,
                                      static_cast<std::int64_t>(train_split.size()));
    auto batch = make_batch(train_split, indices, state.codec.norm_scale, cfg.use_side_info);
    auto stats = baseline_train_step(state, batch);
    MetricsRow row;
    row.step = state.step;
    row.loss = stats.loss;
    row.denoise_loss = stats.denoise_loss;
    row.cb_loss = stats.cb_loss;
    if (val_split != nullptr && cfg.val_every > 0 && state.step % cfg.val_every == 0) {
      row.val_nmse_db = baseline_validation_nmse_db(state.codec, *val_split);
      state.codec.train_mode(true);
    }
    state.log.push_back(row);
    if (!checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        state.step % cfg.checkpoint_every == 0 && state.step < cfg.n_train) {
      save_baseline_checkpoint(state, checkpoint_path);
    }
  }
  if (!checkpoint_path.empty()) save_baseline_checkpoint(state, checkpoint_path);
}

BaselineTrainState baseline_train(const TrainingConfig& config, const BaselineConfig& arch,
                                  const Dataset& train_split, const Dataset* val_split,
                                  const std::string& checkpoint_path) {
  auto state = BaselineTrainState::init(config, arch);
  if (config.n_train > 0) {
    if (train_split.size() == 0) throw config_error("training requires a non-empty dataset");
    state.codec.norm_scale = compute_norm_scale(train_split);
  }
  baseline_continue_training(state, train_split, val_split, checkpoint_path);
  return state;
}

void save_baseline_checkpoint(BaselineTrainState& state, const std::string& path) {
  auto data = state.codec.to_checkpoint();
  data.meta["train"] = {
      {"config", state.config.to_json()},
      {"step", state.step},
      {"cursor", state.cursor},
  };
  data.tensors.emplace_back(
      "train.epoch_perm",
      state.epoch_perm.defined() ? state.epoch_perm : torch::zeros({0}, torch::kLong));
  data.tensors.emplace_back("train.log", metrics_to_tensor(state.log));
  data.tensors.emplace_back("train.rng_state",
                            at::detail::getDefaultCPUGenerator().get_state());
  data.tensors.emplace_back("train.optim_blob", optimizer_blob(*state.optimizer));
  write_checkpoint(path, data);
}

BaselineTrainState load_baseline_checkpoint(const std::string& path) {
  auto data = read_checkpoint(path);
  TrainingConfig cfg;
  std::int64_t step = 0;
  std::int64_t cursor = 0;
  try {
    const auto& tr = data.meta.at("train");
    cfg = TrainingConfig::from_json(tr.at("config"));
    step = tr.at("step").get<std::int64_t>();
    cursor = tr.at("cursor").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("checkpoint lacks a usable training section: ") + e.what());
  }

  BaselineTrainState state{BaselineCodec::from_checkpoint(data), cfg};
  state.step = step;
  state.cursor = cursor;
  auto perm = data.tensor("train.epoch_perm");
  state.epoch_perm = perm.numel() > 0 ? perm.clone() : torch::Tensor();
  state.log = metrics_from_tensor(data.tensor("train.log"));
  state.optimizer = make_optimizer(state.codec, cfg);
  load_optimizer_blob(*state.optimizer, data.tensor("train.optim_blob"));

  at::Generator gen = at::detail::getDefaultCPUGenerator();
  gen.set_state(data.tensor("train.rng_state").clone());
  return state;
}

}  // namespace csidiff
