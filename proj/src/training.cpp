#include "csidiff/training.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <limits>
#include <sstream>

#include "csidiff/errors.hpp"
#include "csidiff/transform.hpp"

namespace csidiff {

namespace {

constexpr double kWeightFloor = 1e-12;

std::shared_ptr<torch::optim::Adam> make_optimizer(DiffusionCodec& codec,
                                                   const TrainingConfig& config) {
  auto options = torch::optim::AdamOptions(config.learning_rate)
                     .betas({config.adam_beta1, config.adam_beta2})
                     .eps(config.adam_eps);
  return std::make_shared<torch::optim::Adam>(codec.trainable_parameters(), options);
}

}  // namespace

std::vector<std::int64_t> draw_epoch_indices(torch::Tensor& perm, std::int64_t& cursor,
                                             std::int64_t batch_size, std::int64_t n_samples) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  while (out.size() < static_cast<std::size_t>(batch_size)) {
    if (!perm.defined() || cursor >= perm.numel()) {
      perm = torch::randperm(n_samples, torch::kLong);
      cursor = 0;
    }
    out.push_back(perm[cursor].item<std::int64_t>());
    ++cursor;
  }
  return out;
}

torch::Tensor metrics_to_tensor(const std::vector<MetricsRow>& rows) {
  auto t = torch::empty({static_cast<std::int64_t>(rows.size()), 5}, torch::kDouble);
  auto acc = t.accessor<double, 2>();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    acc[i][0] = static_cast<double>(rows[i].step);
    acc[i][1] = rows[i].loss;
    acc[i][2] = rows[i].denoise_loss;
    acc[i][3] = rows[i].cb_loss;
    acc[i][4] = rows[i].val_nmse_db;
  }
  return t;
}

std::vector<MetricsRow> metrics_from_tensor(const torch::Tensor& t) {
  if (t.dim() != 2 || t.size(1) != 5) {
    throw data_error(data_error::kind::shape_mismatch, "metrics log tensor must be [n, 5]");
  }
  auto td = t.to(torch::kDouble).contiguous();
  auto acc = td.accessor<double, 2>();
  std::vector<MetricsRow> rows(static_cast<std::size_t>(td.size(0)));
  for (std::int64_t i = 0; i < td.size(0); ++i) {
    rows[i].step = static_cast<std::int64_t>(acc[i][0]);
    rows[i].loss = acc[i][1];
    rows[i].denoise_loss = acc[i][2];
    rows[i].cb_loss = acc[i][3];
    rows[i].val_nmse_db = acc[i][4];
  }
  return rows;
}

// Hand-rolled Adam state layout, little-endian, parameters in group order:
//   u64 n_params | per param: u8 has_state, then i64 step, u8 has_max,
//   u64 numel + f32 data for exp_avg, exp_avg_sq, [max_exp_avg_sq].
// torch's own optimizer archive keys entries by TensorImpl addresses, which
// makes its bytes differ between runs; this format is reproducible.
torch::Tensor optimizer_blob(const torch::optim::Optimizer& opt) {
  std::ostringstream os(std::ios::binary);
  auto put = [&os](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  auto put_tensor = [&](const torch::Tensor& t) {
    auto c = t.to(torch::kFloat).contiguous();
    put(static_cast<std::uint64_t>(c.numel()));
    os.write(static_cast<const char*>(c.data_ptr()),
             static_cast<std::streamsize>(c.numel() * sizeof(float)));
  };

  std::vector<torch::Tensor> params;
  for (const auto& group : opt.param_groups()) {
    for (const auto& p : group.params()) params.push_back(p);
  }
  put(static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params) {
    auto it = opt.state().find(p.unsafeGetTensorImpl());
    const std::uint8_t has_state = it != opt.state().end() ? 1 : 0;
    put(has_state);
    if (!has_state) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    put(static_cast<std::int64_t>(s.step()));
    const std::uint8_t has_max = s.max_exp_avg_sq().defined() ? 1 : 0;
    put(has_max);
    put_tensor(s.exp_avg());
    put_tensor(s.exp_avg_sq());
    if (has_max) put_tensor(s.max_exp_avg_sq());
  }

  const std::string blob = os.str();
  auto blob_t = torch::empty({static_cast<std::int64_t>(blob.size())}, torch::kByte);
  std::memcpy(blob_t.data_ptr(), blob.data(), blob.size());
  return blob_t;
}

void load_optimizer_blob(torch::optim::Optimizer& opt, const torch::Tensor& blob) {
  auto bytes = blob.contiguous();
  if (bytes.numel() == 0) return;
  std::istringstream is(std::string(reinterpret_cast<const char*>(bytes.data_ptr<std::uint8_t>()),
                                    static_cast<std::size_t>(bytes.numel())),
                        std::ios::binary);
  auto get = [&is](auto& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw data_error(data_error::kind::truncated, "optimizer state ends early");
  };
  auto get_tensor = [&](const torch::Tensor& like) {
    std::uint64_t numel = 0;
    get(numel);
    if (numel != static_cast<std::uint64_t>(like.numel())) {
      throw data_error(data_error::kind::shape_mismatch,
                       "optimizer state numel " + std::to_string(numel) +
                           " does not match the parameter's " + std::to_string(like.numel()));
    }
    auto t = torch::empty(like.sizes(), torch::kFloat);
    is.read(static_cast<char*>(t.data_ptr()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw data_error(data_error::kind::truncated, "optimizer state ends early");
    return t;
  };

  std::vector<torch::Tensor> params;
  for (const auto& group : opt.param_groups()) {
    for (const auto& p : group.params()) params.push_back(p);
  }
  std::uint64_t n = 0;
  get(n);
  if (n != params.size()) {
    throw data_error(data_error::kind::shape_mismatch,
                     "optimizer state holds " + std::to_string(n) + " parameters, expected " +
                         std::to_string(params.size()));
  }
  opt.state().clear();
  for (const auto& p : params) {
    std::uint8_t has_state = 0;
    get(has_state);
    if (!has_state) continue;
    std::int64_t step = 0;
    std::uint8_t has_max = 0;
    get(step);
    get(has_max);
    auto state = std::make_unique<torch::optim::AdamParamState>();
    state->step(step);
    state->exp_avg(get_tensor(p));
    state->exp_avg_sq(get_tensor(p));
    if (has_max) state->max_exp_avg_sq(get_tensor(p));
    opt.state()[p.unsafeGetTensorImpl()] = std::move(state);
  }
}

void TrainingConfig::validate() const {
  if (eta < 0) throw config_error("eta must be >= 0");
  if (n_train < 0) throw config_error("n_train must be >= 0");
  if (batch_size < 1) throw config_error("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw config_error("learning_rate must be > 0");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1) {
    throw config_error("adam decay rates must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw config_error("adam_eps must be > 0");
  if (grad_clip < 0) throw config_error("grad_clip must be >= 0");
  if (T < 1) throw config_error("T must be >= 1");
  rate_for(n_v);
  if (val_every < 0) throw config_error("val_every must be >= 0");
  if (checkpoint_every < 0) throw config_error("checkpoint_every must be >= 0");
}

nlohmann::json TrainingConfig::to_json() const {
  return {
      {"eta", eta},
      {"n_train", n_train},
      {"batch_size", batch_size},
      {"learning_rate", learning_rate},
      {"adam_beta1", adam_beta1},
      {"adam_beta2", adam_beta2},
      {"adam_eps", adam_eps},
      {"grad_clip", grad_clip},
      {"T", T},
      {"n_v", n_v},
      {"val_every", val_every},
      {"checkpoint_every", checkpoint_every},
      {"seed", seed},
      {"use_side_info", use_side_info},
  };
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
  TrainingConfig c;
  try {
    c.eta = j.value("eta", c.eta);
    c.n_train = j.value("n_train", c.n_train);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.T = j.value("T", c.T);
    c.n_v = j.value("n_v", c.n_v);
    c.val_every = j.value("val_every", c.val_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.seed = j.value("seed", c.seed);
    c.use_side_info = j.value("use_side_info", c.use_side_info);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("bad training config document: ") + e.what());
  }
  c.validate();
  return c;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream oss;
  oss << "step,loss,denoise_loss,cb_loss,val_nmse_db\n";
  oss << std::setprecision(10);
  for (const auto& r : rows) {
    oss << r.step << ',' << r.loss << ',' << r.denoise_loss << ',' << r.cb_loss << ',';
    if (std::isfinite(r.val_nmse_db)) oss << r.val_nmse_db;
    oss << '\n';
  }
  return oss.str();
}

Batch make_batch(const Dataset& dataset, const std::vector<std::int64_t>& indices, float scale,
                 bool side_info) {
  if (indices.empty()) throw config_error("a batch needs at least one sample");
  if (!(scale > 0)) throw config_error("normalization scale must be > 0");
  std::vector<torch::Tensor> xs, zs, ys;
  xs.reserve(indices.size());
  zs.reserve(indices.size());
  if (side_info) ys.reserve(indices.size());
  for (auto idx : indices) {
    if (idx < 0 || idx >= static_cast<std::int64_t>(dataset.size())) {
      throw config_error("sample index " + std::to_string(idx) + " is out of range");
    }
    const auto& s = dataset.samples[static_cast<std::size_t>(idx)];
    if (!s.x_ad.defined() || !s.z_ad.defined()) {
      throw data_error(data_error::kind::shape_mismatch,
                       "sample lacks angular-delay fields; preprocess the dataset first");
    }
    xs.push_back(s.x_ad);
    zs.push_back(s.z_ad);
    if (side_info) {
      if (!s.y_ad.defined()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "side information requested but the sample has none");
      }
      ys.push_back(s.y_ad);
    }
  }
  Batch batch;
  batch.x = to_nchw(torch::stack(xs, 0).div(scale));
  batch.z = to_nchw(torch::stack(zs, 0).div(scale));
  if (side_info) batch.y = to_nchw(torch::stack(ys, 0).div(scale));
  return batch;
}

TrainState TrainState::init(const TrainingConfig& config, const ArchDescriptor& desc) {
  config.validate();
  desc.validate();
  if (desc.use_side_info != config.use_side_info) {
    throw config_error("training config and architecture descriptor disagree on side info");
  }
  TrainState state{DiffusionCodec::create(desc, config.n_v, config.T, config.seed), config};
  state.usage_counts.assign(static_cast<std::size_t>(config.n_v), 0);
  state.optimizer = make_optimizer(state.codec, config);
  return state;
}

StepStats train_step(TrainState& state, const Batch& batch) {
  if (!state.optimizer) throw config_error("train state has no optimizer; build it with init");
  auto& codec = state.codec;
  codec.train_mode(true);
  const auto n_batch = batch.x.size(0);
  const auto dim = codec.desc.code_dim;

  auto c_map = codec.encoder->forward(batch.x);
  auto c_flat = c_map.permute({0, 2, 3, 1}).reshape({n_batch, kCodeVectors, dim});
  auto quantized = quantize_batch(c_flat, codec.codebook.vectors);
  auto cb = codebook_loss(c_flat, quantized.second);
  auto code = straight_through(c_flat, quantized.second)
                  .reshape({n_batch, kCodeGrid, kCodeGrid, dim})
                  .permute({0, 3, 1, 2})
                  .contiguous();
  auto cond = codec.upproj->forward(code);

  // Per-sample timestep in {1..T} and Gaussian corruption of the target.
  auto t = torch::randint(1, codec.schedule.T + 1, {n_batch}, torch::kLong);
  auto eps = torch::randn_like(batch.z);
  auto ab_all = torch::tensor(codec.schedule.alpha_bar, torch::kDouble);
  auto ab_t = ab_all.index_select(0, t).reshape({n_batch, 1, 1, 1});
  auto z_t = ab_t.sqrt().to(torch::kFloat) * batch.z + (1.0 - ab_t).sqrt().to(torch::kFloat) * eps;

  auto pred = codec.unet->forward(z_t, cond, batch.y, t);
  auto weight = ab_t.div((1.0 - ab_t).clamp_min(kWeightFloor)).reshape({n_batch}).to(torch::kFloat);
  auto per_sample = (batch.z - pred).pow(2).sum({1, 2, 3});
  auto denoise = (weight * per_sample).mean();

  auto loss = denoise;
  if (state.config.eta != 0.0) loss = loss + state.config.eta * cb;

  StepStats stats;
  stats.loss = loss.item<double>();
  stats.denoise_loss = denoise.item<double>();
  stats.cb_loss = cb.item<double>();
  if (!std::isfinite(stats.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step + 1 << ": loss=" << stats.loss
        << " denoise=" << stats.denoise_loss << " cb=" << stats.cb_loss;
    throw numerical_error(msg.str());
  }

  state.optimizer->zero_grad();
  loss.backward();
  if (state.config.grad_clip > 0) {
    auto params = codec.trainable_parameters();
    torch::nn::utils::clip_grad_norm_(params, state.config.grad_clip);
  }
  state.optimizer->step();

  auto counts = torch::bincount(quantized.first.reshape({-1}), {}, codec.codebook.n_vectors());
  auto acc = counts.accessor<std::int64_t, 1>();
  for (std::size_t i = 0; i < state.usage_counts.size(); ++i) {
    state.usage_counts[i] += acc[static_cast<std::int64_t>(i)];
  }
  ++state.step;
  return stats;
}

double validation_nmse_db(DiffusionCodec& codec, const Dataset& split) {
  if (split.size() == 0) throw config_error("validation split is empty");
  const bool was_training = codec.unet->is_training();
  codec.train_mode(false);
  std::vector<torch::Tensor> targets, recons;
  targets.reserve(split.size());
  recons.reserve(split.size());
  for (const auto& s : split.samples) {
    if (!s.x_ad.defined() || !s.z_ad.defined()) {
      throw data_error(data_error::kind::shape_mismatch,
                       "validation sample lacks angular-delay fields");
    }
    auto word = codec.encode(s.x_ad);
    std::optional<torch::Tensor> y;
    if (codec.desc.use_side_info) {
      if (!s.y_ad.defined()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "validation sample has no side information");
      }
      y = s.y_ad;
    }
    targets.push_back(s.z_ad);
    recons.push_back(codec.decode(word, y));
  }
  codec.train_mode(was_training);
  return nmse_db(torch::stack(targets, 0), torch::stack(recons, 0));
}

void continue_training(TrainState& state, const Dataset& train_split, const Dataset* val_split,
                       const std::string& checkpoint_path) {
  const auto& cfg = state.config;
  if (state.step < cfg.n_train && train_split.size() == 0) {
    throw config_error("training requires a non-empty dataset");
  }
  state.codec.train_mode(true);
  while (state.step < cfg.n_train) {
    auto indices = draw_epoch_indices(state.epoch_perm, state.cursor, cfg.batch_size,
                                      static_cast<std::int64_t>(train_split.size()));
    auto batch = make_batch(train_split, indices, state.codec.norm_scale, cfg.use_side_info);
    auto stats = train_step(state, batch);
    MetricsRow row;
    row.step = state.step;
    row.loss = stats.loss;
    row.denoise_loss = stats.denoise_loss;
    row.cb_loss = stats.cb_loss;
    if (val_split != nullptr && cfg.val_every > 0 && state.step % cfg.val_every == 0) {
      row.val_nmse_db = validation_nmse_db(state.codec, *val_split);
      state.codec.train_mode(true);
    }
    state.log.push_back(row);
    if (!checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
        state.step % cfg.checkpoint_every == 0 && state.step < cfg.n_train) {
      save_train_checkpoint(state, checkpoint_path);
    }
  }
  if (!checkpoint_path.empty()) save_train_checkpoint(state, checkpoint_path);
}

TrainState train(const TrainingConfig& config, const ArchDescriptor& desc,
                 const Dataset& train_split, const Dataset* val_split,
                 const std::string& checkpoint_path) {
  auto state = TrainState::init(config, desc);
  if (config.n_train > 0) {
    if (train_split.size() == 0) throw config_error("training requires a non-empty dataset");
    state.codec.norm_scale = compute_norm_scale(train_split);
  }
  continue_training(state, train_split, val_split, checkpoint_path);
  return state;
}

void save_train_checkpoint(TrainState& state, const std::string& path) {
  auto data = state.codec.to_checkpoint();
  data.meta["train"] = {
      {"config", state.config.to_json()},
      {"step", state.step},
      {"cursor", state.cursor},
  };
  data.tensors.emplace_back("train.usage_counts",
                            torch::tensor(state.usage_counts, torch::kLong));
  data.tensors.emplace_back(
      "train.epoch_perm",
      state.epoch_perm.defined() ? state.epoch_perm : torch::zeros({0}, torch::kLong));
  data.tensors.emplace_back("train.log", metrics_to_tensor(state.log));
  data.tensors.emplace_back("train.rng_state",
                            at::detail::getDefaultCPUGenerator().get_state());
  data.tensors.emplace_back("train.optim_blob", optimizer_blob(*state.optimizer));
  write_checkpoint(path, data);
}

TrainState load_train_checkpoint(const std::string& path,
                                 const std::optional<ArchDescriptor>& expected) {
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

  TrainState state{DiffusionCodec::from_checkpoint(data), cfg};
  if (expected.has_value()) {
    const auto& d = state.codec.desc;
    if (d.enc_base != expected->enc_base || d.code_dim != expected->code_dim ||
        d.cond_channels != expected->cond_channels || d.unet_base != expected->unet_base ||
        d.unet_mults != expected->unet_mults || d.use_side_info != expected->use_side_info) {
      throw config_error("checkpoint architecture does not match the expected descriptor");
    }
  }
  state.step = step;
  state.cursor = cursor;

  auto usage = data.tensor("train.usage_counts").contiguous();
  if (usage.numel() != cfg.n_v) {
    throw data_error(data_error::kind::shape_mismatch,
                     "usage counter length does not match N_v");
  }
  const auto* usage_ptr = usage.data_ptr<std::int64_t>();
  state.usage_counts.assign(usage_ptr, usage_ptr + usage.numel());

  auto perm = data.tensor("train.epoch_perm");
  state.epoch_perm = perm.numel() > 0 ? perm.clone() : torch::Tensor();
  state.log = metrics_from_tensor(data.tensor("train.log"));

  state.optimizer = make_optimizer(state.codec, cfg);
  load_optimizer_blob(*state.optimizer, data.tensor("train.optim_blob"));

  // Restored last so nothing above can disturb the recovered stream position.
  at::Generator gen = at::detail::getDefaultCPUGenerator();
  gen.set_state(data.tensor("train.rng_state").clone());
  return state;
}

}  // namespace csidiff
