#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "csidiff/baseline.hpp"
#include "csidiff/channel.hpp"
#include "csidiff/dataset_io.hpp"
#include "csidiff/errors.hpp"
#include "csidiff/evalharness.hpp"
#include "csidiff/training.hpp"
#include "csidiff/transform.hpp"

using namespace csidiff;

namespace {

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config file " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config file " + path + " is not valid JSON: " + e.what());
  }
}

// Config documents supplied on the command line are configuration, not data:
// malformed contents exit with the config status.
template <typename F>
auto as_config(const std::string& context, F&& f) {
  try {
    return f();
  } catch (const data_error& e) {
    throw config_error(context + ": " + e.what());
  }
}

Dataset load_dataset_for_model(const std::string& path) {
  auto ds = read_dataset(path);
  if (ds.size() > 0 && !ds.samples.front().has_angular_delay()) preprocess_dataset(ds);
  return ds;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error(data_error::kind::io, "cannot open " + path + " for writing");
  os << text;
  if (!os) throw data_error(data_error::kind::io, "failed writing " + path);
}

std::string last_loss_summary(const std::vector<MetricsRow>& log) {
  if (log.empty()) return "no steps run";
  std::ostringstream oss;
  oss << "final loss " << std::setprecision(6) << log.back().loss;
  return oss.str();
}

struct GenDataArgs {
  std::string out;
  std::string config_path;
  std::string split = "train";
  std::string ingest_path;
  std::string layout_path;
  std::size_t count = 128;
  std::uint64_t seed = 0;
  std::uint64_t seed_offset = 0;
  bool raw_only = false;
  bool no_manifest = false;
  CLI::Option* seed_opt = nullptr;
};

void run_gen_data(const GenDataArgs& a) {
  Dataset ds;
  nlohmann::json manifest;
  if (!a.ingest_path.empty()) {
    auto layout = LayoutDescriptor::from_json_file(a.layout_path);
    ds = ingest_external(a.ingest_path, layout);
    manifest = {{"ingested_from", a.ingest_path},
                {"layout", a.layout_path},
                {"count", ds.size()},
                {"split", split_name(ds.split)}};
  } else {
    ChannelConfig cc;
    if (!a.config_path.empty()) {
      auto doc = load_json_file(a.config_path);
      if (doc.contains("channel")) doc = doc.at("channel");
      cc = as_config("config file " + a.config_path,
                     [&] { return channel_config_from_json(doc); });
    }
    if (a.seed_opt->count() > 0) cc.seed = a.seed;
    const Split split = a.split == "test" ? Split::test : Split::train;
    ds = generate_dataset(cc, a.count, split, a.seed_offset);
    manifest = {{"channel", channel_config_to_json(cc)},
                {"count", a.count},
                {"split", a.split},
                {"sample_seed_offset", a.seed_offset}};
  }
  if (!a.raw_only && ds.size() > 0 && !ds.samples.front().has_angular_delay()) {
    preprocess_dataset(ds);
  }
  manifest["preprocessed"] = ds.size() > 0 && ds.samples.front().has_angular_delay();
  write_dataset(ds, a.out);
  if (!a.no_manifest) write_text_file(a.out + ".json", manifest.dump(2) + "\n");

  std::cout << "wrote " << ds.size() << " " << split_name(ds.split) << " samples to " << a.out;
  if (!a.no_manifest) std::cout << " (manifest " << a.out << ".json)";
  std::cout << "\n";
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config_path;
  std::string codec = "diffusion";
  std::string val_path;
  std::string metrics_path;
  std::string resume_path;
  std::string arch = "paper";
  TrainingConfig over;  // holds CLI override values; presence tracked per option
  std::int64_t n_clf = 22;
  std::int64_t bits_per_element = 6;
  std::int64_t base_width = 16;
  bool side_info = true;
  std::map<std::string, CLI::Option*> opts;
};

bool passed(const TrainArgs& a, const std::string& name) {
  auto it = a.opts.find(name);
  return it != a.opts.end() && it->second->count() > 0;
}

void apply_training_overrides(const TrainArgs& a, TrainingConfig& tc) {
  if (passed(a, "steps")) tc.n_train = a.over.n_train;
  if (passed(a, "batch-size")) tc.batch_size = a.over.batch_size;
  if (passed(a, "lr")) tc.learning_rate = a.over.learning_rate;
  if (passed(a, "eta")) tc.eta = a.over.eta;
  if (passed(a, "grad-clip")) tc.grad_clip = a.over.grad_clip;
  if (passed(a, "n-v")) tc.n_v = a.over.n_v;
  if (passed(a, "time-steps")) tc.T = a.over.T;
  if (passed(a, "seed")) tc.seed = a.over.seed;
  if (passed(a, "val-every")) tc.val_every = a.over.val_every;
  if (passed(a, "checkpoint-every")) tc.checkpoint_every = a.over.checkpoint_every;
  if (passed(a, "side-info")) tc.use_side_info = a.side_info;
}

void print_train_summary(const std::string& kind, std::int64_t step, std::int64_t rate,
                         const std::vector<MetricsRow>& log, const TrainArgs& a) {
  std::cout << "trained " << kind << " codec: " << step << " steps, rate " << rate << " bits, "
            << last_loss_summary(log) << "\n";
  std::cout << "checkpoint: " << a.out << "\n";
  if (!a.metrics_path.empty()) {
    write_text_file(a.metrics_path, metrics_csv(log));
    std::cout << "metrics: " << a.metrics_path << " (" << log.size() << " rows)\n";
  }
}

void run_train(const TrainArgs& a) {
  nlohmann::json doc;
  std::string kind_name = a.codec;
  if (!a.config_path.empty()) {
    doc = load_json_file(a.config_path);
    if (doc.contains("codec") && !passed(a, "codec")) {
      kind_name = doc.at("codec").get<std::string>();
    }
  }
  const CodecKind kind = codec_from_name(kind_name);

  auto train_ds = load_dataset_for_model(a.data);
  std::optional<Dataset> val_ds;
  if (!a.val_path.empty()) val_ds = load_dataset_for_model(a.val_path);
  const Dataset* val = val_ds ? &*val_ds : nullptr;

  if (!a.resume_path.empty()) {
    for (const char* structural : {"n-v", "time-steps", "seed", "side-info", "lr", "eta",
                                   "batch-size", "grad-clip", "arch", "n-clf",
                                   "bits-per-element", "base-width"}) {
      if (passed(a, structural)) {
        throw config_error(std::string("--") + structural +
                           " cannot change on resume; start a fresh run instead");
      }
    }
    auto kind_doc = read_checkpoint(a.resume_path).meta.value("kind", "");
    if (kind_doc == "diffusion-codec") {
      auto state = load_train_checkpoint(a.resume_path);
      if (passed(a, "steps")) state.config.n_train = a.over.n_train;
      if (passed(a, "val-every")) state.config.val_every = a.over.val_every;
      if (passed(a, "checkpoint-every")) state.config.checkpoint_every = a.over.checkpoint_every;
      continue_training(state, train_ds, val, a.out);
      print_train_summary("diffusion", state.step, state.codec.rate_bits(), state.log, a);
    } else if (kind_doc == "baseline-codec") {
      auto state = load_baseline_checkpoint(a.resume_path);
      if (passed(a, "steps")) state.config.n_train = a.over.n_train;
      if (passed(a, "val-every")) state.config.val_every = a.over.val_every;
      if (passed(a, "checkpoint-every")) state.config.checkpoint_every = a.over.checkpoint_every;
      baseline_continue_training(state, train_ds, val, a.out);
      print_train_summary("baseline", state.step, state.codec.rate_bits(), state.log, a);
    } else {
      throw data_error(data_error::kind::malformed_header,
                       "cannot resume from " + a.resume_path + ": unknown checkpoint kind");
    }
    return;
  }

  TrainingConfig tc;
  if (doc.contains("training")) {
    tc = as_config("config file " + a.config_path,
                   [&] { return TrainingConfig::from_json(doc.at("training")); });
  }
  apply_training_overrides(a, tc);
  tc.validate();

  if (kind == CodecKind::diffusion) {
    ArchDescriptor arch;
    if (doc.contains("arch")) {
      arch = as_config("config file " + a.config_path,
                       [&] { return ArchDescriptor::from_json(doc.at("arch")); });
    } else {
      arch = a.arch == "desk" ? ArchDescriptor::desk_scale() : ArchDescriptor::paper_scale();
    }
    arch.use_side_info = tc.use_side_info;
    auto state = train(tc, arch, train_ds, val, a.out);
    print_train_summary("diffusion", state.step, state.codec.rate_bits(), state.log, a);
    if (val) {
      std::cout << "validation nmse: " << std::setprecision(4)
                << validation_nmse_db(state.codec, *val) << " dB\n";
    }
  } else {
    BaselineConfig arch;
    if (doc.contains("baseline_arch")) {
      arch = as_config("config file " + a.config_path,
                       [&] { return BaselineConfig::from_json(doc.at("baseline_arch")); });
    }
    if (passed(a, "n-clf")) arch.n_clf = a.n_clf;
    if (passed(a, "bits-per-element")) arch.bits_per_element = a.bits_per_element;
    if (passed(a, "base-width")) arch.base_width = a.base_width;
    arch.use_side_info = tc.use_side_info;
    auto state = baseline_train(tc, arch, train_ds, val, a.out);
    print_train_summary("baseline", state.step, state.codec.rate_bits(), state.log, a);
    if (val) {
      std::cout << "validation nmse: " << std::setprecision(4)
                << baseline_validation_nmse_db(state.codec, *val) << " dB\n";
    }
  }
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  bool as_json = false;
};

void run_eval(const EvalArgs& a) {
  auto loaded = load_codec(a.checkpoint);
  auto ds = load_dataset_for_model(a.data);
  auto handle = loaded.handle();
  const double v = evaluate_nmse_db(handle, ds);
  if (a.as_json) {
    nlohmann::json j = {{"codec", codec_name(loaded.kind)},
                        {"rate_bits", loaded.rate_bits()},
                        {"n_samples", ds.size()},
                        {"nmse_db", v}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "codec=" << codec_name(loaded.kind) << " rate_bits=" << loaded.rate_bits()
              << " samples=" << ds.size() << " nmse_db=" << std::setprecision(6) << v << "\n";
  }
}

struct SweepArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::size_t train_samples = 0;
  std::size_t eval_samples = 0;
  bool side_info = true;
  std::map<std::string, CLI::Option*> opts;
};

void run_sweep(const SweepArgs& a) {
  auto doc = load_json_file(a.config_path);
  auto cfg = as_config("config file " + a.config_path,
                       [&] { return ExperimentConfig::from_json(doc); });
  auto was_passed = [&](const std::string& name) {
    auto it = a.opts.find(name);
    return it != a.opts.end() && it->second->count() > 0;
  };
  if (was_passed("seed")) cfg.training.seed = a.seed;
  if (was_passed("steps")) cfg.training.n_train = a.steps;
  if (was_passed("train-samples")) cfg.n_train_samples = a.train_samples;
  if (was_passed("eval-samples")) cfg.n_eval_samples = a.eval_samples;
  if (was_passed("side-info")) cfg.training.use_side_info = a.side_info;
  cfg.validate();

  std::error_code ec;
  std::filesystem::create_directories(a.out_dir, ec);
  if (ec) {
    throw data_error(data_error::kind::io,
                     "cannot create output directory " + a.out_dir + ": " + ec.message());
  }

  auto result = rd_sweep(cfg);
  const auto csv_path = a.out_dir + "/rd_points.csv";
  const auto svg_path = a.out_dir + "/rd_curve.svg";
  const auto cfg_path = a.out_dir + "/experiment.json";
  write_text_file(csv_path, result.csv);
  write_text_file(svg_path, result.svg);
  write_text_file(cfg_path, cfg.to_json().dump(2) + "\n");

  std::cout << result.csv;
  std::cout << "wrote " << csv_path << "\n";
  std::cout << "wrote " << svg_path << "\n";
  std::cout << "wrote " << cfg_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fixed-rate CSI feedback codecs: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "csidiff 0.1.0");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate or ingest a CSI dataset");
  gen_cmd->add_option("--out", gen.out, "output dataset file")->required();
  auto* gen_config = gen_cmd->add_option("--config", gen.config_path,
                                         "channel config JSON (flat or under a channel key)");
  auto* gen_count = gen_cmd->add_option("-n,--count", gen.count, "number of samples");
  gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "channel seed override");
  gen_cmd->add_option("--seed-offset", gen.seed_offset, "first per-sample seed");
  gen_cmd->add_option("--split", gen.split, "dataset split tag")
      ->check(CLI::IsMember({"train", "test"}));
  gen_cmd->add_flag("--raw-only", gen.raw_only, "skip the angular-delay preprocessing");
  gen_cmd->add_flag("--no-manifest", gen.no_manifest, "skip the generation manifest");
  auto* gen_ingest =
      gen_cmd->add_option("--ingest", gen.ingest_path, "ingest this external corpus instead");
  auto* gen_layout =
      gen_cmd->add_option("--layout", gen.layout_path, "layout descriptor for --ingest");
  gen_ingest->needs(gen_layout);
  gen_ingest->excludes(gen_config)->excludes(gen_count)->excludes(gen.seed_opt);
  gen_cmd->callback([&] { run_gen_data(gen); });

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "train a codec and write its checkpoint");
  tr_cmd->add_option("--data", tr.data, "training dataset")->required();
  tr_cmd->add_option("--out", tr.out, "output checkpoint")->required();
  tr.opts["codec"] = tr_cmd->add_option("--codec", tr.codec, "codec family")
                         ->check(CLI::IsMember({"diffusion", "baseline"}));
  tr_cmd->add_option("--config", tr.config_path,
                     "run config JSON (codec, training, arch, baseline_arch)");
  tr_cmd->add_option("--val", tr.val_path, "validation dataset");
  tr_cmd->add_option("--metrics", tr.metrics_path, "write the per-step metrics CSV here");
  tr_cmd->add_option("--resume", tr.resume_path, "continue from this training checkpoint");
  tr.opts["arch"] = tr_cmd->add_option("--arch", tr.arch, "network scale preset")
                        ->check(CLI::IsMember({"paper", "desk"}));
  tr.opts["steps"] = tr_cmd->add_option("--steps", tr.over.n_train, "total optimizer steps");
  tr.opts["batch-size"] = tr_cmd->add_option("--batch-size", tr.over.batch_size, "minibatch size");
  tr.opts["lr"] = tr_cmd->add_option("--lr", tr.over.learning_rate, "Adam learning rate");
  tr.opts["eta"] = tr_cmd->add_option("--eta", tr.over.eta, "codebook loss weight");
  tr.opts["grad-clip"] = tr_cmd->add_option("--grad-clip", tr.over.grad_clip, "gradient norm cap");
  tr.opts["n-v"] = tr_cmd->add_option("--n-v", tr.over.n_v, "codebook size (diffusion)");
  tr.opts["time-steps"] =
      tr_cmd->add_option("-T,--time-steps", tr.over.T, "denoising steps (diffusion)");
  tr.opts["seed"] = tr_cmd->add_option("--seed", tr.over.seed, "run seed");
  tr.opts["val-every"] =
      tr_cmd->add_option("--val-every", tr.over.val_every, "validation cadence in steps");
  tr.opts["checkpoint-every"] = tr_cmd->add_option("--checkpoint-every",
                                                   tr.over.checkpoint_every,
                                                   "mid-run checkpoint cadence in steps");
  tr.opts["side-info"] =
      tr_cmd->add_flag("--side-info,!--no-side-info", tr.side_info, "condition on uplink CSI");
  tr.opts["n-clf"] = tr_cmd->add_option("--n-clf", tr.n_clf, "baseline latent size");
  tr.opts["bits-per-element"] =
      tr_cmd->add_option("--bits-per-element", tr.bits_per_element, "baseline quantizer depth");
  tr.opts["base-width"] = tr_cmd->add_option("--base-width", tr.base_width, "baseline conv width");
  tr_cmd->callback([&] { run_train(tr); });

  std::string enc_ckpt, enc_data, enc_out;
  auto* enc_cmd = app.add_subcommand("encode", "compress a dataset into a codeword stream");
  enc_cmd->add_option("--checkpoint", enc_ckpt, "codec checkpoint")->required();
  enc_cmd->add_option("--data", enc_data, "input dataset")->required();
  enc_cmd->add_option("--out", enc_out, "output codeword stream")->required();
  enc_cmd->callback([&] {
    const auto n = encode_file(enc_ckpt, enc_data, enc_out);
    std::cout << "encoded " << n << " samples to " << enc_out << " ("
              << std::filesystem::file_size(enc_out) << " bytes)\n";
  });

  std::string dec_ckpt, dec_codes, dec_out, dec_side;
  std::int64_t dec_raw = 0;
  auto* dec_cmd = app.add_subcommand("decode", "reconstruct a dataset from a codeword stream");
  dec_cmd->add_option("--checkpoint", dec_ckpt, "codec checkpoint")->required();
  dec_cmd->add_option("--codes", dec_codes, "input codeword stream")->required();
  dec_cmd->add_option("--out", dec_out, "output dataset")->required();
  dec_cmd->add_option("--side-data", dec_side, "dataset providing decoder side information");
  dec_cmd->add_option("--raw-subcarriers", dec_raw,
                      "also emit frequency-domain matrices with this many subcarriers");
  dec_cmd->callback([&] {
    std::optional<std::string> side;
    if (!dec_side.empty()) side = dec_side;
    const auto n = decode_file(dec_ckpt, dec_codes, side, dec_out, dec_raw);
    std::cout << "decoded " << n << " samples to " << dec_out << "\n";
  });

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "NMSE of a codec over a dataset");
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "codec checkpoint")->required();
  ev_cmd->add_option("--data", ev.data, "evaluation dataset")->required();
  ev_cmd->add_flag("--json", ev.as_json, "emit a JSON object instead of a text line");
  ev_cmd->callback([&] { run_eval(ev); });

  SweepArgs sw;
  auto* sw_cmd =
      app.add_subcommand("rd-sweep", "train and evaluate a rate ladder; write CSV and SVG");
  sw_cmd->add_option("--config", sw.config_path, "experiment config JSON")->required();
  sw_cmd->add_option("--out-dir", sw.out_dir, "report directory")->required();
  sw.opts["seed"] = sw_cmd->add_option("--seed", sw.seed, "run seed override");
  sw.opts["steps"] = sw_cmd->add_option("--steps", sw.steps, "optimizer steps per cell");
  sw.opts["train-samples"] =
      sw_cmd->add_option("--train-samples", sw.train_samples, "training set size");
  sw.opts["eval-samples"] =
      sw_cmd->add_option("--eval-samples", sw.eval_samples, "evaluation set size");
  sw.opts["side-info"] =
      sw_cmd->add_flag("--side-info,!--no-side-info", sw.side_info, "condition on uplink CSI");
  sw_cmd->callback([&] { run_sweep(sw); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfigError;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitDataError;
  } catch (const numerical_error& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumericalError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumericalError;
  }
  return kExitOk;
}
