#include "csidiff/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "csidiff/dataset_io.hpp"
#include "csidiff/errors.hpp"
#include "csidiff/transform.hpp"

namespace csidiff {

namespace {

std::string format_double(double v) {
  std::ostringstream oss;
  oss << std::setprecision(17) << v;
  return oss.str();
}

std::string format_short(double v) {
  std::ostringstream oss;
  oss << std::fixed << std::setprecision(1) << v;
  return oss.str();
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

// Ensures the angular-delay fields exist, deriving them from raw matrices on
// demand.
void require_angular_delay(Dataset& dataset) {
  if (dataset.size() == 0) return;
  if (!dataset.samples.front().has_angular_delay()) preprocess_dataset(dataset);
}

}  // namespace

std::int64_t LoadedCodec::rate_bits() const {
  return kind == CodecKind::diffusion ? diffusion->rate_bits() : baseline->rate_bits();
}

EvalCodec LoadedCodec::handle() {
  return kind == CodecKind::diffusion ? wrap_codec(*diffusion) : wrap_codec(*baseline);
}

LoadedCodec load_codec(const std::string& checkpoint_path) {
  auto data = read_checkpoint(checkpoint_path);
  std::string kind;
  try {
    kind = data.meta.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("checkpoint metadata lacks a codec kind: ") + e.what());
  }
  LoadedCodec loaded;
  if (kind == "diffusion-codec") {
    loaded.diffusion = DiffusionCodec::from_checkpoint(data);
  } else if (kind == "baseline-codec") {
    loaded.kind = CodecKind::baseline;
    loaded.baseline = BaselineCodec::from_checkpoint(data);
  } else {
    throw data_error(data_error::kind::malformed_header,
                     "unknown checkpoint kind \"" + kind + "\"");
  }
  return loaded;
}

const char* codec_name(CodecKind kind) {
  return kind == CodecKind::diffusion ? "diffusion" : "baseline";
}

CodecKind codec_from_name(const std::string& name) {
  if (name == "diffusion") return CodecKind::diffusion;
  if (name == "baseline") return CodecKind::baseline;
  throw config_error("unknown codec \"" + name + "\" (expected diffusion or baseline)");
}

std::string rd_csv(const std::vector<RDPoint>& points) {
  std::ostringstream oss;
  oss << "codec,rate_bits,nmse_db,side_info,train_steps,seed,dataset\n";
  for (const auto& p : points) {
    oss << codec_name(p.codec) << ',' << p.rate_bits << ',' << format_double(p.nmse_db) << ','
        << (p.side_info ? "true" : "false") << ',' << p.train_steps << ',' << p.seed << ','
        << p.dataset << '\n';
  }
  return oss.str();
}

std::vector<RDPoint> parse_rd_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "codec,rate_bits,nmse_db,side_info,train_steps,seed,dataset") {
    throw data_error(data_error::kind::malformed_header, "bad rate-distortion CSV header");
  }
  std::vector<RDPoint> points;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != 7) {
      throw data_error(data_error::kind::malformed_header,
                       "rate-distortion CSV row needs 7 fields, got " +
                           std::to_string(fields.size()));
    }
    RDPoint p;
    try {
      p.codec = codec_from_name(fields[0]);
      p.rate_bits = std::stoll(fields[1]);
      p.nmse_db = std::stod(fields[2]);
      if (fields[3] == "true" || fields[3] == "1") {
        p.side_info = true;
      } else if (fields[3] == "false" || fields[3] == "0") {
        p.side_info = false;
      } else {
        throw config_error("bad boolean \"" + fields[3] + "\"");
      }
      p.train_steps = std::stoll(fields[4]);
      p.seed = static_cast<std::uint64_t>(std::stoull(fields[5]));
      p.dataset = fields[6];
    } catch (const std::exception& e) {
      throw data_error(data_error::kind::malformed_header,
                       std::string("bad rate-distortion CSV row: ") + e.what());
    }
    points.push_back(std::move(p));
  }
  return points;
}

std::string rd_svg(const std::vector<RDPoint>& points) {
  constexpr double kWidth = 640, kHeight = 440;
  constexpr double kLeft = 70, kRight = 620, kTop = 40, kBottom = 360;

  std::map<std::pair<CodecKind, bool>, std::vector<RDPoint>> series;
  for (const auto& p : points) series[{p.codec, p.side_info}].push_back(p);
  for (auto& entry : series) {
    std::sort(entry.second.begin(), entry.second.end(),
              [](const RDPoint& a, const RDPoint& b) { return a.rate_bits < b.rate_bits; });
  }

  double rate_lo = 0, rate_hi = 1, nmse_lo = -1, nmse_hi = 1;
  if (!points.empty()) {
    rate_lo = rate_hi = static_cast<double>(points.front().rate_bits);
    nmse_lo = nmse_hi = points.front().nmse_db;
    for (const auto& p : points) {
      rate_lo = std::min(rate_lo, static_cast<double>(p.rate_bits));
      rate_hi = std::max(rate_hi, static_cast<double>(p.rate_bits));
      nmse_lo = std::min(nmse_lo, p.nmse_db);
      nmse_hi = std::max(nmse_hi, p.nmse_db);
    }
  }
  if (rate_hi - rate_lo < 1) {
    rate_lo -= 32;
    rate_hi += 32;
  }
  const double rate_pad = 0.06 * (rate_hi - rate_lo);
  rate_lo -= rate_pad;
  rate_hi += rate_pad;
  if (nmse_hi - nmse_lo < 0.5) {
    nmse_lo -= 1;
    nmse_hi += 1;
  }
  const double nmse_pad = 0.08 * (nmse_hi - nmse_lo);
  nmse_lo -= nmse_pad;
  nmse_hi += nmse_pad;

  auto sx = [&](double rate) {
    return kLeft + (rate - rate_lo) / (rate_hi - rate_lo) * (kRight - kLeft);
  };
  auto sy = [&](double nmse) {
    return kBottom - (nmse - nmse_lo) / (nmse_hi - nmse_lo) * (kBottom - kTop);
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << (kLeft + kRight) / 2
      << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">rate vs NMSE</text>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\"" << kRight << "\" y2=\""
      << kBottom << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
      << kBottom << "\" stroke=\"black\"/>\n";

  for (int i = 0; i <= 4; ++i) {
    const double rate = rate_lo + (rate_hi - rate_lo) * i / 4.0;
    const double x = sx(rate);
    svg << "<line x1=\"" << x << "\" y1=\"" << kBottom << "\" x2=\"" << x << "\" y2=\""
        << kBottom + 5 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << x << "\" y=\"" << kBottom + 20
        << "\" text-anchor=\"middle\" font-size=\"11\">" << static_cast<std::int64_t>(rate)
        << "</text>\n";
    const double nmse = nmse_lo + (nmse_hi - nmse_lo) * i / 4.0;
    const double y = sy(nmse);
    svg << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << y << "\" x2=\"" << kLeft << "\" y2=\"" << y
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << kLeft - 9 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << format_short(nmse) << "</text>\n";
  }
  svg << "<text x=\"" << (kLeft + kRight) / 2 << "\" y=\"" << kBottom + 40
      << "\" text-anchor=\"middle\" font-size=\"12\">codeword bits</text>\n";
  svg << "<text x=\"18\" y=\"" << (kTop + kBottom) / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 "
      << (kTop + kBottom) / 2 << ")\">NMSE [dB]</text>\n";

  double legend_y = kBottom + 58;
  for (const auto& entry : series) {
    const auto& key = entry.first;
    const auto& pts = entry.second;
    const char* color = key.first == CodecKind::diffusion ? "#2266cc" : "#cc7722";
    const char* dash = key.second ? " stroke-dasharray=\"6 3\"" : "";

    if (pts.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"" << dash
          << " points=\"";
      for (const auto& p : pts) {
        svg << sx(static_cast<double>(p.rate_bits)) << ',' << sy(p.nmse_db) << ' ';
      }
      svg << "\"/>\n";
    }
    for (const auto& p : pts) {
      svg << "<circle cx=\"" << sx(static_cast<double>(p.rate_bits)) << "\" cy=\""
          << sy(p.nmse_db) << "\" r=\"4\" fill=\"" << color << "\"/>\n";
    }

    bool monotone = true;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      if (pts[i].nmse_db > pts[i - 1].nmse_db) monotone = false;
    }
    std::string label = std::string(codec_name(key.first)) +
                        (key.second ? " (side info)" : "") +
                        ": nmse non-increasing with rate: " + (monotone ? "yes" : "no");
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << legend_y - 4 << "\" x2=\"" << kLeft + 24
        << "\" y2=\"" << legend_y - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"" << dash
        << "/>\n";
    svg << "<text x=\"" << kLeft + 30 << "\" y=\"" << legend_y << "\" font-size=\"12\">" << label
        << "</text>\n";
    legend_y += 18;
  }
  svg << "</svg>\n";
  return svg.str();
}

double evaluate_nmse_db(const EvalCodec& codec, const Dataset& split) {
  if (!codec.encode || !codec.decode) throw config_error("evaluation codec is incomplete");
  if (split.size() == 0) throw config_error("evaluation split is empty");
  std::vector<torch::Tensor> targets, recons;
  targets.reserve(split.size());
  recons.reserve(split.size());
  for (const auto& s : split.samples) {
    if (!s.x_ad.defined() || !s.z_ad.defined()) {
      throw data_error(data_error::kind::shape_mismatch,
                       "evaluation sample lacks angular-delay fields");
    }
    auto record = codec.encode(s.x_ad);
    std::optional<torch::Tensor> y;
    if (codec.use_side_info) {
      if (!s.y_ad.defined()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "evaluation sample has no side information");
      }
      y = s.y_ad;
    }
    targets.push_back(s.z_ad);
    recons.push_back(codec.decode(record, y));
  }
  return nmse_db(torch::stack(targets, 0), torch::stack(recons, 0));
}

EvalCodec wrap_codec(DiffusionCodec& codec) {
  EvalCodec handle;
  handle.use_side_info = codec.desc.use_side_info;
  handle.rate_bits = codec.rate_bits();
  auto* c = &codec;
  handle.encode = [c](const torch::Tensor& x_ad) {
    auto word = c->encode(x_ad);
    std::ostringstream os(std::ios::binary);
    write_codeword_record(os, kCodewordMagicVq, static_cast<std::uint16_t>(word.n_v),
                          word.to_bits());
    const auto s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
  };
  handle.decode = [c](const std::vector<std::uint8_t>& record,
                      const std::optional<torch::Tensor>& y_ad) {
    std::istringstream is(std::string(record.begin(), record.end()), std::ios::binary);
    auto rec = read_codeword_record(is, kCodewordMagicVq);
    return c->decode(Codeword::from_bits(rec.second, rec.first), y_ad);
  };
  return handle;
}

EvalCodec wrap_codec(BaselineCodec& codec) {
  EvalCodec handle;
  handle.use_side_info = codec.config.use_side_info;
  handle.rate_bits = codec.rate_bits();
  auto* c = &codec;
  handle.encode = [c](const torch::Tensor& x_ad) {
    auto bits = c->encode(x_ad);
    std::ostringstream os(std::ios::binary);
    write_codeword_record(os, kCodewordMagicUniform,
                          static_cast<std::uint16_t>(c->config.bits_per_element), bits);
    const auto s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
  };
  handle.decode = [c](const std::vector<std::uint8_t>& record,
                      const std::optional<torch::Tensor>& y_ad) {
    std::istringstream is(std::string(record.begin(), record.end()), std::ios::binary);
    auto rec = read_codeword_record(is, kCodewordMagicUniform);
    if (rec.first != c->config.bits_per_element) {
      throw data_error(data_error::kind::shape_mismatch,
                       "codeword bit width does not match the checkpoint configuration");
    }
    return c->decode(rec.second, y_ad);
  };
  return handle;
}

nlohmann::json channel_config_to_json(const ChannelConfig& config) {
  return {
      {"n_bs_antennas", config.n_bs_antennas},
      {"n_subcarriers", config.n_subcarriers},
      {"subcarrier_spacing", config.subcarrier_spacing},
      {"n_paths", config.n_paths},
      {"delay_spread", config.delay_spread},
      {"dl_carrier", config.dl_carrier},
      {"ul_carrier", config.ul_carrier},
      {"ue_speed", config.ue_speed},
      {"slot_interval", config.slot_interval},
      {"n_slots", config.n_slots},
      {"seed", config.seed},
  };
}

ChannelConfig channel_config_from_json(const nlohmann::json& j) {
  ChannelConfig c;
  try {
    c.n_bs_antennas = j.value("n_bs_antennas", c.n_bs_antennas);
    c.n_subcarriers = j.value("n_subcarriers", c.n_subcarriers);
    c.subcarrier_spacing = j.value("subcarrier_spacing", c.subcarrier_spacing);
    c.n_paths = j.value("n_paths", c.n_paths);
    c.delay_spread = j.value("delay_spread", c.delay_spread);
    c.dl_carrier = j.value("dl_carrier", c.dl_carrier);
    c.ul_carrier = j.value("ul_carrier", c.ul_carrier);
    c.ue_speed = j.value("ue_speed", c.ue_speed);
    c.slot_interval = j.value("slot_interval", c.slot_interval);
    c.n_slots = j.value("n_slots", c.n_slots);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("bad channel config document: ") + e.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  channel.validate();
  training.validate();
  arch.validate();
  baseline_arch.validate();
  if (diffusion_rates.empty() && baseline_rates.empty()) {
    throw config_error("a sweep needs at least one rate point");
  }
  for (auto n_v : diffusion_rates) rate_for(n_v);
  for (auto n_clf : baseline_rates) {
    if (n_clf < 1) throw config_error("baseline rate points must be positive latent sizes");
  }
  if (n_train_samples == 0 || n_eval_samples == 0) {
    throw config_error("sweep sample counts must be >= 1");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  return {
      {"channel", channel_config_to_json(channel)},
      {"n_train_samples", n_train_samples},
      {"n_eval_samples", n_eval_samples},
      {"diffusion_rates", diffusion_rates},
      {"baseline_rates", baseline_rates},
      {"training", training.to_json()},
      {"arch", arch.to_json()},
      {"baseline_arch", baseline_arch.to_json()},
      {"dataset_id", dataset_id},
  };
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("channel")) c.channel = channel_config_from_json(j.at("channel"));
    c.n_train_samples = j.value("n_train_samples", c.n_train_samples);
    c.n_eval_samples = j.value("n_eval_samples", c.n_eval_samples);
    c.diffusion_rates = j.value("diffusion_rates", c.diffusion_rates);
    c.baseline_rates = j.value("baseline_rates", c.baseline_rates);
    if (j.contains("training")) c.training = TrainingConfig::from_json(j.at("training"));
    if (j.contains("arch")) c.arch = ArchDescriptor::from_json(j.at("arch"));
    if (j.contains("baseline_arch")) {
      c.baseline_arch = BaselineConfig::from_json(j.at("baseline_arch"));
    }
    c.dataset_id = j.value("dataset_id", c.dataset_id);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("bad experiment config document: ") + e.what());
  }
  c.validate();
  return c;
}

SweepResult rd_sweep(const ExperimentConfig& config) {
  config.validate();
  auto train_ds = generate_dataset(config.channel, config.n_train_samples, Split::train, 0);
  preprocess_dataset(train_ds);
  // Evaluation draws from the same channel statistics with disjoint sample seeds.
  auto eval_ds =
      generate_dataset(config.channel, config.n_eval_samples, Split::test, 1000000);
  preprocess_dataset(eval_ds);

  SweepResult result;
  for (auto n_v : config.diffusion_rates) {
    auto tc = config.training;
    tc.n_v = n_v;
    auto arch = config.arch;
    arch.use_side_info = tc.use_side_info;
    auto state = train(tc, arch, train_ds, nullptr);
    RDPoint p;
    p.codec = CodecKind::diffusion;
    p.rate_bits = state.codec.rate_bits();
    p.nmse_db = evaluate_nmse_db(wrap_codec(state.codec), eval_ds);
    p.side_info = tc.use_side_info;
    p.train_steps = tc.n_train;
    p.seed = tc.seed;
    p.dataset = config.dataset_id;
    result.points.push_back(std::move(p));
  }
  for (auto n_clf : config.baseline_rates) {
    auto arch = config.baseline_arch;
    arch.n_clf = n_clf;
    arch.use_side_info = config.training.use_side_info;
    auto state = baseline_train(config.training, arch, train_ds, nullptr);
    RDPoint p;
    p.codec = CodecKind::baseline;
    p.rate_bits = state.codec.rate_bits();
    p.nmse_db = evaluate_nmse_db(wrap_codec(state.codec), eval_ds);
    p.side_info = config.training.use_side_info;
    p.train_steps = config.training.n_train;
    p.seed = config.training.seed;
    p.dataset = config.dataset_id;
    result.points.push_back(std::move(p));
  }
  result.csv = rd_csv(result.points);
  result.svg = rd_svg(result.points);
  return result;
}

std::size_t encode_file(const std::string& checkpoint_path, const std::string& data_path,
                        const std::string& out_path) {
  auto codec = load_codec(checkpoint_path);
  auto handle = codec.handle();
  auto dataset = read_dataset(data_path);
  if (dataset.size() == 0) throw config_error("dataset is empty");
  require_angular_delay(dataset);

  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw data_error(data_error::kind::io, "cannot open " + out_path + " for writing");
  for (const auto& s : dataset.samples) {
    auto record = handle.encode(s.x_ad);
    os.write(reinterpret_cast<const char*>(record.data()),
             static_cast<std::streamsize>(record.size()));
  }
  if (!os) throw data_error(data_error::kind::io, "failed writing " + out_path);
  return dataset.size();
}

std::size_t decode_file(const std::string& checkpoint_path, const std::string& codes_path,
                        const std::optional<std::string>& side_data_path,
                        const std::string& out_path, std::int64_t raw_subcarriers) {
  auto codec = load_codec(checkpoint_path);
  auto handle = codec.handle();

  std::optional<Dataset> side;
  if (handle.use_side_info) {
    if (!side_data_path.has_value()) {
      throw config_error("this checkpoint decodes with side information; pass a dataset for it");
    }
    side = read_dataset(*side_data_path);
    require_angular_delay(*side);
  }

  std::ifstream is(codes_path, std::ios::binary);
  if (!is) throw data_error(data_error::kind::io, "cannot open " + codes_path);
  const char* magic =
      codec.kind == CodecKind::diffusion ? kCodewordMagicVq : kCodewordMagicUniform;

  Dataset out;
  out.split = Split::test;
  std::size_t index = 0;
  while (is.peek() != std::char_traits<char>::eof()) {
    auto rec = read_codeword_record(is, magic);
    std::optional<torch::Tensor> y;
    if (handle.use_side_info) {
      if (index >= side->size()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "side-information dataset has fewer samples than the codeword stream");
      }
      if (!side->samples[index].y_ad.defined()) {
        throw data_error(data_error::kind::shape_mismatch,
                         "side-information sample " + std::to_string(index) + " has no y field");
      }
      y = side->samples[index].y_ad;
    }

    std::ostringstream bytes(std::ios::binary);
    write_codeword_record(bytes, magic, rec.first, rec.second);
    const auto str = bytes.str();
    auto recon = handle.decode(std::vector<std::uint8_t>(str.begin(), str.end()), y);

    CsiSample sample;
    sample.x_ad = recon;
    sample.z_ad = recon;
    if (raw_subcarriers > 0) {
      auto raw = from_angular_delay(AngularDelayBlock{recon, 1.0f}, raw_subcarriers);
      sample.x_raw = raw;
      sample.z_raw = raw;
    }
    out.samples.push_back(std::move(sample));
    ++index;
  }
  if (out.samples.empty()) {
    throw data_error(data_error::kind::truncated, "codeword stream holds no records");
  }
  write_dataset(out, out_path);
  return out.samples.size();
}

}  // namespace csidiff
