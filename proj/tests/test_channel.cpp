#include <filesystem>
#include <fstream>

#include "csidiff/channel.hpp"
#include "csidiff/dataset_io.hpp"
#include "csidiff/errors.hpp"
#include "csidiff/transform.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_compat.hpp"

using namespace csidiff;

namespace {

ChannelConfig small_config() {
  ChannelConfig cfg;
  cfg.n_subcarriers = 64;
  cfg.seed = 11;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

double pearson_abs(const torch::Tensor& a, const torch::Tensor& b) {
  auto x = a.reshape(-1).to(torch::kDouble);
  auto y = b.reshape(-1).to(torch::kDouble);
  x = x - x.mean();
  y = y - y.mean();
  const double num = (x * y).sum().item<double>();
  const double den = std::sqrt(x.pow(2).sum().item<double>() * y.pow(2).sum().item<double>());
  return std::abs(num / den);
}

}  // namespace

TEST_CASE("generated matrices have the configured shape") {
  ChannelConfig cfg;
  cfg.seed = 3;
  auto s = generate_sample(cfg, 0);
  CHECK(s.x_raw.sizes() == torch::IntArrayRef({32, 667}));
  CHECK(s.y_raw.sizes() == torch::IntArrayRef({32, 667}));
  CHECK(s.z_raw.sizes() == torch::IntArrayRef({32, 667}));
  CHECK(s.x_raw.is_complex());
  CHECK_FALSE(s.has_angular_delay());
}

TEST_CASE("generation is a pure function of (config.seed, sample_seed)") {
  auto cfg = small_config();
  auto a = generate_sample(cfg, 42);
  auto b = generate_sample(cfg, 42);
  CHECK(torch::equal(torch::view_as_real(a.x_raw), torch::view_as_real(b.x_raw)));
  CHECK(torch::equal(torch::view_as_real(a.y_raw), torch::view_as_real(b.y_raw)));
  CHECK(torch::equal(torch::view_as_real(a.z_raw), torch::view_as_real(b.z_raw)));

  auto c = generate_sample(cfg, 43);
  CHECK_FALSE(torch::equal(torch::view_as_real(a.x_raw), torch::view_as_real(c.x_raw)));
}

TEST_CASE("config validation rejects bad counts and non-positive quantities") {
  ChannelConfig cfg = small_config();
  cfg.n_paths = 0;
  CHECK_THROWS_AS(generate_sample(cfg, 0), config_error);
  cfg = small_config();
  cfg.delay_spread = 0.0;
  CHECK_THROWS_AS(generate_sample(cfg, 0), config_error);
  cfg = small_config();
  cfg.dl_carrier = -1.0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("per-entry energy is normalized near 1") {
  auto cfg = small_config();
  const int n = 64;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    auto s = generate_sample(cfg, i);
    total += torch::view_as_real(s.x_raw).to(torch::kDouble).pow(2).sum().item<double>();
  }
  const double per_entry = total / (n * cfg.n_bs_antennas * cfg.n_subcarriers);
  CHECK(per_entry > 0.5);
  CHECK(per_entry < 2.0);
}

TEST_CASE("UL side information correlates with DL input beyond cross-sample level") {
  ChannelConfig cfg;
  cfg.seed = 7;
  const int n = 1000;
  Dataset ds = generate_dataset(cfg, n, Split::train);
  preprocess_dataset(ds);
  double same = 0.0, cross = 0.0;
  for (int i = 0; i < n; ++i) {
    same += pearson_abs(ds.samples[i].x_ad, ds.samples[i].y_ad);
    cross += pearson_abs(ds.samples[i].x_ad, ds.samples[(i + 1) % n].y_ad);
  }
  same /= n;
  cross /= n;
  INFO("mean |corr| same=", same, " cross=", cross);
  CHECK(same > cross);
}

TEST_CASE("temporal coherence improves as the UE slows down") {
  auto cfg = small_config();
  auto mean_xz_nmse = [&](double speed) {
    cfg.ue_speed = speed;
    double acc = 0.0;
    const int n = 48;
    for (int i = 0; i < n; ++i) {
      auto s = generate_sample(cfg, i);
      acc += nmse(torch::view_as_real(s.x_raw), torch::view_as_real(s.z_raw));
    }
    return acc / n;
  };
  const double fast = mean_xz_nmse(5.0);
  const double mid = mean_xz_nmse(0.5);
  const double slow = mean_xz_nmse(0.05);
  const double still = mean_xz_nmse(0.0);
  INFO("nmse ", fast, " ", mid, " ", slow, " ", still);
  CHECK(std::isfinite(fast));
  CHECK(fast > mid);
  CHECK(mid > slow);
  CHECK(still < 1e-10);
}

TEST_CASE("dataset write/read round trip is lossless") {
  auto cfg = small_config();
  Dataset ds = generate_dataset(cfg, 3, Split::test);
  preprocess_dataset(ds);
  const auto path = temp_path("csidiff_roundtrip.csid");
  write_dataset(ds, path);
  Dataset back = read_dataset(path);

  REQUIRE(back.size() == ds.size());
  CHECK(back.split == Split::test);
  CHECK(back.source == Source::synthetic);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(torch::equal(torch::view_as_real(ds.samples[i].x_raw),
                       torch::view_as_real(back.samples[i].x_raw)));
    CHECK(torch::equal(torch::view_as_real(ds.samples[i].y_raw),
                       torch::view_as_real(back.samples[i].y_raw)));
    CHECK(torch::equal(torch::view_as_real(ds.samples[i].z_raw),
                       torch::view_as_real(back.samples[i].z_raw)));
    CHECK(torch::equal(ds.samples[i].x_ad, back.samples[i].x_ad));
    CHECK(torch::equal(ds.samples[i].y_ad, back.samples[i].y_ad));
    CHECK(torch::equal(ds.samples[i].z_ad, back.samples[i].z_ad));
  }
  std::filesystem::remove(path);
}

TEST_CASE("wrong magic bytes raise a malformed-header error") {
  const auto path = temp_path("csidiff_badmagic.csid");
  {
    std::ofstream os(path, std::ios::binary);
    os.write("NOPE", 4);
    std::uint16_t v = 1, f = 2;
    os.write(reinterpret_cast<char*>(&v), 2);
    os.write(reinterpret_cast<char*>(&f), 2);
  }
  try {
    read_dataset(path);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(e.error_kind() == data_error::kind::malformed_header);
  }
  std::filesystem::remove(path);
}

TEST_CASE("truncation mid-sample names the sample index") {
  auto cfg = small_config();
  Dataset ds = generate_dataset(cfg, 3, Split::train);
  const auto path = temp_path("csidiff_trunc.csid");
  write_dataset(ds, path);
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - cfg.n_subcarriers * 3);
  try {
    read_dataset(path);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(e.error_kind() == data_error::kind::truncated);
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("ingesting pre-cropped 32x32x2 samples fills angular-delay forms directly") {
  const auto path = temp_path("csidiff_ingest.bin");
  auto data = torch::rand({5, 32, 32, 2}, torch::kFloat);
  {
    std::ofstream os(path, std::ios::binary);
    auto c = data.contiguous();
    os.write(reinterpret_cast<const char*>(c.data_ptr<float>()), c.numel() * sizeof(float));
  }
  auto layout = LayoutDescriptor::from_json_string(
      R"({"dims": [32, 32, 2], "order": "hwc", "domain": "angular_delay", "offset": -0.5, "scale": 2.0})");
  Dataset ds = ingest_external(path, layout);
  REQUIRE(ds.size() == 5);
  CHECK(ds.source == Source::ingested);
  for (std::size_t i = 0; i < 5; ++i) {
    auto want = (data[i] - 0.5f) * 2.0f;
    CHECK(torch::allclose(ds.samples[i].x_ad, want));
    CHECK(torch::equal(ds.samples[i].x_ad, ds.samples[i].z_ad));  // Z = X
    CHECK_FALSE(ds.samples[i].has_side_info());
  }
  std::filesystem::remove(path);
}

TEST_CASE("ingesting an empty file is an error, not an empty dataset") {
  const auto path = temp_path("csidiff_empty.bin");
  { std::ofstream os(path, std::ios::binary); }
  auto layout = LayoutDescriptor::from_json_string(R"({"dims": [32, 32, 2]})");
  CHECK_THROWS_AS(ingest_external(path, layout), data_error);
  std::filesystem::remove(path);
}

TEST_CASE("descriptor count mismatch reports expected vs actual bytes") {
  const auto path = temp_path("csidiff_count.bin");
  {
    std::ofstream os(path, std::ios::binary);
    std::vector<float> buf(3 * 32 * 32 * 2, 0.25f);
    os.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
  }
  auto layout = LayoutDescriptor::from_json_string(R"({"dims": [32, 32, 2], "count": 5})");
  try {
    ingest_external(path, layout);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find(std::to_string(5 * 32 * 32 * 2 * 4)) != std::string::npos);
    CHECK(msg.find(std::to_string(3 * 32 * 32 * 2 * 4)) != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("bad layout descriptors are rejected") {
  CHECK_THROWS_AS(LayoutDescriptor::from_json_string(R"({"order": "hwc"})"), config_error);
  CHECK_THROWS_AS(LayoutDescriptor::from_json_string(R"({"dims": [16, 16, 2]})"), config_error);
  CHECK_THROWS_AS(LayoutDescriptor::from_json_string(R"({"dims": [32,32,2], "dtype": "i8"})"),
                  config_error);
  CHECK_THROWS_AS(LayoutDescriptor::from_json_string("not json"), config_error);
}
