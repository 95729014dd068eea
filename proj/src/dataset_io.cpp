#include "csidiff/dataset_io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "csidiff/errors.hpp"
#include "csidiff/transform.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset container assumes a little-endian host");

namespace csidiff {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'I', 'D'};
constexpr std::uint16_t kVersion = 1;

constexpr std::uint16_t kFlagSideInfo = 1u << 0;
constexpr std::uint16_t kFlagRaw = 1u << 1;
constexpr std::uint16_t kFlagAngularDelay = 1u << 2;
constexpr std::uint16_t kFlagSplitTest = 1u << 3;
constexpr std::uint16_t kFlagIngested = 1u << 4;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw data_error(data_error::kind::truncated, std::string("dataset: truncated reading ") + what);
  }
  return v;
}

void write_shape(std::ostream& os, const std::vector<std::int64_t>& dims) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
}

std::vector<std::int64_t> read_shape(std::istream& is) {
  const auto ndims = read_pod<std::uint32_t>(is, "shape header");
  if (ndims == 0 || ndims > 4) {
    throw data_error(data_error::kind::malformed_header, "dataset: bad rank in shape header");
  }
  std::vector<std::int64_t> dims;
  for (std::uint32_t i = 0; i < ndims; ++i) {
    dims.push_back(read_pod<std::uint32_t>(is, "shape header"));
  }
  return dims;
}

// Stored as interleaved (real, imag) f32 pairs.
void write_complex(std::ostream& os, const torch::Tensor& t) {
  auto f = torch::view_as_real(t.to(torch::kComplexFloat).contiguous()).contiguous();
  os.write(reinterpret_cast<const char*>(f.data_ptr<float>()), f.numel() * sizeof(float));
}

void write_real(std::ostream& os, const torch::Tensor& t) {
  auto f = t.to(torch::kFloat).contiguous();
  os.write(reinterpret_cast<const char*>(f.data_ptr<float>()), f.numel() * sizeof(float));
}

torch::Tensor read_complex(std::istream& is, const std::vector<std::int64_t>& dims,
                           std::size_t sample_idx) {
  std::vector<std::int64_t> rdims = dims;
  rdims.push_back(2);
  auto f = torch::empty(rdims, torch::kFloat);
  if (!is.read(reinterpret_cast<char*>(f.data_ptr<float>()), f.numel() * sizeof(float))) {
    throw data_error(data_error::kind::truncated,
                     "dataset: file truncated mid-sample at index " + std::to_string(sample_idx));
  }
  return torch::view_as_complex(f);
}

torch::Tensor read_real(std::istream& is, const std::vector<std::int64_t>& dims,
                        std::size_t sample_idx) {
  auto f = torch::empty(dims, torch::kFloat);
  if (!is.read(reinterpret_cast<char*>(f.data_ptr<float>()), f.numel() * sizeof(float))) {
    throw data_error(data_error::kind::truncated,
                     "dataset: file truncated mid-sample at index " + std::to_string(sample_idx));
  }
  return f;
}

void check_same_shape(const torch::Tensor& t, const std::vector<std::int64_t>& dims,
                      std::size_t sample_idx, const char* field) {
  if (!t.defined() || !t.sizes().equals(dims)) {
    throw data_error(data_error::kind::shape_mismatch,
                     std::string("dataset: sample ") + std::to_string(sample_idx) + " field " +
                         field + " does not match the declared shape");
  }
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::string& path) {
  if (dataset.samples.empty()) {
    throw data_error(data_error::kind::shape_mismatch, "write_dataset: empty dataset");
  }
  const CsiSample& first = dataset.samples.front();
  std::uint16_t flags = 0;
  if (first.has_side_info()) flags |= kFlagSideInfo;
  if (first.x_raw.defined()) flags |= kFlagRaw;
  if (first.x_ad.defined()) flags |= kFlagAngularDelay;
  if (dataset.split == Split::test) flags |= kFlagSplitTest;
  if (dataset.source == Source::ingested) flags |= kFlagIngested;
  if (!(flags & (kFlagRaw | kFlagAngularDelay))) {
    throw data_error(data_error::kind::shape_mismatch, "write_dataset: samples carry no data");
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error(data_error::kind::io, "write_dataset: cannot open " + path);

  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, flags);
  write_pod<std::uint64_t>(os, dataset.samples.size());

  std::vector<std::int64_t> raw_dims, ad_dims;
  if (flags & kFlagRaw) {
    raw_dims = first.x_raw.sizes().vec();
    write_shape(os, raw_dims);  // x_raw
    if (flags & kFlagSideInfo) write_shape(os, raw_dims);
    write_shape(os, raw_dims);  // z_raw
  }
  if (flags & kFlagAngularDelay) {
    ad_dims = first.x_ad.sizes().vec();
    write_shape(os, ad_dims);
    if (flags & kFlagSideInfo) write_shape(os, ad_dims);
    write_shape(os, ad_dims);
  }

  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const CsiSample& s = dataset.samples[i];
    if (flags & kFlagRaw) {
      check_same_shape(s.x_raw, raw_dims, i, "x_raw");
      check_same_shape(s.z_raw, raw_dims, i, "z_raw");
      write_complex(os, s.x_raw);
      if (flags & kFlagSideInfo) {
        check_same_shape(s.y_raw, raw_dims, i, "y_raw");
        write_complex(os, s.y_raw);
      }
      write_complex(os, s.z_raw);
    }
    if (flags & kFlagAngularDelay) {
      check_same_shape(s.x_ad, ad_dims, i, "x_ad");
      check_same_shape(s.z_ad, ad_dims, i, "z_ad");
      write_real(os, s.x_ad);
      if (flags & kFlagSideInfo) {
        check_same_shape(s.y_ad, ad_dims, i, "y_ad");
        write_real(os, s.y_ad);
      }
      write_real(os, s.z_ad);
    }
  }
  if (!os) throw data_error(data_error::kind::io, "write_dataset: write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error(data_error::kind::io, "read_dataset: cannot open " + path);

  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw data_error(data_error::kind::malformed_header, "read_dataset: bad magic bytes");
  }
  const auto version = read_pod<std::uint16_t>(is, "version");
  if (version != kVersion) {
    throw data_error(data_error::kind::version_mismatch,
                     "read_dataset: unsupported version " + std::to_string(version));
  }
  const auto flags = read_pod<std::uint16_t>(is, "flags");
  const auto n_samples = read_pod<std::uint64_t>(is, "sample count");
  if (!(flags & (kFlagRaw | kFlagAngularDelay))) {
    throw data_error(data_error::kind::malformed_header, "read_dataset: no fields declared");
  }

  std::vector<std::int64_t> raw_dims, ad_dims;
  if (flags & kFlagRaw) {
    raw_dims = read_shape(is);
    if (flags & kFlagSideInfo) {
      if (read_shape(is) != raw_dims) {
        throw data_error(data_error::kind::malformed_header, "read_dataset: y_raw shape differs");
      }
    }
    if (read_shape(is) != raw_dims) {
      throw data_error(data_error::kind::malformed_header, "read_dataset: z_raw shape differs");
    }
  }
  if (flags & kFlagAngularDelay) {
    ad_dims = read_shape(is);
    if (flags & kFlagSideInfo) {
      if (read_shape(is) != ad_dims) {
        throw data_error(data_error::kind::malformed_header, "read_dataset: y_ad shape differs");
      }
    }
    if (read_shape(is) != ad_dims) {
      throw data_error(data_error::kind::malformed_header, "read_dataset: z_ad shape differs");
    }
  }

  Dataset ds;
  ds.split = (flags & kFlagSplitTest) ? Split::test : Split::train;
  ds.source = (flags & kFlagIngested) ? Source::ingested : Source::synthetic;
  ds.samples.reserve(n_samples);
  for (std::uint64_t i = 0; i < n_samples; ++i) {
    CsiSample s;
    if (flags & kFlagRaw) {
      s.x_raw = read_complex(is, raw_dims, i);
      if (flags & kFlagSideInfo) s.y_raw = read_complex(is, raw_dims, i);
      s.z_raw = read_complex(is, raw_dims, i);
    }
    if (flags & kFlagAngularDelay) {
      s.x_ad = read_real(is, ad_dims, i);
      if (flags & kFlagSideInfo) s.y_ad = read_real(is, ad_dims, i);
      s.z_ad = read_real(is, ad_dims, i);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

LayoutDescriptor LayoutDescriptor::from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error(std::string("layout descriptor: invalid JSON: ") + e.what());
  }
  LayoutDescriptor d;
  if (j.contains("dims")) d.dims = j.at("dims").get<std::vector<std::int64_t>>();
  d.order = j.value("order", d.order);
  d.domain = j.value("domain", d.domain);
  d.dtype = j.value("dtype", d.dtype);
  d.count = j.value("count", d.count);
  d.offset = j.value("offset", d.offset);
  d.scale = j.value("scale", d.scale);
  d.split = j.value("split", d.split);
  d.validate();
  return d;
}

LayoutDescriptor LayoutDescriptor::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("layout descriptor: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

void LayoutDescriptor::validate() const {
  if (dims.empty()) throw config_error("layout descriptor: dims required");
  for (auto d : dims) {
    if (d < 1) throw config_error("layout descriptor: dims must be >= 1");
  }
  if (order != "hwc" && order != "chw") {
    throw config_error("layout descriptor: order must be hwc or chw");
  }
  if (domain != "angular_delay" && domain != "raw") {
    throw config_error("layout descriptor: domain must be angular_delay or raw");
  }
  if (dtype != "f32" && dtype != "f64") {
    throw config_error("layout descriptor: dtype must be f32 or f64");
  }
  if (split != "train" && split != "test") {
    throw config_error("layout descriptor: split must be train or test");
  }
  if (domain == "angular_delay") {
    std::vector<std::int64_t> want =
        order == "hwc" ? std::vector<std::int64_t>{32, 32, 2} : std::vector<std::int64_t>{2, 32, 32};
    if (dims != want) {
      throw config_error("layout descriptor: angular_delay domain requires 32x32x2 samples");
    }
  } else {
    if (dims.size() != 3 || dims.back() != 2) {
      throw config_error("layout descriptor: raw domain requires [A, K, 2] interleaved samples");
    }
  }
  if (scale == 0.0) throw config_error("layout descriptor: scale must be nonzero");
}

Dataset ingest_external(const std::string& path, const LayoutDescriptor& layout) {
  layout.validate();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error(data_error::kind::io, "ingest_external: cannot open " + path);

  const std::uintmax_t file_bytes = std::filesystem::file_size(path);
  if (file_bytes == 0) {
    throw data_error(data_error::kind::truncated, "ingest_external: empty file " + path);
  }

  std::int64_t per_sample_elems = 1;
  for (auto d : layout.dims) per_sample_elems *= d;
  const std::size_t elem_bytes = layout.dtype == "f32" ? 4 : 8;
  const std::uintmax_t per_sample_bytes = per_sample_elems * elem_bytes;

  std::uint64_t count = layout.count;
  if (count == 0) {
    if (file_bytes % per_sample_bytes != 0) {
      throw data_error(data_error::kind::shape_mismatch,
                       "ingest_external: file size " + std::to_string(file_bytes) +
                           " bytes is not a multiple of the per-sample size " +
                           std::to_string(per_sample_bytes) + " bytes");
    }
    count = file_bytes / per_sample_bytes;
  } else if (file_bytes != count * per_sample_bytes) {
    throw data_error(data_error::kind::shape_mismatch,
                     "ingest_external: expected " + std::to_string(count * per_sample_bytes) +
                         " bytes for " + std::to_string(count) + " samples, file has " +
                         std::to_string(file_bytes) + " bytes");
  }

  Dataset ds;
  ds.split = layout.split == "train" ? Split::train : Split::test;
  ds.source = Source::ingested;
  ds.source_desc = path;
  ds.samples.reserve(count);

  std::vector<char> buf(per_sample_bytes);
  for (std::uint64_t i = 0; i < count; ++i) {
    if (!is.read(buf.data(), buf.size())) {
      throw data_error(data_error::kind::truncated,
                       "ingest_external: file truncated mid-sample at index " + std::to_string(i));
    }
    torch::Tensor t;
    if (layout.dtype == "f32") {
      t = torch::from_blob(buf.data(), layout.dims, torch::kFloat).clone();
    } else {
      t = torch::from_blob(buf.data(), layout.dims, torch::kDouble).to(torch::kFloat);
    }
    t = (t + layout.offset) * layout.scale;

    CsiSample s;
    if (layout.domain == "angular_delay") {
      if (layout.order == "chw") t = t.permute({1, 2, 0}).contiguous();
      s.x_ad = t;
      s.z_ad = t.clone();
    } else {
      auto c = torch::view_as_complex(t.contiguous());
      s.x_raw = c;
      s.z_raw = c.clone();
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace csidiff
