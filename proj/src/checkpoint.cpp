#include "csidiff/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "csidiff/errors.hpp"

namespace csidiff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'S', 'I', 'K'};
constexpr std::uint16_t kVersion = 1;

enum class dtype_tag : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, u8 = 3 };

dtype_tag tag_for(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat: return dtype_tag::f32;
    case torch::kDouble: return dtype_tag::f64;
    case torch::kLong: return dtype_tag::i64;
    case torch::kByte: return dtype_tag::u8;
    default:
      throw data_error(data_error::kind::io, "checkpoint: unsupported tensor dtype");
  }
}

torch::ScalarType type_for(dtype_tag tag) {
  switch (tag) {
    case dtype_tag::f32: return torch::kFloat;
    case dtype_tag::f64: return torch::kDouble;
    case dtype_tag::i64: return torch::kLong;
    case dtype_tag::u8: return torch::kByte;
  }
  throw data_error(data_error::kind::malformed_header, "checkpoint: unknown dtype tag");
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw data_error(data_error::kind::truncated, std::string("checkpoint: truncated ") + what);
  }
  return v;
}

}  // namespace

const torch::Tensor& CheckpointData::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw data_error(data_error::kind::malformed_header, "checkpoint: missing tensor " + name);
}

bool CheckpointData::has_tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void write_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error(data_error::kind::io, "checkpoint: cannot open " + path);

  os.write(kMagic, 4);
  put(os, kVersion);
  const std::string meta = data.meta.dump();
  put(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  put(os, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, raw] : data.tensors) {
    auto t = raw.detach().contiguous().cpu();
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, static_cast<std::uint8_t>(tag_for(t)));
    put(os, static_cast<std::uint32_t>(t.dim()));
    for (std::int64_t d = 0; d < t.dim(); ++d) put(os, static_cast<std::uint32_t>(t.size(d)));
    os.write(reinterpret_cast<const char*>(t.data_ptr()),
             static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!os) throw data_error(data_error::kind::io, "checkpoint: write failed for " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error(data_error::kind::io, "checkpoint: cannot open " + path);

  char magic[4];
  if (!is.read(magic, 4)) {
    throw data_error(data_error::kind::truncated, "checkpoint: truncated magic");
  }
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw data_error(data_error::kind::malformed_header, "checkpoint: bad magic in " + path);
  }
  const auto version = get<std::uint16_t>(is, "version");
  if (version != kVersion) {
    throw data_error(data_error::kind::version_mismatch,
                     "checkpoint: version " + std::to_string(version) + ", expected " +
                         std::to_string(kVersion));
  }

  CheckpointData data;
  const auto meta_len = get<std::uint32_t>(is, "meta length");
  std::string meta(meta_len, '\0');
  if (!is.read(meta.data(), meta_len)) {
    throw data_error(data_error::kind::truncated, "checkpoint: truncated metadata");
  }
  try {
    data.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(data_error::kind::malformed_header,
                     std::string("checkpoint: metadata parse: ") + e.what());
  }

  const auto count = get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, "tensor name");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw data_error(data_error::kind::truncated, "checkpoint: truncated tensor name");
    }
    const auto tag = static_cast<dtype_tag>(get<std::uint8_t>(is, "dtype"));
    const auto ndims = get<std::uint32_t>(is, "rank");
    std::vector<std::int64_t> dims;
    for (std::uint32_t d = 0; d < ndims; ++d) {
      dims.push_back(get<std::uint32_t>(is, "dims"));
    }
    auto t = torch::empty(dims, torch::TensorOptions().dtype(type_for(tag)));
    if (!is.read(reinterpret_cast<char*>(t.data_ptr()),
                 static_cast<std::streamsize>(t.numel() * t.element_size()))) {
      throw data_error(data_error::kind::truncated, "checkpoint: truncated data for " + name);
    }
    data.tensors.emplace_back(std::move(name), std::move(t));
  }
  return data;
}

}  // namespace csidiff
