#include "csidiff/codebook.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

#include "csidiff/errors.hpp"

namespace csidiff {

bool is_power_of_two(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::int64_t rate_for(std::int64_t n_v) {
  if (n_v < 2 || !is_power_of_two(static_cast<std::uint64_t>(n_v))) {
    throw config_error("rate_for: N_v must be a power of two >= 2, got " + std::to_string(n_v));
  }
  return kCodeVectors * std::countr_zero(static_cast<std::uint64_t>(n_v));
}

void Codebook::validate() const {
  if (!vectors.defined() || vectors.dim() != 2) {
    throw config_error("codebook: vectors must be a [N_v x dim] matrix");
  }
  if (n_vectors() < 2 || !is_power_of_two(static_cast<std::uint64_t>(n_vectors()))) {
    throw config_error("codebook: N_v must be a power of two >= 2");
  }
  if (!vectors.isfinite().all().item<bool>()) {
    throw numerical_error("codebook: non-finite entries");
  }
}

Codebook Codebook::init(std::int64_t n_v, std::int64_t dim) {
  if (n_v < 2 || !is_power_of_two(static_cast<std::uint64_t>(n_v))) {
    throw config_error("codebook: N_v must be a power of two >= 2");
  }
  const double spread = 1.0 / static_cast<double>(n_v);
  Codebook book;
  book.vectors = torch::empty({n_v, dim}, torch::kFloat).uniform_(-spread, spread);
  return book;
}

BitString pack_fixed_width(const std::vector<std::uint32_t>& values, std::int64_t bits_per_value) {
  if (bits_per_value < 1 || bits_per_value > 32) {
    throw config_error("pack: bits per value must be in [1, 32]");
  }
  BitString out;
  out.n_bits = values.size() * static_cast<std::uint64_t>(bits_per_value);
  out.bytes.assign((out.n_bits + 7) / 8, 0);
  std::uint64_t cursor = 0;
  for (std::uint32_t v : values) {
    if (bits_per_value < 32 && v >= (1u << bits_per_value)) {
      throw config_error("pack: value " + std::to_string(v) + " out of range for " +
                         std::to_string(bits_per_value) + " bits");
    }
    for (std::int64_t b = bits_per_value - 1; b >= 0; --b, ++cursor) {
      if ((v >> b) & 1u) out.bytes[cursor / 8] |= static_cast<std::uint8_t>(0x80u >> (cursor % 8));
    }
  }
  return out;
}

std::vector<std::uint32_t> unpack_fixed_width(const BitString& bits, std::int64_t bits_per_value) {
  if (bits_per_value < 1 || bits_per_value > 32) {
    throw config_error("unpack: bits per value must be in [1, 32]");
  }
  if (bits.n_bits % static_cast<std::uint64_t>(bits_per_value) != 0) {
    throw data_error(data_error::kind::shape_mismatch,
                     "unpack: bit length " + std::to_string(bits.n_bits) +
                         " is not divisible by the index width");
  }
  if (bits.bytes.size() * 8 < bits.n_bits) {
    throw data_error(data_error::kind::truncated, "unpack: byte buffer shorter than bit length");
  }
  std::vector<std::uint32_t> values(bits.n_bits / bits_per_value);
  std::uint64_t cursor = 0;
  for (auto& v : values) {
    std::uint32_t acc = 0;
    for (std::int64_t b = 0; b < bits_per_value; ++b, ++cursor) {
      acc = (acc << 1) | ((bits.bytes[cursor / 8] >> (7 - cursor % 8)) & 1u);
    }
    v = acc;
  }
  return values;
}

BitString pack_bits(const std::vector<std::uint32_t>& indices, std::int64_t n_v) {
  const std::int64_t width = rate_for(n_v) / kCodeVectors;
  for (std::uint32_t idx : indices) {
    if (idx >= static_cast<std::uint32_t>(n_v)) {
      throw config_error("pack_bits: index " + std::to_string(idx) + " out of range for N_v=" +
                         std::to_string(n_v));
    }
  }
  return pack_fixed_width(indices, width);
}

std::vector<std::uint32_t> unpack_bits(const BitString& bits, std::int64_t n_v) {
  const std::int64_t width = rate_for(n_v) / kCodeVectors;
  auto values = unpack_fixed_width(bits, width);
  for (std::uint32_t idx : values) {
    if (idx >= static_cast<std::uint32_t>(n_v)) {
      throw data_error(data_error::kind::shape_mismatch,
                       "unpack_bits: index " + std::to_string(idx) + " out of range");
    }
  }
  return values;
}

Codeword Codeword::from_bits(const BitString& bits, std::int64_t n_v) {
  Codeword cw;
  cw.indices = unpack_bits(bits, n_v);
  cw.n_v = n_v;
  if (cw.indices.size() != kCodeVectors) {
    throw data_error(data_error::kind::shape_mismatch,
                     "codeword: expected 64 indices, got " + std::to_string(cw.indices.size()));
  }
  return cw;
}

torch::Tensor nearest_indices(const torch::Tensor& vecs, const torch::Tensor& book_vectors) {
  if (vecs.size(-1) != book_vectors.size(1)) {
    throw config_error("quantize: vector dimension " + std::to_string(vecs.size(-1)) +
                       " does not match codebook dimension " + std::to_string(book_vectors.size(1)));
  }
  torch::NoGradGuard ng;
  const auto d = (vecs.unsqueeze(-2) - book_vectors).pow(2).sum(-1);  // [..., N_v]
  // First-occurrence argmin: strict < keeps the lowest index on ties.
  auto best = d.select(-1, 0).clone();
  auto idx = torch::zeros(best.sizes(), torch::kLong);
  for (std::int64_t v = 1; v < book_vectors.size(0); ++v) {
    auto dv = d.select(-1, v);
    auto m = dv < best;
    idx.masked_fill_(m, v);
    best = torch::where(m, dv, best);
  }
  return idx;
}

std::pair<Codeword, torch::Tensor> quantize(const torch::Tensor& c_conti, const Codebook& book) {
  book.validate();
  auto flat = c_conti.reshape({-1, c_conti.size(-1)});
  if (flat.size(0) != kCodeVectors) {
    throw data_error(data_error::kind::shape_mismatch,
                     "quantize: continuous code must hold 64 vectors");
  }
  auto idx = nearest_indices(flat, book.vectors);
  Codeword cw;
  cw.n_v = book.n_vectors();
  cw.indices.reserve(kCodeVectors);
  auto acc = idx.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < kCodeVectors; ++i) {
    cw.indices.push_back(static_cast<std::uint32_t>(acc[i]));
  }
  auto e = book.vectors.index_select(0, idx).reshape(c_conti.sizes());
  return {std::move(cw), e};
}

torch::Tensor dequantize(const Codeword& codeword, const Codebook& book) {
  book.validate();
  if (codeword.n_v != book.n_vectors()) {
    throw data_error(data_error::kind::shape_mismatch,
                     "dequantize: codeword N_v=" + std::to_string(codeword.n_v) +
                         " does not match codebook N_v=" + std::to_string(book.n_vectors()));
  }
  if (codeword.indices.size() != kCodeVectors) {
    throw data_error(data_error::kind::shape_mismatch, "dequantize: codeword must hold 64 indices");
  }
  auto idx = torch::empty({kCodeVectors}, torch::kLong);
  auto acc = idx.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < kCodeVectors; ++i) {
    const std::uint32_t v = codeword.indices[i];
    if (v >= static_cast<std::uint32_t>(codeword.n_v)) {
      throw data_error(data_error::kind::shape_mismatch, "dequantize: index out of range");
    }
    acc[i] = v;
  }
  return book.vectors.index_select(0, idx).reshape({kCodeGrid, kCodeGrid, book.dim()});
}

std::pair<torch::Tensor, torch::Tensor> quantize_batch(const torch::Tensor& c,
                                                       const torch::Tensor& book_vectors) {
  auto idx = nearest_indices(c, book_vectors);
  auto e = book_vectors.index_select(0, idx.reshape(-1)).reshape(c.sizes());
  return {idx, e};
}

torch::Tensor codebook_loss(const torch::Tensor& c_conti, const torch::Tensor& e) {
  const auto to_book = (c_conti.detach() - e).pow(2);
  const auto to_enc = (c_conti - e.detach()).pow(2);
  if (c_conti.dim() == 3) {
    // Batched [B, 64, dim]: per-sample sums, batch mean.
    return to_book.sum({1, 2}).mean() + to_enc.sum({1, 2}).mean();
  }
  return to_book.sum() + to_enc.sum();
}

torch::Tensor straight_through(const torch::Tensor& c_conti, const torch::Tensor& e) {
  return c_conti + (e - c_conti).detach();
}

std::size_t codeword_record_bytes(std::uint64_t n_bits) {
  return 4 + 2 + 2 + 4 + (n_bits + 7) / 8;
}

namespace {
constexpr std::uint16_t kCodewordVersion = 1;
}

void write_codeword_record(std::ostream& os, const char* magic, std::uint16_t param,
                           const BitString& bits) {
  os.write(magic, 4);
  os.write(reinterpret_cast<const char*>(&kCodewordVersion), 2);
  os.write(reinterpret_cast<const char*>(&param), 2);
  const std::uint32_t n_bits = static_cast<std::uint32_t>(bits.n_bits);
  os.write(reinterpret_cast<const char*>(&n_bits), 4);
  os.write(reinterpret_cast<const char*>(bits.bytes.data()),
           static_cast<std::streamsize>(bits.bytes.size()));
  if (!os) throw data_error(data_error::kind::io, "codeword record: write failed");
}

std::pair<std::uint16_t, BitString> read_codeword_record(std::istream& is, const char* magic) {
  char got[4];
  if (!is.read(got, 4)) {
    throw data_error(data_error::kind::truncated, "codeword record: truncated magic");
  }
  if (std::memcmp(got, magic, 4) != 0) {
    throw data_error(data_error::kind::malformed_header,
                     "codeword record: bad magic, expected " + std::string(magic, 4));
  }
  std::uint16_t version = 0, param = 0;
  std::uint32_t n_bits = 0;
  if (!is.read(reinterpret_cast<char*>(&version), 2) ||
      !is.read(reinterpret_cast<char*>(&param), 2) ||
      !is.read(reinterpret_cast<char*>(&n_bits), 4)) {
    throw data_error(data_error::kind::truncated, "codeword record: truncated header");
  }
  if (version != kCodewordVersion) {
    throw data_error(data_error::kind::version_mismatch,
                     "codeword record: unsupported version " + std::to_string(version));
  }
  BitString bits;
  bits.n_bits = n_bits;
  bits.bytes.assign((n_bits + 7) / 8, 0);
  if (!is.read(reinterpret_cast<char*>(bits.bytes.data()),
               static_cast<std::streamsize>(bits.bytes.size()))) {
    throw data_error(data_error::kind::truncated, "codeword record: truncated payload");
  }
  return {param, std::move(bits)};
}

}  // namespace csidiff
