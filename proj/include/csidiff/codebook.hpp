#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace csidiff {

// Encoder output layout: 8x8 spatial grid of 128-dim vectors.
inline constexpr std::int64_t kCodeGrid = 8;
inline constexpr std::int64_t kCodeVectors = kCodeGrid * kCodeGrid;
inline constexpr std::int64_t kCodeDim = 128;

bool is_power_of_two(std::uint64_t v);

// B = 64 * log2(N_v). Throws config_error for a non-power-of-two N_v.
std::int64_t rate_for(std::int64_t n_v);

// Trainable quantization alphabet: N_v vectors of a fixed dimension.
struct Codebook {
  torch::Tensor vectors;  // [N_v, dim] float

  std::int64_t n_vectors() const { return vectors.size(0); }
  std::int64_t dim() const { return vectors.size(1); }
  void validate() const;

  // Entries drawn uniformly from [-1/N_v, 1/N_v] via the global torch RNG.
  static Codebook init(std::int64_t n_v, std::int64_t dim = kCodeDim);
};

// Packed bit string, MSB-first within each byte, padded with zero bits.
struct BitString {
  std::vector<std::uint8_t> bytes;
  std::uint64_t n_bits = 0;
};

// Fixed-width big-endian-per-index packing, row-major over the 8x8 grid.
BitString pack_bits(const std::vector<std::uint32_t>& indices, std::int64_t n_v);
std::vector<std::uint32_t> unpack_bits(const BitString& bits, std::int64_t n_v);

// Generic fixed-width packing used by both codecs.
BitString pack_fixed_width(const std::vector<std::uint32_t>& values, std::int64_t bits_per_value);
std::vector<std::uint32_t> unpack_fixed_width(const BitString& bits, std::int64_t bits_per_value);

struct Codeword {
  std::vector<std::uint32_t> indices;  // 64 entries in [0, n_v)
  std::int64_t n_v = 0;

  std::int64_t rate_bits() const { return rate_for(n_v); }
  BitString to_bits() const { return pack_bits(indices, n_v); }
  static Codeword from_bits(const BitString& bits, std::int64_t n_v);
};

// Nearest codebook index per row of [n, dim] under squared L2 distance; ties
// resolved to the lowest index.
torch::Tensor nearest_indices(const torch::Tensor& vecs, const torch::Tensor& book_vectors);

// Maps each of the 64 vectors of a continuous code ([8,8,128] or [64,128]) to
// its nearest codebook entry. Returns the codeword and the selected
// embeddings e in the input's shape.
std::pair<Codeword, torch::Tensor> quantize(const torch::Tensor& c_conti, const Codebook& book);

// Embedding lookup for a codeword, shaped [8, 8, dim].
torch::Tensor dequantize(const Codeword& codeword, const Codebook& book);

// Batched training path: c [B, 64, dim] against book vectors [N_v, dim].
// Returns (indices [B, 64] long, e [B, 64, dim]); e is differentiable with
// respect to the codebook parameter.
std::pair<torch::Tensor, torch::Tensor> quantize_batch(const torch::Tensor& c,
                                                       const torch::Tensor& book_vectors);

// L_cb = ||sg[c] - e||^2 + ||c - sg[e]||^2. Per-sample sums; tensors of rank
// 3 are treated as batches along dim 0 and averaged.
torch::Tensor codebook_loss(const torch::Tensor& c_conti, const torch::Tensor& e);

// Decoder input c + sg[e - c]: forward value e, backward identity to c.
torch::Tensor straight_through(const torch::Tensor& c_conti, const torch::Tensor& e);

// Codeword container record: magic | version u16 | param u16 | length u32 in
// bits | payload padded to a byte boundary with zero bits. The diffusion
// codec uses magic "CSIC" with param = N_v; the baseline uses "CSIU" with
// param = bits per element.
inline constexpr char kCodewordMagicVq[5] = "CSIC";
inline constexpr char kCodewordMagicUniform[5] = "CSIU";

void write_codeword_record(std::ostream& os, const char* magic, std::uint16_t param,
                           const BitString& bits);
std::pair<std::uint16_t, BitString> read_codeword_record(std::istream& is, const char* magic);

// Exact on-disk size of one record.
std::size_t codeword_record_bytes(std::uint64_t n_bits);

}  // namespace csidiff
