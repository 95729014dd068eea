#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "csidiff/channel.hpp"

namespace csidiff {

// Binary dataset container, magic "CSID". Layout:
//   magic (4) | version u16 | flags u16 | n_samples u64 |
//   per stored field: ndims u32, dims u32... |
//   payload: samples in order, fields in declared order, little-endian f32,
//   row-major, complex as interleaved (real, imag).
// Flags: bit 0 side info present, bit 1 raw matrices present, bit 2
// angular-delay present, bit 3 split == test, bit 4 source == ingested.
// Field order: x_raw, [y_raw], z_raw, then x_ad, [y_ad], z_ad.
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

// Declares how an externally produced corpus is laid out on disk.
struct LayoutDescriptor {
  std::vector<std::int64_t> dims;  // per-sample dims as stored
  std::string order = "hwc";       // "hwc" (angle, delay, channel) or "chw"
  std::string domain = "angular_delay";  // "angular_delay" or "raw"
  std::string dtype = "f32";       // "f32" or "f64"
  std::uint64_t count = 0;         // 0 = infer from file size
  double offset = 0.0;             // values mapped as (v + offset) * scale
  double scale = 1.0;
  std::string split = "train";

  static LayoutDescriptor from_json_string(const std::string& text);
  static LayoutDescriptor from_json_file(const std::string& path);
  void validate() const;
};

// Reads a reconstruction-task corpus: returns a Dataset with source=ingested,
// Z = X and Y absent.
Dataset ingest_external(const std::string& path, const LayoutDescriptor& layout);

}  // namespace csidiff
