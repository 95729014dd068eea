#pragma once

#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

namespace csidiff {

// Versioned on-disk container: "CSIK" | version u16 | meta-JSON length u32 +
// bytes | tensor count u32 | per tensor: name, dtype tag, dims, raw
// little-endian data. Floats are stored at their native width (f32 here).
struct CheckpointData {
  nlohmann::json meta;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& path);

}  // namespace csidiff
