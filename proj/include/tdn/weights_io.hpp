#pragma once

// TDNW weight container:
//   "TDNW" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length | name | u8 dtype (0 = f32) | u8 rank | u32 dims[rank] | payload
// All integers and payloads little-endian.

#include <cstdint>
#include <string>
#include <vector>

#include "tdn/archdsl.hpp"
#include "tdn/params.hpp"

namespace tdn {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

std::vector<std::uint8_t> encode_tdnw(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_tdnw(const std::vector<std::uint8_t>& bytes);

/// Tensors named "<node>.weight", ".bias", ".bn_scale", ".bn_shift", ".bn_mean", ".bn_var".
/// Conv weights are [k, k, Cin, Cout]; depthwise [k, k, C]; dense [in, units].
std::vector<NamedTensor> to_named_tensors(const ArchGraph& graph, const ModelParams<float>& params);
ModelParams<float> from_named_tensors(const ArchGraph& graph, const std::vector<NamedTensor>& tensors);

void save_weights(const std::string& path, const ArchGraph& graph, const ModelParams<float>& params);
ModelParams<float> load_weights(const std::string& path, const ArchGraph& graph);

}  // namespace tdn
