#pragma once

#include "specee/model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace specee {

// Weight file layout (all little-endian):
//   "SPXW" u32 version u32 tensor_count
//   per tensor: u16 name_len, name, u8 rank, u32 dims[rank], f32 data[]
// The first tensor is the pseudo-tensor "config" of rank 1 and length 8:
// vocab, hidden, layers, heads, ffn, max_context as float values, then the
// seed's low and high 32 bits stored as raw float bit patterns.
inline constexpr std::uint32_t kWeightFileVersion = 1;

std::vector<char> serialize_weights(const TransformerModel& model);
TransformerModel deserialize_weights(std::span<const char> bytes);

void save_weights(const TransformerModel& model, const std::string& path);
TransformerModel load_weights(const std::string& path);

/// FNV-1a of the serialized weight bytes; ties profiles to a model.
std::uint64_t model_fingerprint(const TransformerModel& model);

}  // namespace specee
