#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ambs/tensor.hpp"

// Binary tensor container.
//
//   header   8-byte magic "AMBSCKPT", u32 version, u32 tensor count
//   manifest per tensor: u32 name length, name bytes, u32 rank,
//            rank × u32 dims, u64 payload offset (bytes from payload start)
//   payload  f32 values, row-major, tensors in manifest order
//
// All integers and floats are little-endian.
namespace ambs {

inline constexpr char kCheckpointMagic[8] = {'A', 'M', 'B', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorRefs = std::vector<std::pair<std::string, const Tensor*>>;
using TensorMap = std::map<std::string, Tensor>;

std::string encode_checkpoint(const TensorRefs& tensors);
TensorMap decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const TensorRefs& tensors);
TensorMap load_checkpoint(const std::string& path);

// Copies a named tensor out of a loaded map, checking its shape.
void take_tensor(const TensorMap& m, const std::string& name, Tensor& dst);

}  // namespace ambs
