#pragma once

// Named-tensor checkpoint files.
//
// Layout (little-endian):
//   "DLVT" | u32 version | u32 count |
//   count x { u32 name_len | name bytes (UTF-8) | u8 dtype (0 = f32) | u32 rank | u64 dims[rank] | f32 payload }

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "dlvit/tensor.hpp"

namespace dlvit {

using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes to a sibling temp file first, then renames over the target.
void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);

// FormatError on a bad magic, version or dtype; CorruptionError (with the byte
// offset) when the file ends early or carries trailing bytes. Nothing is
// returned on failure.
TensorMap load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const TensorMap& tensors);
TensorMap decode_checkpoint(const std::string& bytes, const std::string& source = "checkpoint");

// Entries of `extra` replace same-named entries of `base`.
TensorMap merge(TensorMap base, const TensorMap& extra);

}  // namespace dlvit
