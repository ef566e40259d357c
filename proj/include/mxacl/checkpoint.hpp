#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mxacl/model.hpp"

namespace mxacl {

// Checkpoint layout, all integers little-endian:
//   "MXAC"  u32 version  u32 tensor_count
//   per tensor: u16 name_len, name bytes (UTF-8), u8 rank, rank x u64 dims,
//               u8 dtype (0 = f64), raw IEEE-754 payload
//   u32 json_len, JSON blob {"model": ModelConfig, "stage1_complete": bool, "metadata": {...}}
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const MultiExitModel& model);
MultiExitModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const MultiExitModel& model, const std::filesystem::path& path);
MultiExitModel load_checkpoint(const std::filesystem::path& path);

}  // namespace mxacl
