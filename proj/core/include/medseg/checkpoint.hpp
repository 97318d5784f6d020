#pragma once

// Single-file model archive:
//
//   magic "MEDSEGCK" | u32 version | u64 json length | model config JSON
//   u64 tensor count | per tensor: u32 name length, name, i32 n, c, h, w,
//   float64 values (little endian) | u32 CRC-32 of all preceding bytes
//
// Tensor names follow "<module-path>.<param>" and include batch-norm
// running statistics, so a round trip restores inference behaviour exactly.

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "medseg/model.hpp"

namespace medseg {

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, nn::Tensor>> tensors;
};

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(SegModel& model, const std::filesystem::path& path);

/// Throws IoError when unreadable, FormatError when corrupt or truncated.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint tensors into a model with the same layout.
void restore_state(SegModel& model, const Checkpoint& ckpt);

std::unique_ptr<SegModel> load_model(const std::filesystem::path& path);

}  // namespace medseg
