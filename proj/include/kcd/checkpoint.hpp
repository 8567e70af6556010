#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "kcd/model.hpp"

namespace kcd {

/// Bumped on any change to the layout below.
inline constexpr int checkpoint_version = 1;

/// File layout: a text header
///
///   KCD-CHECKPOINT <version>
///   <key> <value>             model settings, one per line
///   tensor <name> <rows> <cols>   one per tensor, payload order
///   payload <bytes> <fnv1a-64 hex>
///   end
///
/// followed by the tensors as little-endian doubles, row-major.
struct CheckpointInfo {
    std::uint64_t train_seed = 0;
};

void save_checkpoint(const DiagnosisModel& model, const std::filesystem::path& path,
                     const CheckpointInfo& info = {});
DiagnosisModel load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

std::uint64_t fnv1a64(std::string_view bytes);
/// FNV-1a of the whole file, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

}  // namespace kcd
