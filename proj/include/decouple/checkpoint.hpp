#pragma once

#include <cstdint>
#include <filesystem>

#include "decouple/params.hpp"

namespace decouple {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary container: magic, version, ModelConfig, frozen flag, vocabulary
/// hash, then every weight as little-endian float64. Written atomically.
void save_checkpoint(const std::filesystem::path& path, const Parameters& params, std::uint64_t vocab_hash);

/// Fails with ValidationError on bad magic, version mismatch, vocabulary hash
/// mismatch or truncated payload.
Parameters load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_vocab_hash);

/// FNV-1a of the file contents; used for run manifests.
std::uint64_t file_hash(const std::filesystem::path& path);

/// Writes `contents` to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace decouple
