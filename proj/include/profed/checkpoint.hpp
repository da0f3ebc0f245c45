#pragma once

// Versioned flat-array archive. Layout, little-endian:
//   "PFCK" | u32 version | u64 config hash | i32 next round | u32 array count
//   then per array: u32 name length | name | u64 value count | f64 values
//   and a trailing u64 FNV-1a checksum of everything before it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace profed::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::uint64_t config_hash = 0;
    std::int32_t next_round = 0;
    std::vector<std::pair<std::string, std::vector<double>>> arrays;

    void put(std::string name, std::vector<double> values);
    // Throws CheckpointError(Schema) when absent.
    const std::vector<double>& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);

// Rejects bad magic, other versions, truncated or corrupted data and, when
// `expected_hash` is given, a different configuration.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes,
                             std::optional<std::uint64_t> expected_hash = std::nullopt);

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_hash = std::nullopt);

} // namespace profed::harness
