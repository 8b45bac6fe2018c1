#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pban/model.hpp"

namespace pban {

struct ManifestRecord {
    std::filesystem::path sr_path;
    std::filesystem::path hr_path;
    double mos = 0.0;
};

struct Manifest {
    std::vector<ManifestRecord> records;
};

/// CSV with header exactly `sr_path,hr_path,mos`; fields are not quoted.
/// Relative paths are resolved against the manifest's directory. Blank lines
/// are skipped.
Manifest load_manifest(const std::filesystem::path& path);

/// "PBN1", u32 version, u32-prefixed config JSON, u32 tensor count, then per
/// tensor: u16 name length, name, u8 ndim, u32 dims, f32 data. Little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    NamedWeights<float> weights;
    PbanConfig config;
};

std::vector<std::uint8_t> serialize_checkpoint(const NamedWeights<float>& weights, const PbanConfig& config);

/// FormatError on bad magic/version or tensors that disagree with the
/// embedded config; DecodeError on truncation, trailing bytes or non-finite data.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const NamedWeights<float>& weights, const PbanConfig& config,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pban
