#pragma once

#include <cstdint>
#include <string>

#include "htcn/detector.hpp"

namespace htcn {

// Single-file binary model snapshot: fixed header (magic, format version,
// config hash, run seed), every named parameter tensor, and the frozen
// random projections. Loading restores values bit-exactly and refuses files
// whose config hash does not match the configuration in hand.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    std::uint32_t version = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t run_seed = 0;
};

void save_checkpoint(const std::string& path, const Detector& det, std::uint64_t config_hash,
                     std::uint64_t run_seed);

// Header only, without touching tensor data. Throws on a missing or
// malformed file.
CheckpointInfo read_checkpoint_info(const std::string& path);

// Restores parameters and projections into an already constructed detector.
// Throws if the stored config hash differs from expected_hash or the stored
// tensor set does not exactly match the detector's parameters (names,
// shapes, and count).
CheckpointInfo load_checkpoint(const std::string& path, Detector& det,
                               std::uint64_t expected_hash);

}  // namespace htcn
