// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary checkpoints. Layout (all integers and floats
// little-endian):
//
//   "VOICYCKP" u32 version
//   u64 n_params, then per parameter:
//     u32 path_len, path, u8 dtype (1 = f64), u8 trainable, u32 rank,
//     u64 dims[rank], values in row-major order
//   optimizer: u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//     u64 n_moments, then per entry: u32 path_len, path, u32 rank,
//     u64 dims[rank], first moment values, second moment values
//   u64 config_len, config JSON bytes
//   u64 FNV-1a digest of every preceding byte
#pragma once

#include <filesystem>

#include "json.hpp"
#include "voicy/grad.hpp"
#include "voicy/optim.hpp"

namespace voicy {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  grad::Parameters params;
  grad::OptimizerState<double> optimizer;
  nlohmann::json config = nlohmann::json::object();
};

/// Writes `path` and a human-readable sidecar next to it (same stem, .json).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Validates magic, version, structure and digest.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path checkpoint_sidecar_path(const std::filesystem::path& path);

}  // namespace voicy
