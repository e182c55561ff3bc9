// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "kvpack/cache.hpp"

namespace kvpack {

// KVPK snapshot, version 1. Little-endian throughout. Layout:
//
//   magic "KVPK" | u32 version | u32 H | u32 H_kv | u32 D
//   u8 scalar_width (2=half, 4=float, 8=double) | u32 layer_index
//   u64 next_position | u64 steps_taken | u8 segment_count
//   per segment:
//     u8 modality | u64 T_uc | u64 T_cc | u32 R_k | u32 R_v
//     u64 positions[T_cc], u64 positions[T_uc]
//     tail_k, tail_v payloads (T_uc x W scalars each)
//     if T_cc > 0, for K then V:
//       u8 payload_tag (0 = plain factors, 1 = quantized-left factors,
//                       2 = plain dense rows, 3 = quantized dense rows)
//       plain factors:   left (T_cc x R), right (R x W)
//       quantized left:  u32 group_size, codes, scales, mins, then right
//       dense rows:      rows (T_cc x W)
//       quantized dense: u32 group_size, codes, scales, mins
//   importance: f64 alpha | u64 count | (u64 position, f64 score) pairs
//
// Scalars are stored at scalar_width (half uses IEEE binary16); importance
// scores are always f64. R_k/R_v of 0 mean a dense store. The version-1
// record layout holds one compressed block per segment: a separate-epochs
// cache must be consolidated before saving (parameter error otherwise).
inline constexpr std::uint32_t kSnapshotVersion = 1;

template <typename T>
void save_cache(const LayerCache<T>& cache, const std::string& path,
                std::size_t scalar_width = sizeof(T));

template <typename T>
LayerCache<T> load_cache(const std::string& path);

// Scalar width recorded in the snapshot at `path` (reads the header only).
std::size_t snapshot_scalar_width(const std::string& path);

// IEEE binary16 conversions (round to nearest even); used for width-2
// payloads and exposed for tests.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

} // namespace kvpack
