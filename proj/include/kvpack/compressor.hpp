// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>

#include "kvpack/cache.hpp"
#include "kvpack/linalg.hpp"

namespace kvpack {

// How the per-layer compression rank is chosen.
struct RankScheme {
    enum class Kind { fixed, linear_schedule, variance_target };
    Kind kind = Kind::fixed;

    std::size_t fixed_rank = 64;

    struct Schedule {
        std::size_t first_layer_rank = 16;
        std::size_t last_layer_rank = 128;
        std::size_t num_layers = 32;
    } schedule;

    struct VarianceTarget {
        double target = 0.95;
        std::size_t max_rank = 256;
    } variance;
};

// Rank for `layer_index` under the scheme. The linear schedule interpolates
// between the endpoint ranks with round-half-up. The variance target needs
// the matrix about to be compressed; passing none is a parameter error for
// that scheme kind.
template <typename T>
std::size_t layer_rank(const RankScheme& scheme, std::size_t layer_index,
                       const Matrix<T>* matrix = nullptr);

// Matrix-free form for the schemes that do not inspect the data.
std::size_t layer_rank(const RankScheme& scheme, std::size_t layer_index);

template <typename T>
struct CompressOutcome {
    FactorPair<T> factors;
    std::size_t requested_rank = 0;
    std::size_t effective_rank = 0; // min(requested, rows, cols)
    bool clamped = false;           // true when the request exceeded min(T, width)
};

// Factorize a full segment matrix (token_count x width) at the given rank.
// Ranks above min(token_count, width) clamp with a warning flag rather than
// erroring — compression events early in decode can see short segments.
template <typename T>
CompressOutcome<T> compress_segment(const Matrix<T>& m, std::size_t rank,
                                    const SvdOptions& opts = {});

} // namespace kvpack
