// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "kvpack/matrix.hpp"

namespace kvpack {

// Per-token attention importance: exponential moving average over decode
// steps of head-averaged attention mass. Scores are always double — they
// gate eviction and grouping decisions, so they do not follow the engine's
// storage precision. Entries are kept sorted by sequence position.
struct ImportanceTable {
    double alpha = 0.25;
    std::vector<std::uint64_t> positions; // ascending
    std::vector<double> scores;           // aligned with positions

    std::size_t size() const { return positions.size(); }

    // New tokens enter with importance 0.
    void append_token(std::uint64_t position);

    // Index of `position` in the table; throws parameter_error if absent.
    std::size_t index_of(std::uint64_t position) const;

    void remove_positions(const std::vector<std::uint64_t>& victims);
};

// EMA update: I <- a^Tq * I + (1 - a^Tq) * mean_t attn[t, :].
// `attn` is T_q x size(): head-averaged attention rows, one per new token,
// columns aligned with the table's position order. Rows must be valid
// distributions (sum to 1 within 1e-4); t_q_count must equal attn.rows.
void update_importance(ImportanceTable& table, const Matrix<double>& attn,
                       std::size_t t_q_count);

struct GroupAssignment {
    // masks[f] holds indices into the compressed range handed to
    // assign_groups (NOT global positions), each ascending.
    std::vector<std::vector<std::uint32_t>> masks;
    std::vector<double> ratios;
    std::vector<std::size_t> ranks;
};

// Partition the compressed tokens into F groups by descending importance.
// Group f receives round(ratios[f] * n) tokens (half rounds up); the last
// group absorbs the remainder so the partition is exact. Ties in score are
// broken by sequence position (earlier position = more important). Ranks
// must be non-increasing and ratios must sum to 1 within 1e-9.
GroupAssignment assign_groups(const ImportanceTable& table,
                              const std::vector<std::uint64_t>& compressed_positions,
                              const std::vector<double>& ratios,
                              const std::vector<std::size_t>& ranks);

struct DecompressCost {
    std::uint64_t flops = 0;     // 2 * T * HD * sum_f ratios[f] * ranks[f]
    double reduction = 0.0;      // 1 - sum_f r_f R^f / R^1, vs full rank
};

// Closed-form partial-decompression cost for one matrix.
DecompressCost flops_partial_decompress(std::size_t token_count, std::size_t width,
                                        const std::vector<double>& ratios,
                                        const std::vector<std::size_t>& ranks);

} // namespace kvpack
