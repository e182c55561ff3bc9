// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kvpack {

void ImportanceTable::append_token(std::uint64_t position) {
    if (!positions.empty() && position <= positions.back())
        throw parameter_error("ImportanceTable: positions must be appended in ascending order");
    positions.push_back(position);
    scores.push_back(0.0);
}

std::size_t ImportanceTable::index_of(std::uint64_t position) const {
    const auto it = std::lower_bound(positions.begin(), positions.end(), position);
    if (it == positions.end() || *it != position)
        throw parameter_error("ImportanceTable: unknown token position");
    return static_cast<std::size_t>(it - positions.begin());
}

void ImportanceTable::remove_positions(const std::vector<std::uint64_t>& victims) {
    for (std::uint64_t p : victims) {
        const std::size_t i = index_of(p);
        positions.erase(positions.begin() + static_cast<std::ptrdiff_t>(i));
        scores.erase(scores.begin() + static_cast<std::ptrdiff_t>(i));
    }
}

void update_importance(ImportanceTable& table, const Matrix<double>& attn,
                       std::size_t t_q_count) {
    if (attn.rows != t_q_count)
        throw shape_error("update_importance: t_q_count does not match attention rows");
    if (attn.cols != table.size())
        throw shape_error("update_importance: attention width does not match table size");
    if (t_q_count == 0) return;
    if (!(table.alpha >= 0.0) || table.alpha > 1.0)
        throw parameter_error("update_importance: alpha must be in [0, 1]");

    for (std::size_t t = 0; t < attn.rows; ++t) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < attn.cols; ++j) {
            const double a = attn(t, j);
            if (!std::isfinite(a)) throw data_error("update_importance: non-finite attention");
            row_sum += a;
        }
        if (std::fabs(row_sum - 1.0) > 1e-4)
            throw data_error("update_importance: attention row is not a distribution");
    }

    // I <- a^Tq * I + (1 - a^Tq) * mean over the T_q rows. With alpha = 0
    // the table becomes exactly the mean attention of this step.
    const double decay = std::pow(table.alpha, static_cast<double>(t_q_count));
    const double blend = 1.0 - decay;
    const double inv_tq = 1.0 / static_cast<double>(t_q_count);
    for (std::size_t j = 0; j < table.size(); ++j) {
        double mean = 0.0;
        for (std::size_t t = 0; t < t_q_count; ++t) mean += attn(t, j);
        mean *= inv_tq;
        table.scores[j] = decay * table.scores[j] + blend * mean;
    }
}

GroupAssignment assign_groups(const ImportanceTable& table,
                              const std::vector<std::uint64_t>& compressed_positions,
                              const std::vector<double>& ratios,
                              const std::vector<std::size_t>& ranks) {
    if (ratios.empty() || ratios.size() != ranks.size())
        throw parameter_error("assign_groups: ratios and ranks must be non-empty and aligned");
    double ratio_sum = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw parameter_error("assign_groups: ratios must be non-negative");
        ratio_sum += r;
    }
    if (std::fabs(ratio_sum - 1.0) > 1e-9)
        throw parameter_error("assign_groups: ratios must sum to 1");
    for (std::size_t f = 1; f < ranks.size(); ++f)
        if (ranks[f] > ranks[f - 1])
            throw parameter_error("assign_groups: ranks must be non-increasing");

    const std::size_t n = compressed_positions.size();
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    // Descending score; equal scores fall back to sequence position
    // (earlier token wins), which makes the partition deterministic.
    std::vector<double> score_of(n);
    for (std::size_t i = 0; i < n; ++i)
        score_of[i] = table.scores[table.index_of(compressed_positions[i])];
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (score_of[a] != score_of[b]) return score_of[a] > score_of[b];
        return compressed_positions[a] < compressed_positions[b];
    });

    GroupAssignment out;
    out.ratios = ratios;
    out.ranks = ranks;
    out.masks.resize(ratios.size());
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < ratios.size(); ++f) {
        std::size_t take;
        if (f + 1 == ratios.size()) {
            take = n - cursor; // last group absorbs rounding remainder
        } else {
            take = static_cast<std::size_t>(std::floor(ratios[f] * static_cast<double>(n) + 0.5));
            take = std::min(take, n - cursor);
        }
        auto& mask = out.masks[f];
        mask.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                    order.begin() + static_cast<std::ptrdiff_t>(cursor + take));
        std::sort(mask.begin(), mask.end()); // storage order within the group
        cursor += take;
    }
    return out;
}

DecompressCost flops_partial_decompress(std::size_t token_count, std::size_t width,
                                        const std::vector<double>& ratios,
                                        const std::vector<std::size_t>& ranks) {
    if (ratios.empty() || ratios.size() != ranks.size())
        throw parameter_error("flops_partial_decompress: ratios and ranks must align");
    double weighted_rank = 0.0;
    for (std::size_t f = 0; f < ratios.size(); ++f)
        weighted_rank += ratios[f] * static_cast<double>(ranks[f]);

    DecompressCost out;
    out.flops = static_cast<std::uint64_t>(std::llround(
        2.0 * static_cast<double>(token_count) * static_cast<double>(width) * weighted_rank));
    out.reduction = ranks[0] == 0 ? 0.0 : 1.0 - weighted_rank / static_cast<double>(ranks[0]);
    return out;
}

} // namespace kvpack
