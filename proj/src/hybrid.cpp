// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/hybrid.hpp"

#include <algorithm>

namespace kvpack {

template <typename T>
std::size_t evict_low_groups(LayerCache<T>& cache, ModalitySegment<T>& segment,
                             const GroupAssignment& groups) {
    if (groups.masks.size() <= 1) return 0;

    const std::size_t n = segment.compressed_len();
    std::vector<std::uint32_t> victims;
    for (std::size_t f = 1; f < groups.masks.size(); ++f)
        victims.insert(victims.end(), groups.masks[f].begin(), groups.masks[f].end());
    if (victims.empty()) return 0;
    std::sort(victims.begin(), victims.end());
    for (std::uint32_t v : victims)
        if (v >= n) throw parameter_error("evict_low_groups: mask index out of range");

    // Segment-local compressed index -> (block, row), as in plan building.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> locate;
    locate.reserve(n);
    for (std::size_t b = 0; b < segment.blocks.size(); ++b)
        for (std::size_t r = 0; r < segment.blocks[b].token_count(); ++r)
            locate.emplace_back(static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(r));

    std::vector<std::vector<std::uint32_t>> per_block(segment.blocks.size());
    std::vector<std::uint64_t> victim_positions;
    victim_positions.reserve(victims.size());
    for (std::uint32_t v : victims) {
        const auto [b, local] = locate[v];
        per_block[b].push_back(local);
        victim_positions.push_back(segment.blocks[b].positions[local]);
    }

    for (std::size_t b = 0; b < segment.blocks.size(); ++b) {
        if (per_block[b].empty()) continue;
        CompressedBlock<T>& block = segment.blocks[b];
        store_remove_rows(block.keys, per_block[b]);
        store_remove_rows(block.values, per_block[b]);
        std::vector<std::uint8_t> drop(block.positions.size(), 0);
        for (std::uint32_t r : per_block[b]) drop[r] = 1;
        std::vector<std::uint64_t> kept;
        kept.reserve(block.positions.size() - per_block[b].size());
        for (std::size_t r = 0; r < block.positions.size(); ++r)
            if (!drop[r]) kept.push_back(block.positions[r]);
        block.positions = std::move(kept);
    }
    // Evicted tokens vanish for good: importance entries go with them.
    cache.importance.remove_positions(victim_positions);
    return victims.size();
}

template <typename T>
void quantize_segment(ModalitySegment<T>& segment, std::size_t group_size) {
    for (CompressedBlock<T>& block : segment.blocks) {
        for (BlockStore<T>* store : {&block.keys, &block.values}) {
            if (auto* lr = std::get_if<LowRankStore<T>>(store)) {
                QuantizedLowRankStore<T> q;
                q.left = quantize_4bit(lr->factors.left, group_size);
                q.right = std::move(lr->factors.right);
                *store = std::move(q);
            } else if (auto* d = std::get_if<DenseStore<T>>(store)) {
                QuantizedDenseStore<T> q;
                q.rows = quantize_4bit(d->rows, group_size);
                *store = std::move(q);
            }
            // Already-quantized forms pass through untouched.
        }
    }
}

#define KVPACK_INSTANTIATE_HYBRID(T)                                                       \
    template std::size_t evict_low_groups<T>(LayerCache<T>&, ModalitySegment<T>&,          \
                                             const GroupAssignment&);                      \
    template void quantize_segment<T>(ModalitySegment<T>&, std::size_t);

KVPACK_INSTANTIATE_HYBRID(float)
KVPACK_INSTANTIATE_HYBRID(double)

#undef KVPACK_INSTANTIATE_HYBRID

} // namespace kvpack
