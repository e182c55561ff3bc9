// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "kvpack/cache.hpp"
#include "kvpack/decoder.hpp"
#include "kvpack/quantize.hpp"

namespace kvpack {

// Eviction: permanently drop every token of groups f >= 2 from a segment —
// factor rows of K and V, positions, and importance entries. Decompression
// (right) factors are untouched. The assignment's masks index the segment's
// compressed range in storage order. Quantized blocks refuse (evict first,
// then quantize). Returns the number of evicted tokens.
template <typename T>
std::size_t evict_low_groups(LayerCache<T>& cache, ModalitySegment<T>& segment,
                             const GroupAssignment& groups);

// Quantize every compressed payload of the segment to 4-bit (left factors
// of low-rank blocks, rows of dense blocks). Right factors and the
// uncompressed tail stay full precision. Idempotent.
template <typename T>
void quantize_segment(ModalitySegment<T>& segment, std::size_t group_size);

} // namespace kvpack
