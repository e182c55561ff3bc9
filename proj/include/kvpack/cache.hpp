// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "kvpack/importance.hpp"
#include "kvpack/matrix.hpp"
#include "kvpack/quantize.hpp"

namespace kvpack {

enum class Modality : std::uint8_t { visual = 0, textual = 1 };
enum class MatrixKind : std::uint8_t { key = 0, value = 1 };

const char* to_string(Modality m);
const char* to_string(MatrixKind k);

struct HeadGeometry {
    std::size_t num_query_heads = 0; // H
    std::size_t num_kv_heads = 0;    // H_kv, divides H (grouped-query)
    std::size_t head_dim = 0;        // D

    std::size_t model_width() const { return num_query_heads * head_dim; }
    std::size_t cache_width() const { return num_kv_heads * head_dim; }
    std::size_t queries_per_kv_head() const { return num_query_heads / num_kv_heads; }

    void validate() const;
};

// Storage for one matrix kind inside a compressed block. Four forms: plain
// low-rank factors, factors with a quantized left factor (right factors stay
// full precision — they are shared decompression matrices), plain dense rows
// (a kind configured as uncompressed), and quantized dense rows.
template <typename T>
struct LowRankStore {
    FactorPair<T> factors;
};

template <typename T>
struct QuantizedLowRankStore {
    QuantizedMatrix<T> left; // token_count x rank
    Matrix<T> right;         // rank x width
};

template <typename T>
struct DenseStore {
    Matrix<T> rows; // token_count x width
};

template <typename T>
struct QuantizedDenseStore {
    QuantizedMatrix<T> rows;
};

template <typename T>
using BlockStore = std::variant<LowRankStore<T>, QuantizedLowRankStore<T>,
                                DenseStore<T>, QuantizedDenseStore<T>>;

template <typename T>
std::size_t store_token_count(const BlockStore<T>& s);
template <typename T>
std::size_t store_rank(const BlockStore<T>& s); // 0 for dense forms
template <typename T>
std::size_t store_width(const BlockStore<T>& s);
template <typename T>
bool store_is_quantized(const BlockStore<T>& s);

// Reconstruct one token row into out[0..width), using at most `use_rank`
// factor rows (ignored by dense forms; 0 means the stored rank). The loop
// is a fixed sequential accumulation — both decode paths call this exact
// kernel so their reconstructed rows are bit-identical.
template <typename T>
void store_decompress_row(const BlockStore<T>& s, std::size_t row, std::size_t use_rank, T* out);

// Dense reconstruction of the whole block at full stored fidelity.
template <typename T>
Matrix<T> store_reconstruct(const BlockStore<T>& s);

// Drop the given token rows (indices into the block) from the store.
// Quantized stores refuse: evict before quantizing.
template <typename T>
void store_remove_rows(BlockStore<T>& s, const std::vector<std::uint32_t>& victims);

// One jointly-factorized span of tokens. The default recompression policy
// keeps exactly one block per segment; the separate-epochs ablation appends
// one block per compression event.
template <typename T>
struct CompressedBlock {
    std::vector<std::uint64_t> positions; // global, ascending
    BlockStore<T> keys{DenseStore<T>{}};
    BlockStore<T> values{DenseStore<T>{}};

    std::size_t token_count() const { return positions.size(); }
};

template <typename T>
struct ModalitySegment {
    Modality modality = Modality::textual;
    std::vector<CompressedBlock<T>> blocks;
    Matrix<T> tail_k; // T_uc x cache_width, uncompressed
    Matrix<T> tail_v;
    std::vector<std::uint64_t> tail_positions;

    std::size_t compressed_len() const {
        std::size_t n = 0;
        for (const auto& b : blocks) n += b.token_count();
        return n;
    }
    std::size_t tail_len() const { return tail_positions.size(); }
    std::size_t token_count() const { return compressed_len() + tail_len(); }

    std::vector<std::uint64_t> compressed_positions() const;
};

// Per-layer, per-request KV state: one segment per modality, one importance
// table spanning both, and the running position counter.
template <typename T>
struct LayerCache {
    HeadGeometry geometry;
    std::size_t layer_index = 0;
    ModalitySegment<T> visual;
    ModalitySegment<T> textual;
    ImportanceTable importance;
    std::uint64_t next_position = 0;
    std::uint64_t steps_taken = 0;

    explicit LayerCache(HeadGeometry g = {}, std::size_t layer = 0)
        : geometry(g), layer_index(layer) {
        visual.modality = Modality::visual;
        textual.modality = Modality::textual;
        for (auto* s : {&visual, &textual}) {
            s->tail_k = Matrix<T>(0, geometry.cache_width());
            s->tail_v = Matrix<T>(0, geometry.cache_width());
        }
    }

    ModalitySegment<T>& segment(Modality m) { return m == Modality::visual ? visual : textual; }
    const ModalitySegment<T>& segment(Modality m) const {
        return m == Modality::visual ? visual : textual;
    }

    std::size_t total_tokens() const { return visual.token_count() + textual.token_count(); }
};

// Append projected K/V rows for new tokens of one modality to the
// uncompressed tail. Rows must be cache_width wide and finite; each new
// token gets a fresh global position and an importance entry of 0.
template <typename T>
void append_tokens(LayerCache<T>& cache, Modality modality, const Matrix<T>& k_rows,
                   const Matrix<T>& v_rows);

// Byte accounting. Scalar payloads (factors, tails, quantization scales)
// count as bytes_per_scalar each; packed 4-bit codes count their exact byte
// footprint. The importance table is reported separately from cache bytes.
struct SegmentBytes {
    std::uint64_t scalar_count = 0;
    std::uint64_t packed_code_bytes = 0;
    std::uint64_t bytes = 0;
};

struct CacheBytes {
    SegmentBytes visual;
    SegmentBytes textual;
    std::uint64_t cache_bytes = 0;      // visual + textual
    std::uint64_t importance_bytes = 0; // positions u64 + scores f64
};

template <typename T>
CacheBytes memory_bytes(const LayerCache<T>& cache, std::size_t bytes_per_scalar);

// Scalar-count compression ratio of one matrix: T*HD / (T*R + R*HD).
// Precision-independent; rank 0 (uncompressed) reports 1.
double compression_ratio(std::size_t token_count, std::size_t width, std::size_t rank);

} // namespace kvpack
