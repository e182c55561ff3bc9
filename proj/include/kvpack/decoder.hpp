// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kvpack/cache.hpp"
#include "kvpack/compressor.hpp"
#include "kvpack/importance.hpp"
#include "kvpack/linalg.hpp"

namespace kvpack {

template <typename T>
struct AttentionWeights {
    Matrix<T> w_q; // model_width x model_width
    Matrix<T> w_k; // model_width x cache_width
    Matrix<T> w_v; // model_width x cache_width
    Matrix<T> w_o; // model_width x model_width

    void validate(const HeadGeometry& g) const;
};

// Attention-aware tiering: one token-level grouping shared by K and V
// (attention column j must multiply value row j), with per-kind tier ranks
// expressed as fractions of the stored rank so R^(1) tracks the compression
// rank under layer-varying schemes.
struct TierSpec {
    std::vector<double> ratios;           // F entries, sum to 1
    std::vector<double> key_fractions;    // F entries in (0,1], first == 1
    std::vector<double> value_fractions;  // likewise

    void validate() const;
};

enum class RecompressMode { joint, separate_epochs };

// Per-matrix compression ranks; 0 keeps that matrix uncompressed (dense).
struct MatrixRanks {
    std::size_t key_visual = 64;
    std::size_t value_visual = 64;
    std::size_t key_textual = 0;
    std::size_t value_textual = 0;

    std::size_t of(Modality m, MatrixKind k) const {
        if (m == Modality::visual) return k == MatrixKind::key ? key_visual : value_visual;
        return k == MatrixKind::key ? key_textual : value_textual;
    }
};

struct DecodeConfig {
    // Tokens accumulated in a segment tail before refactorization; nullopt
    // disables compression entirely.
    std::optional<std::size_t> compression_period = 512;
    MatrixRanks ranks;
    std::optional<RankScheme> rank_scheme; // overrides non-zero fixed ranks per layer
    std::optional<TierSpec> tiering;       // absent => full-rank decompression
    double alpha = 0.25;                   // importance EMA factor
    SvdOptions svd;
    RecompressMode recompress = RecompressMode::joint;

    bool eviction = false;      // drop groups f >= 2 at compression events
    bool quantization = false;  // 4-bit left factors / dense payloads
    std::size_t quant_group_size = 64;

    bool fused = false;           // stream tiles instead of materializing K~/V~
    std::size_t fused_tile = 64;  // rows per tile in the fused path

    std::size_t bytes_per_scalar = 2; // accounting width for reports

    void validate() const;
};

// Where each retrieved token's K/V rows come from, in retrieval order:
// per segment, group-1 rows, then lower groups, then the uncompressed tail.
// rank_k/rank_v are the tier ranks to use when reconstructing (0 = dense or
// full). Entries reference cache storage and stay valid only while the
// cache is unmodified.
template <typename T>
struct RetrievalPlan {
    struct Entry {
        const BlockStore<T>* keys = nullptr;   // null => tail row
        const BlockStore<T>* values = nullptr;
        const Matrix<T>* tail_k = nullptr;
        const Matrix<T>* tail_v = nullptr;
        std::uint32_t row = 0;
        std::uint32_t rank_k = 0;
        std::uint32_t rank_v = 0;
        std::uint64_t position = 0;
    };
    std::vector<Entry> entries;
    std::size_t width = 0;

    std::size_t size() const { return entries.size(); }
};

// Resolved tiering for one segment: shared token groups + per-kind ranks.
struct SegmentTiering {
    GroupAssignment groups;           // ranks field carries the value-kind ranks
    std::vector<std::size_t> key_ranks;
    std::vector<std::size_t> value_ranks;
};

template <typename T>
SegmentTiering resolve_tiering(const LayerCache<T>& cache, const ModalitySegment<T>& segment,
                               const DecodeConfig& cfg);

template <typename T>
RetrievalPlan<T> build_retrieval_plan(const LayerCache<T>& cache, const DecodeConfig& cfg,
                                      std::vector<SegmentTiering>* tiering_out = nullptr);

// Attention output for queries against a retrieval plan.
template <typename T>
struct AttentionResult {
    Matrix<T> context;          // T_q x model_width (pre-W_o, heads concatenated)
    Matrix<double> head_avg;    // T_q x plan.size(), head-averaged probabilities
};

// Materialized path: reconstruct K~/V~ once, then run attention over the
// dense copies. Fused path: stream tiles of `tile` rows, reconstructing
// rows on the fly with online softmax, never holding K~/V~. Both use the
// same row kernel and the same sequential reduction order, so for
// tile >= plan.size() the results are bit-identical.
template <typename T>
AttentionResult<T> attend_materialized(const RetrievalPlan<T>& plan, const Matrix<T>& queries,
                                       const std::vector<std::uint64_t>& query_positions,
                                       const HeadGeometry& geom);

template <typename T>
AttentionResult<T> attend_fused(const RetrievalPlan<T>& plan, const Matrix<T>& queries,
                                const std::vector<std::uint64_t>& query_positions,
                                const HeadGeometry& geom, std::size_t tile);

// Group masks for one segment/kind recorded in a step report.
struct GroupReport {
    Modality modality = Modality::textual;
    std::vector<std::vector<std::uint32_t>> masks;
    std::vector<std::size_t> key_ranks;
    std::vector<std::size_t> value_ranks;
};

struct StepReport {
    std::uint64_t step = 0;
    std::uint64_t bytes_before = 0;      // cache bytes at step entry
    std::uint64_t bytes_after = 0;       // cache bytes after any compression
    std::uint64_t importance_bytes = 0;
    std::uint64_t decompress_flops = 0;      // closed-form, K and V summed
    std::uint64_t decompress_flops_full = 0; // same retrieval at full stored rank
    double flops_reduction = 0.0;            // 1 - flops / flops_full
    bool compression_event = false;
    std::vector<GroupReport> groups;
    std::vector<std::string> warnings;

    // Filled by the harness when a reference chain runs alongside.
    double output_max_abs_err = 0.0;
    double output_rel_err = 0.0;
};

// One full decode step (Algorithm: project, append, group, partially
// decompress, attend, update importance, recompress when the tail reaches
// the period). h is T_q x model_width; returns the attention block output
// (context * W_o), T_q x model_width.
template <typename T>
Matrix<T> decode_step(const Matrix<T>& h, LayerCache<T>& cache,
                      const AttentionWeights<T>& weights, const DecodeConfig& cfg,
                      StepReport& report, Modality token_modality = Modality::textual);

// Uncompressed-attention oracle: standard multi-head attention of the last
// h.rows tokens against the full dense history (which must already include
// the new tokens' K/V rows). Written as plain dense loops, independent of
// the decode path. `keep` (optional) marks history rows that participate;
// excluded rows get -inf logits (masked-attention oracle for eviction).
template <typename T>
Matrix<T> reference_attention(const Matrix<T>& h, const Matrix<T>& full_k,
                              const Matrix<T>& full_v, const AttentionWeights<T>& weights,
                              const HeadGeometry& geom,
                              const std::vector<std::uint8_t>* keep = nullptr);

// Force a compression event on every segment whose tail is non-empty,
// regardless of the period (used after prefill). Reports into `report`.
template <typename T>
void compress_now(LayerCache<T>& cache, const DecodeConfig& cfg, StepReport& report);

// Dense reconstruction of a full segment in storage order (blocks then
// tail), alongside the matching positions.
template <typename T>
Matrix<T> segment_full_matrix(const ModalitySegment<T>& seg, MatrixKind kind,
                              std::size_t width);

} // namespace kvpack
