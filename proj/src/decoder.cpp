// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kvpack/hybrid.hpp"

namespace kvpack {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t resolved_tier_rank(double fraction, std::size_t stored_rank) {
    if (stored_rank == 0) return 0;
    const auto r = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(stored_rank) + 0.5));
    return std::clamp<std::size_t>(r, 1, stored_rank);
}

// One retrieved K or V row into a T buffer. Both decode paths reconstruct
// rows through this single helper so their inputs are bit-identical.
template <typename T>
inline void plan_row(const RetrievalPlan<T>& plan, std::size_t j, MatrixKind kind, T* out) {
    const auto& e = plan.entries[j];
    if (e.keys != nullptr) {
        const BlockStore<T>* s = kind == MatrixKind::key ? e.keys : e.values;
        const std::size_t rank = kind == MatrixKind::key ? e.rank_k : e.rank_v;
        store_decompress_row(*s, e.row, rank, out);
    } else {
        const Matrix<T>* t = kind == MatrixKind::key ? e.tail_k : e.tail_v;
        const T* src = t->row(e.row);
        std::copy(src, src + t->cols, out);
    }
}

template <typename T>
void check_attend_args(const RetrievalPlan<T>& plan, const Matrix<T>& queries,
                       const std::vector<std::uint64_t>& query_positions,
                       const HeadGeometry& geom) {
    geom.validate();
    if (queries.cols != geom.model_width())
        throw shape_error("attend: queries must be model_width wide");
    if (query_positions.size() != queries.rows)
        throw shape_error("attend: one position per query row required");
    if (plan.size() == 0)
        throw parameter_error("attend: empty retrieval plan");
    if (plan.width != geom.cache_width())
        throw shape_error("attend: plan width does not match geometry");
}

} // namespace

template <typename T>
void AttentionWeights<T>::validate(const HeadGeometry& g) const {
    const std::size_t hd = g.model_width();
    const std::size_t w = g.cache_width();
    if (w_q.rows != hd || w_q.cols != hd) throw shape_error("AttentionWeights: bad W_q shape");
    if (w_k.rows != hd || w_k.cols != w) throw shape_error("AttentionWeights: bad W_k shape");
    if (w_v.rows != hd || w_v.cols != w) throw shape_error("AttentionWeights: bad W_v shape");
    if (w_o.rows != hd || w_o.cols != hd) throw shape_error("AttentionWeights: bad W_o shape");
}

void TierSpec::validate() const {
    if (ratios.empty()) throw parameter_error("TierSpec: at least one group required");
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw parameter_error("TierSpec: ratios must be non-negative");
        sum += r;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw parameter_error("TierSpec: ratios must sum to 1");
    for (const auto* fr : {&key_fractions, &value_fractions}) {
        if (fr->size() != ratios.size())
            throw parameter_error("TierSpec: one rank fraction per group required");
        if ((*fr)[0] != 1.0)
            throw parameter_error("TierSpec: group 1 must keep the full stored rank");
        for (std::size_t f = 0; f < fr->size(); ++f) {
            if (!((*fr)[f] > 0.0) || (*fr)[f] > 1.0)
                throw parameter_error("TierSpec: rank fractions must be in (0, 1]");
            if (f > 0 && (*fr)[f] > (*fr)[f - 1])
                throw parameter_error("TierSpec: rank fractions must be non-increasing");
        }
    }
}

void DecodeConfig::validate() const {
    if (!(alpha >= 0.0) || alpha > 1.0)
        throw parameter_error("DecodeConfig: alpha must be in [0, 1]");
    if (compression_period && *compression_period < 1)
        throw parameter_error("DecodeConfig: compression_period must be >= 1");
    if (fused_tile < 1) throw parameter_error("DecodeConfig: fused_tile must be >= 1");
    if (quant_group_size < 1)
        throw parameter_error("DecodeConfig: quant_group_size must be >= 1");
    if (bytes_per_scalar < 1)
        throw parameter_error("DecodeConfig: bytes_per_scalar must be >= 1");
    if (tiering) tiering->validate();
    if (eviction && !tiering)
        throw parameter_error("DecodeConfig: eviction needs a tiering spec for its groups");
}

template <typename T>
SegmentTiering resolve_tiering(const LayerCache<T>& cache, const ModalitySegment<T>& segment,
                               const DecodeConfig& cfg) {
    SegmentTiering out;
    const std::vector<std::uint64_t> positions = segment.compressed_positions();
    if (positions.empty()) return out;

    const std::size_t stored_k = store_rank(segment.blocks[0].keys);
    const std::size_t stored_v = store_rank(segment.blocks[0].values);

    if (cfg.tiering) {
        const TierSpec& ts = *cfg.tiering;
        const std::size_t f_count = ts.ratios.size();
        out.key_ranks.resize(f_count);
        out.value_ranks.resize(f_count);
        for (std::size_t f = 0; f < f_count; ++f) {
            out.key_ranks[f] = resolved_tier_rank(ts.key_fractions[f], stored_k);
            out.value_ranks[f] = resolved_tier_rank(ts.value_fractions[f], stored_v);
        }
        // The grouping is shared by K and V; the assignment's rank column
        // reports whichever kind is actually factored (value precedence).
        const auto& basis = stored_v > 0 ? out.value_ranks : out.key_ranks;
        out.groups = assign_groups(cache.importance, positions, ts.ratios, basis);
    } else {
        out.key_ranks = {stored_k};
        out.value_ranks = {stored_v};
        out.groups.ratios = {1.0};
        out.groups.ranks = {stored_v > 0 ? stored_v : stored_k};
        out.groups.masks.emplace_back(positions.size());
        auto& all = out.groups.masks[0];
        for (std::size_t i = 0; i < positions.size(); ++i)
            all[i] = static_cast<std::uint32_t>(i);
    }
    return out;
}

template <typename T>
RetrievalPlan<T> build_retrieval_plan(const LayerCache<T>& cache, const DecodeConfig& cfg,
                                      std::vector<SegmentTiering>* tiering_out) {
    RetrievalPlan<T> plan;
    plan.width = cache.geometry.cache_width();

    for (Modality m : {Modality::visual, Modality::textual}) {
        const ModalitySegment<T>& seg = cache.segment(m);
        SegmentTiering st = resolve_tiering(cache, seg, cfg);

        if (!seg.blocks.empty()) {
            // Segment-local compressed row index -> (block, row-in-block).
            std::vector<std::pair<std::uint32_t, std::uint32_t>> locate;
            locate.reserve(seg.compressed_len());
            for (std::size_t b = 0; b < seg.blocks.size(); ++b)
                for (std::size_t r = 0; r < seg.blocks[b].token_count(); ++r)
                    locate.emplace_back(static_cast<std::uint32_t>(b),
                                        static_cast<std::uint32_t>(r));

            for (std::size_t f = 0; f < st.groups.masks.size(); ++f) {
                for (std::uint32_t row : st.groups.masks[f]) {
                    const auto [b, local] = locate[row];
                    const CompressedBlock<T>& block = seg.blocks[b];
                    typename RetrievalPlan<T>::Entry e;
                    e.keys = &block.keys;
                    e.values = &block.values;
                    e.row = local;
                    e.rank_k = static_cast<std::uint32_t>(
                        std::min(st.key_ranks[f], store_rank(block.keys)));
                    e.rank_v = static_cast<std::uint32_t>(
                        std::min(st.value_ranks[f], store_rank(block.values)));
                    e.position = block.positions[local];
                    plan.entries.push_back(e);
                }
            }
        }
        for (std::size_t r = 0; r < seg.tail_len(); ++r) {
            typename RetrievalPlan<T>::Entry e;
            e.tail_k = &seg.tail_k;
            e.tail_v = &seg.tail_v;
            e.row = static_cast<std::uint32_t>(r);
            e.position = seg.tail_positions[r];
            plan.entries.push_back(e);
        }
        if (tiering_out) tiering_out->push_back(std::move(st));
    }
    return plan;
}

template <typename T>
AttentionResult<T> attend_materialized(const RetrievalPlan<T>& plan, const Matrix<T>& queries,
                                       const std::vector<std::uint64_t>& query_positions,
                                       const HeadGeometry& geom) {
    check_attend_args(plan, queries, query_positions, geom);
    const std::size_t n = plan.size();
    const std::size_t w = geom.cache_width();
    const std::size_t heads = geom.num_query_heads;
    const std::size_t d = geom.head_dim;
    const std::size_t per_kv = geom.queries_per_kv_head();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_heads = 1.0 / static_cast<double>(heads);

    Matrix<T> ktilde(n, w), vtilde(n, w);
    for (std::size_t j = 0; j < n; ++j) {
        plan_row(plan, j, MatrixKind::key, ktilde.row(j));
        plan_row(plan, j, MatrixKind::value, vtilde.row(j));
    }

    AttentionResult<T> out;
    out.context = Matrix<T>(queries.rows, geom.model_width());
    out.head_avg = Matrix<double>(queries.rows, n);

    std::vector<double> logits(n);
    std::vector<std::uint8_t> visible(n);
    std::vector<double> vacc(d);

    for (std::size_t i = 0; i < queries.rows; ++i) {
        for (std::size_t j = 0; j < n; ++j)
            visible[j] = plan.entries[j].position <= query_positions[i] ? 1 : 0;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t g = h / per_kv;
            const T* q = queries.row(i) + h * d;

            double max_logit = kNegInf;
            for (std::size_t j = 0; j < n; ++j) {
                if (!visible[j]) continue;
                const T* krow = ktilde.row(j) + g * d;
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    dot += static_cast<double>(q[c]) * static_cast<double>(krow[c]);
                logits[j] = dot * inv_sqrt_d;
                if (logits[j] > max_logit) max_logit = logits[j];
            }

            double zsum = 0.0;
            std::fill(vacc.begin(), vacc.end(), 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                if (!visible[j]) continue;
                const double e = std::exp(logits[j] - max_logit);
                zsum += e;
                const T* vrow = vtilde.row(j) + g * d;
                for (std::size_t c = 0; c < d; ++c)
                    vacc[c] += e * static_cast<double>(vrow[c]);
            }
            for (std::size_t c = 0; c < d; ++c)
                out.context(i, h * d + c) = static_cast<T>(vacc[c] / zsum);
            for (std::size_t j = 0; j < n; ++j) {
                if (!visible[j]) continue;
                out.head_avg(i, j) += std::exp(logits[j] - max_logit) / zsum * inv_heads;
            }
        }
    }
    return out;
}

template <typename T>
AttentionResult<T> attend_fused(const RetrievalPlan<T>& plan, const Matrix<T>& queries,
                                const std::vector<std::uint64_t>& query_positions,
                                const HeadGeometry& geom, std::size_t tile) {
    check_attend_args(plan, queries, query_positions, geom);
    if (tile < 1) throw parameter_error("attend_fused: tile must be >= 1");
    const std::size_t n = plan.size();
    const std::size_t w = geom.cache_width();
    const std::size_t heads = geom.num_query_heads;
    const std::size_t d = geom.head_dim;
    const std::size_t per_kv = geom.queries_per_kv_head();
    const std::size_t t_q = queries.rows;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_heads = 1.0 / static_cast<double>(heads);

    AttentionResult<T> out;
    out.context = Matrix<T>(t_q, geom.model_width());
    out.head_avg = Matrix<double>(t_q, n);

    // Running online-softmax state per (query, head). The per-head score
    // scratch (`logits`) exists to emit the head-averaged attention row.
    Matrix<double> run_max(t_q, heads);
    std::fill(run_max.data.begin(), run_max.data.end(), kNegInf);
    Matrix<double> run_z(t_q, heads);
    Matrix<double> run_v(t_q, heads * d);
    std::vector<Matrix<double>> logits(heads, Matrix<double>(t_q, n));

    Matrix<T> kbuf(std::min(tile, n), w);
    Matrix<T> vbuf(kbuf.rows, w);

    for (std::size_t tile_start = 0; tile_start < n; tile_start += tile) {
        const std::size_t tile_end = std::min(tile_start + tile, n);
        for (std::size_t j = tile_start; j < tile_end; ++j) {
            plan_row(plan, j, MatrixKind::key, kbuf.row(j - tile_start));
            plan_row(plan, j, MatrixKind::value, vbuf.row(j - tile_start));
        }

        for (std::size_t i = 0; i < t_q; ++i) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t g = h / per_kv;
                const T* q = queries.row(i) + h * d;

                double tile_max = kNegInf;
                for (std::size_t j = tile_start; j < tile_end; ++j) {
                    if (plan.entries[j].position > query_positions[i]) continue;
                    const T* krow = kbuf.row(j - tile_start) + g * d;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < d; ++c)
                        dot += static_cast<double>(q[c]) * static_cast<double>(krow[c]);
                    logits[h](i, j) = dot * inv_sqrt_d;
                    if (logits[h](i, j) > tile_max) tile_max = logits[h](i, j);
                }
                if (tile_max == kNegInf) continue; // fully masked tile

                const double prev_max = run_max(i, h);
                const double new_max = prev_max > tile_max ? prev_max : tile_max;
                const double rescale = std::exp(prev_max - new_max);
                run_z(i, h) *= rescale;
                double* vacc = run_v.row(i) + h * d;
                for (std::size_t c = 0; c < d; ++c) vacc[c] *= rescale;

                for (std::size_t j = tile_start; j < tile_end; ++j) {
                    if (plan.entries[j].position > query_positions[i]) continue;
                    const double e = std::exp(logits[h](i, j) - new_max);
                    run_z(i, h) += e;
                    const T* vrow = vbuf.row(j - tile_start) + g * d;
                    for (std::size_t c = 0; c < d; ++c)
                        vacc[c] += e * static_cast<double>(vrow[c]);
                }
                run_max(i, h) = new_max;
            }
        }
    }

    for (std::size_t i = 0; i < t_q; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            const double zsum = run_z(i, h);
            const double max_logit = run_max(i, h);
            const double* vacc = run_v.row(i) + h * d;
            for (std::size_t c = 0; c < d; ++c)
                out.context(i, h * d + c) = static_cast<T>(vacc[c] / zsum);
            for (std::size_t j = 0; j < n; ++j) {
                if (plan.entries[j].position > query_positions[i]) continue;
                out.head_avg(i, j) += std::exp(logits[h](i, j) - max_logit) / zsum * inv_heads;
            }
        }
    }
    return out;
}

template <typename T>
Matrix<T> reference_attention(const Matrix<T>& h, const Matrix<T>& full_k,
                              const Matrix<T>& full_v, const AttentionWeights<T>& weights,
                              const HeadGeometry& geom, const std::vector<std::uint8_t>* keep) {
    geom.validate();
    weights.validate(geom);
    if (h.cols != geom.model_width())
        throw shape_error("reference_attention: activations must be model_width wide");
    if (full_k.rows != full_v.rows || full_k.cols != geom.cache_width() ||
        full_v.cols != geom.cache_width())
        throw shape_error("reference_attention: bad K/V history shape");
    if (h.rows > full_k.rows)
        throw shape_error("reference_attention: more queries than history rows");
    if (keep && keep->size() != full_k.rows)
        throw shape_error("reference_attention: keep mask must cover the history");

    const std::size_t n = full_k.rows;
    const std::size_t t_q = h.rows;
    const std::size_t heads = geom.num_query_heads;
    const std::size_t d = geom.head_dim;
    const std::size_t per_kv = geom.queries_per_kv_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    const Matrix<T> q = matmul(h, weights.w_q);
    Matrix<T> context(t_q, geom.model_width());

    std::vector<double> probs(n);
    for (std::size_t i = 0; i < t_q; ++i) {
        const std::size_t causal_limit = n - t_q + i; // last visible row index
        for (std::size_t head = 0; head < heads; ++head) {
            const std::size_t g = head / per_kv;
            double best = kNegInf;
            for (std::size_t j = 0; j <= causal_limit; ++j) {
                if (keep && !(*keep)[j]) {
                    probs[j] = kNegInf;
                    continue;
                }
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    dot += static_cast<double>(q(i, head * d + c)) *
                           static_cast<double>(full_k(j, g * d + c));
                probs[j] = dot * scale;
                best = std::max(best, probs[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j <= causal_limit; ++j) {
                probs[j] = probs[j] == kNegInf ? 0.0 : std::exp(probs[j] - best);
                denom += probs[j];
            }
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j <= causal_limit; ++j)
                    acc += probs[j] * static_cast<double>(full_v(j, g * d + c));
                context(i, head * d + c) = static_cast<T>(acc / denom);
            }
        }
    }
    return matmul(context, weights.w_o);
}

template <typename T>
Matrix<T> segment_full_matrix(const ModalitySegment<T>& seg, MatrixKind kind,
                              std::size_t width) {
    Matrix<T> out(seg.token_count(), width);
    std::size_t cursor = 0;
    for (const auto& block : seg.blocks) {
        const BlockStore<T>& s = kind == MatrixKind::key ? block.keys : block.values;
        if (store_width(s) != width)
            throw shape_error("segment_full_matrix: block width mismatch");
        for (std::size_t r = 0; r < block.token_count(); ++r, ++cursor)
            store_decompress_row(s, r, 0, out.row(cursor));
    }
    const Matrix<T>& tail = kind == MatrixKind::key ? seg.tail_k : seg.tail_v;
    for (std::size_t r = 0; r < tail.rows; ++r, ++cursor) {
        const T* src = tail.row(r);
        std::copy(src, src + width, out.row(cursor));
    }
    return out;
}

namespace {

// Configured rank for one matrix, with the layer scheme override. 0 keeps
// the matrix dense.
template <typename T>
std::size_t resolve_compression_rank(const LayerCache<T>& cache, const DecodeConfig& cfg,
                                     Modality m, MatrixKind kind, const Matrix<T>& matrix) {
    const std::size_t base = cfg.ranks.of(m, kind);
    if (base == 0) return 0;
    if (cfg.rank_scheme && cfg.rank_scheme->kind != RankScheme::Kind::fixed)
        return layer_rank(*cfg.rank_scheme, cache.layer_index, &matrix);
    return base;
}

template <typename T>
BlockStore<T> make_store(const Matrix<T>& full, std::size_t rank, const SvdOptions& svd,
                         Modality m, MatrixKind kind, StepReport& report) {
    if (rank == 0) return DenseStore<T>{full};
    CompressOutcome<T> outcome = compress_segment(full, rank, svd);
    if (outcome.clamped)
        report.warnings.push_back(std::string(to_string(m)) + " " + to_string(kind) +
                                  " rank clamped to " + std::to_string(outcome.effective_rank));
    return LowRankStore<T>{std::move(outcome.factors)};
}

// Refactorize one segment: fold blocks+tail into a single jointly
// compressed block (default), or factor the tail into its own block
// (separate-epochs ablation). Eviction runs on the fresh factors, then
// quantization.
template <typename T>
void recompress_segment(LayerCache<T>& cache, ModalitySegment<T>& seg, const DecodeConfig& cfg,
                        StepReport& report) {
    const std::size_t width = cache.geometry.cache_width();

    Matrix<T> full_k, full_v;
    std::vector<std::uint64_t> positions;
    if (cfg.recompress == RecompressMode::joint) {
        full_k = segment_full_matrix(seg, MatrixKind::key, width);
        full_v = segment_full_matrix(seg, MatrixKind::value, width);
        positions = seg.compressed_positions();
        positions.insert(positions.end(), seg.tail_positions.begin(), seg.tail_positions.end());
    } else {
        full_k = seg.tail_k;
        full_v = seg.tail_v;
        positions = seg.tail_positions;
    }
    if (positions.empty()) return;

    const std::size_t rank_k =
        resolve_compression_rank(cache, cfg, seg.modality, MatrixKind::key, full_k);
    const std::size_t rank_v =
        resolve_compression_rank(cache, cfg, seg.modality, MatrixKind::value, full_v);

    CompressedBlock<T> block;
    block.positions = std::move(positions);
    block.keys = make_store(full_k, rank_k, cfg.svd, seg.modality, MatrixKind::key, report);
    block.values = make_store(full_v, rank_v, cfg.svd, seg.modality, MatrixKind::value, report);

    if (cfg.recompress == RecompressMode::joint)
        seg.blocks.clear();
    seg.blocks.push_back(std::move(block));
    seg.tail_k = Matrix<T>(0, width);
    seg.tail_v = Matrix<T>(0, width);
    seg.tail_positions.clear();

    if (cfg.eviction) {
        const SegmentTiering st = resolve_tiering(cache, seg, cfg);
        evict_low_groups(cache, seg, st.groups);
    }
    if (cfg.quantization) quantize_segment(seg, cfg.quant_group_size);
    report.compression_event = true;
}

template <typename T>
bool segment_compressible(const ModalitySegment<T>& seg, const DecodeConfig& cfg) {
    return cfg.ranks.of(seg.modality, MatrixKind::key) > 0 ||
           cfg.ranks.of(seg.modality, MatrixKind::value) > 0;
}

// Closed-form decompression cost of the current plan, per segment/kind.
template <typename T>
void account_decompression(const LayerCache<T>& cache,
                           const std::vector<SegmentTiering>& tiering, StepReport& report) {
    const std::size_t width = cache.geometry.cache_width();
    std::uint64_t tiered_flops = 0;
    std::uint64_t full_flops = 0;

    std::size_t seg_idx = 0;
    for (Modality m : {Modality::visual, Modality::textual}) {
        const ModalitySegment<T>& seg = cache.segment(m);
        const SegmentTiering& st = tiering[seg_idx++];
        if (seg.blocks.empty()) continue;

        GroupReport gr;
        gr.modality = m;
        gr.masks = st.groups.masks;
        gr.key_ranks = st.key_ranks;
        gr.value_ranks = st.value_ranks;
        report.groups.push_back(std::move(gr));

        for (const auto& block : seg.blocks) {
            for (MatrixKind kind : {MatrixKind::key, MatrixKind::value}) {
                const BlockStore<T>& s =
                    kind == MatrixKind::key ? block.keys : block.values;
                const std::size_t stored = store_rank(s);
                if (stored == 0) continue; // dense rows: no decompression work
                const auto& ranks =
                    kind == MatrixKind::key ? st.key_ranks : st.value_ranks;
                std::vector<std::size_t> clamped(ranks.size());
                for (std::size_t f = 0; f < ranks.size(); ++f)
                    clamped[f] = std::min(ranks[f], stored);
                tiered_flops += flops_partial_decompress(block.token_count(), width,
                                                         st.groups.ratios, clamped)
                                    .flops;
                full_flops += flops_partial_decompress(block.token_count(), width, {1.0},
                                                       {stored})
                                  .flops;
            }
        }
    }
    report.decompress_flops = tiered_flops;
    report.decompress_flops_full = full_flops;
    report.flops_reduction =
        full_flops == 0 ? 0.0
                        : 1.0 - static_cast<double>(tiered_flops) / static_cast<double>(full_flops);
}

} // namespace

template <typename T>
Matrix<T> decode_step(const Matrix<T>& h, LayerCache<T>& cache,
                      const AttentionWeights<T>& weights, const DecodeConfig& cfg,
                      StepReport& report, Modality token_modality) {
    cache.geometry.validate();
    cfg.validate();
    weights.validate(cache.geometry);
    if (h.rows == 0) throw parameter_error("decode_step: at least one new token required");
    if (h.cols != cache.geometry.model_width())
        throw shape_error("decode_step: activations must be model_width wide");
    if (!h.all_finite())
        throw data_error("decode_step: non-finite activations at step " +
                         std::to_string(cache.steps_taken));

    report.step = cache.steps_taken;
    report.bytes_before = memory_bytes(cache, cfg.bytes_per_scalar).cache_bytes;

    // Project the new tokens and append them to the uncompressed tail; they
    // attend to themselves this very step.
    const Matrix<T> queries = matmul(h, weights.w_q);
    const Matrix<T> k_new = matmul(h, weights.w_k);
    const Matrix<T> v_new = matmul(h, weights.w_v);
    std::vector<std::uint64_t> query_positions(h.rows);
    for (std::size_t i = 0; i < h.rows; ++i) query_positions[i] = cache.next_position + i;
    append_tokens(cache, token_modality, k_new, v_new);

    // Group by importance and retrieve: group-1 rows at full stored rank,
    // lower groups at reduced rank, tails verbatim.
    std::vector<SegmentTiering> tiering;
    const RetrievalPlan<T> plan = build_retrieval_plan(cache, cfg, &tiering);
    account_decompression(cache, tiering, report);

    const AttentionResult<T> att =
        cfg.fused ? attend_fused(plan, queries, query_positions, cache.geometry, cfg.fused_tile)
                  : attend_materialized(plan, queries, query_positions, cache.geometry);
    Matrix<T> output = matmul(att.context, weights.w_o);

    // EMA importance update with this step's head-averaged attention,
    // un-permuted from retrieval order to table order.
    cache.importance.alpha = cfg.alpha;
    Matrix<double> attn_by_position(h.rows, cache.importance.size());
    for (std::size_t j = 0; j < plan.size(); ++j) {
        const std::size_t col = cache.importance.index_of(plan.entries[j].position);
        for (std::size_t t = 0; t < h.rows; ++t)
            attn_by_position(t, col) = att.head_avg(t, j);
    }
    update_importance(cache.importance, attn_by_position, h.rows);

    // Refactorize any segment whose tail reached the period.
    if (cfg.compression_period) {
        for (Modality m : {Modality::visual, Modality::textual}) {
            ModalitySegment<T>& seg = cache.segment(m);
            if (segment_compressible(seg, cfg) && seg.tail_len() >= *cfg.compression_period)
                recompress_segment(cache, seg, cfg, report);
        }
    }

    const CacheBytes after = memory_bytes(cache, cfg.bytes_per_scalar);
    report.bytes_after = after.cache_bytes;
    report.importance_bytes = after.importance_bytes;
    ++cache.steps_taken;
    return output;
}

template <typename T>
void compress_now(LayerCache<T>& cache, const DecodeConfig& cfg, StepReport& report) {
    cache.geometry.validate();
    cfg.validate();
    for (Modality m : {Modality::visual, Modality::textual}) {
        ModalitySegment<T>& seg = cache.segment(m);
        if (segment_compressible(seg, cfg) && seg.tail_len() > 0)
            recompress_segment(cache, seg, cfg, report);
    }
}

#define KVPACK_INSTANTIATE_DECODER(T)                                                        \
    template struct AttentionWeights<T>;                                                     \
    template SegmentTiering resolve_tiering<T>(const LayerCache<T>&, const ModalitySegment<T>&, \
                                               const DecodeConfig&);                         \
    template RetrievalPlan<T> build_retrieval_plan<T>(const LayerCache<T>&, const DecodeConfig&, \
                                                      std::vector<SegmentTiering>*);         \
    template AttentionResult<T> attend_materialized<T>(const RetrievalPlan<T>&, const Matrix<T>&, \
                                                       const std::vector<std::uint64_t>&,    \
                                                       const HeadGeometry&);                 \
    template AttentionResult<T> attend_fused<T>(const RetrievalPlan<T>&, const Matrix<T>&,   \
                                                const std::vector<std::uint64_t>&,           \
                                                const HeadGeometry&, std::size_t);           \
    template Matrix<T> reference_attention<T>(const Matrix<T>&, const Matrix<T>&,            \
                                              const Matrix<T>&, const AttentionWeights<T>&,   \
                                              const HeadGeometry&,                           \
                                              const std::vector<std::uint8_t>*);             \
    template Matrix<T> segment_full_matrix<T>(const ModalitySegment<T>&, MatrixKind,         \
                                              std::size_t);                                  \
    template Matrix<T> decode_step<T>(const Matrix<T>&, LayerCache<T>&,                      \
                                      const AttentionWeights<T>&, const DecodeConfig&,       \
                                      StepReport&, Modality);                                \
    template void compress_now<T>(LayerCache<T>&, const DecodeConfig&, StepReport&);

KVPACK_INSTANTIATE_DECODER(float)
KVPACK_INSTANTIATE_DECODER(double)

#undef KVPACK_INSTANTIATE_DECODER

} // namespace kvpack
