// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
//
// Release gate. Each check prints one [PASS]/[FAIL] line with the measured
// quantity and its pinned bound; the process exits nonzero if any fails.
// Checks carry their own wall-clock budgets so a pathological slowdown in
// the numerics fails loudly instead of stalling CI.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kvpack/cache.hpp"
#include "kvpack/decoder.hpp"
#include "kvpack/harness.hpp"
#include "kvpack/hybrid.hpp"
#include "kvpack/importance.hpp"
#include "kvpack/linalg.hpp"
#include "kvpack/quantize.hpp"
#include "kvpack/snapshot.hpp"
#include "support/helpers.hpp"
#include "support/spectrum_oracle.hpp"

using namespace kvpack;
namespace kt = kvpack::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    vsnprintf(buf, sizeof buf, pattern, args);
    va_end(args);
    return buf;
}

AttentionWeights<double> scaled_weights(const HeadGeometry& geom, std::uint64_t seed) {
    const std::size_t hd = geom.model_width();
    const std::size_t cw = geom.cache_width();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    AttentionWeights<double> w;
    w.w_q = kt::gaussian(hd, hd, seed);
    w.w_k = kt::gaussian(hd, cw, seed + 1);
    w.w_v = kt::gaussian(hd, cw, seed + 2);
    w.w_o = kt::gaussian(hd, hd, seed + 3);
    for (auto* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o})
        for (auto& v : m->data) v *= scale;
    return w;
}

// Engine decode against the dense reference; returns the worst per-step
// output discrepancy over `steps` single-token steps.
double decode_worst_error(const HeadGeometry& geom, const DecodeConfig& cfg, std::size_t steps,
                          std::uint64_t seed) {
    const std::size_t cw = geom.cache_width();
    const AttentionWeights<double> w = scaled_weights(geom, seed);
    LayerCache<double> cache(geom, 0);

    const Matrix<double> vis_k = kt::gaussian(64, cw, seed + 10);
    const Matrix<double> vis_v = kt::gaussian(64, cw, seed + 11);
    const Matrix<double> txt_k = kt::gaussian(16, cw, seed + 12);
    const Matrix<double> txt_v = kt::gaussian(16, cw, seed + 13);
    append_tokens(cache, Modality::visual, vis_k, vis_v);
    append_tokens(cache, Modality::textual, txt_k, txt_v);

    Matrix<double> full_k = vis_k, full_v = vis_v;
    full_k.append_rows(txt_k);
    full_v.append_rows(txt_v);

    double worst = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
        const Matrix<double> h = kt::gaussian(1, geom.model_width(), seed + 100 + s);
        StepReport rep;
        const Matrix<double> engine = decode_step(h, cache, w, cfg, rep);
        full_k.append_rows(matmul(h, w.w_k));
        full_v.append_rows(matmul(h, w.w_v));
        const Matrix<double> ref = reference_attention(h, full_k, full_v, w, geom);
        worst = std::max(worst, max_abs_difference(engine, ref));
    }
    return worst;
}

std::vector<char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

// --- 1: closed-form compression ratio --------------------------------------

Outcome check_compression_ratio() {
    const auto t0 = std::chrono::steady_clock::now();
    const double r = compression_ratio(1000, 5120, 64);
    const double us =
        std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    const bool pass =
        std::fabs(r - 13.07) <= 0.01 && std::fabs(r - 13.071895424836601) <= 1e-13 && us < 1000.0;
    return {pass, fmt("ratio(T=1000, HD=5120, R=64) = %.15f, |r - 13.07| = %.2e, %.1f us", r,
                      std::fabs(r - 13.07), us)};
}

// --- 2: partial-decompression FLOPs reduction -------------------------------

Outcome check_flops_reduction() {
    const auto t0 = std::chrono::steady_clock::now();
    const DecompressCost c = flops_partial_decompress(1000, 5120, {0.1, 0.9}, {64, 16});
    const double us =
        std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    const bool pass =
        c.flops == 212992000ull && std::fabs(c.reduction - 0.675) <= 1e-15 && us < 1000.0;
    return {pass, fmt("flops = %llu (want 212992000), |reduction - 0.675| = %.2e, %.1f us",
                      static_cast<unsigned long long>(c.flops), std::fabs(c.reduction - 0.675),
                      us)};
}

// --- 3: truncated SVD against the Gram-spectrum oracle ----------------------

Outcome check_svd_oracle(double elapsed_budget_s) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 gen(7);
    double worst = 0.0;
    std::size_t trials = 0;
    for (; trials < 50; ++trials) {
        const std::size_t rows = 16 + gen() % 497; // 16..512
        const std::size_t cols = 16 + gen() % 497;
        const std::size_t rank = 1 + gen() % std::min(rows, cols);
        const Matrix<double> m =
            gaussian_matrix<double>(rows, cols, 7000 + trials, 0);
        const double err = frobenius_distance(m, truncated_svd(m, rank).reconstruct());
        const double oracle = kt::best_rank_error(kt::gram_spectrum(m), rank);
        worst = std::max(worst, std::fabs(err - oracle));
    }
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = worst <= 1e-8 && s < elapsed_budget_s;
    return {pass, fmt("max |engine - oracle| = %.2e over %zu matrices (bound 1e-8), %.1f s",
                      worst, trials, s)};
}

// --- 4: lossless decode paths ------------------------------------------------

Outcome check_lossless_decode() {
    DecodeConfig no_compression;
    no_compression.compression_period.reset();
    no_compression.ranks = {0, 0, 0, 0};

    double worst = 0.0;
    for (const HeadGeometry geom : {HeadGeometry{4, 4, 8}, HeadGeometry{8, 2, 8}}) {
        DecodeConfig full_rank;
        full_rank.compression_period = 25;
        const std::size_t cw = geom.cache_width();
        full_rank.ranks = {cw, cw, cw, cw};

        worst = std::max(worst, decode_worst_error(geom, full_rank, 100, 500));
        worst = std::max(worst, decode_worst_error(geom, no_compression, 100, 600));
    }
    return {worst <= 1e-10,
            fmt("worst per-step |engine - reference| = %.2e over 4 runs x 100 steps "
                "(bound 1e-10)",
                worst)};
}

// --- 5: fused online-softmax vs materialized attention ----------------------

Outcome check_fused_equivalence() {
    const HeadGeometry geom{4, 4, 8};
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 20; ++trial) {
        const std::uint64_t seed = 900 + 10 * trial;
        LayerCache<double> cache(geom, 0);
        append_tokens(cache, Modality::visual, kt::gaussian(30 + trial, 32, seed),
                      kt::gaussian(30 + trial, 32, seed + 1));
        append_tokens(cache, Modality::textual, kt::gaussian(4 + trial % 5, 32, seed + 2),
                      kt::gaussian(4 + trial % 5, 32, seed + 3));
        DecodeConfig cfg;
        cfg.ranks = {8, 8, 0, 0};
        StepReport rep;
        compress_now(cache, cfg, rep);

        Matrix<double> queries = kt::gaussian(2, 32, seed + 4);
        if (trial >= 15) // logit spread far past +50: exercises the max shift
            for (auto& x : queries.data) x *= 50.0;
        const std::vector<std::uint64_t> qpos{cache.next_position, cache.next_position + 1};

        const RetrievalPlan<double> plan = build_retrieval_plan(cache, cfg);
        const AttentionResult<double> base = attend_materialized(plan, queries, qpos, geom);
        if (!base.context.all_finite()) return {false, "materialized output not finite"};

        for (const std::size_t tile : {std::size_t{1}, std::size_t{7}, std::size_t{64},
                                       plan.size()}) {
            const AttentionResult<double> fused = attend_fused(plan, queries, qpos, geom, tile);
            if (!fused.context.all_finite())
                return {false, fmt("fused output not finite at tile %zu", tile)};
            worst = std::max(worst, max_abs_difference(base.context, fused.context));
            worst = std::max(worst, max_abs_difference(base.head_avg, fused.head_avg));
        }
    }
    return {worst <= 1e-6,
            fmt("worst |materialized - fused| = %.2e over 20 states x tiles {1,7,64,T} "
                "(bound 1e-6)",
                worst)};
}

// --- 6: importance EMA properties -------------------------------------------

Outcome check_importance_properties() {
    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> uniform(0.01, 1.0);
    auto stochastic_rows = [&](std::size_t rows, std::size_t cols) {
        Matrix<double> m(rows, cols);
        for (std::size_t i = 0; i < rows; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < cols; ++j) sum += (m(i, j) = uniform(gen));
            for (std::size_t j = 0; j < cols; ++j) m(i, j) /= sum;
        }
        return m;
    };

    // Scores stay in [0, 1] under arbitrary valid updates.
    ImportanceTable table;
    table.alpha = 0.3;
    for (std::uint64_t p = 0; p < 16; ++p) table.append_token(p);
    for (std::size_t u = 0; u < 50; ++u) {
        update_importance(table, stochastic_rows(2, 16), 2);
        for (const double s : table.scores)
            if (!(s >= 0.0 && s <= 1.0))
                return {false, fmt("score %.17g left [0,1] at update %zu", s, u)};
    }

    // alpha = 0 replaces the state with the latest attention row, exactly.
    ImportanceTable replace;
    replace.alpha = 0.0;
    for (std::uint64_t p = 0; p < 16; ++p) replace.append_token(p);
    const Matrix<double> row = stochastic_rows(1, 16);
    update_importance(replace, row, 1);
    for (std::size_t j = 0; j < 16; ++j)
        if (replace.scores[j] != row(0, j))
            return {false, fmt("alpha=0 drifted at column %zu", j)};

    // Worked two-query example: 0.25^2 * 0.4 + (1 - 0.25^2) * 0.1 = 0.11875.
    ImportanceTable hand;
    hand.alpha = 0.25;
    hand.append_token(0);
    hand.append_token(1);
    hand.scores[0] = 0.4;
    Matrix<double> attn(2, 2);
    attn(0, 0) = 0.1;
    attn(0, 1) = 0.9;
    attn(1, 0) = 0.1;
    attn(1, 1) = 0.9;
    update_importance(hand, attn, 2);
    const double hand_err = std::fabs(hand.scores[0] - 0.11875);
    if (hand_err > 1e-12) return {false, fmt("worked example off by %.2e", hand_err)};

    // Group assignment: scale-invariant and an exact partition.
    ImportanceTable groups_table;
    groups_table.alpha = 0.25;
    std::vector<std::uint64_t> positions;
    for (std::uint64_t p = 0; p < 10; ++p) {
        groups_table.append_token(p);
        groups_table.scores[p] = uniform(gen);
        positions.push_back(p);
    }
    const std::vector<double> ratios{0.3, 0.3, 0.4};
    const std::vector<std::size_t> ranks{16, 8, 4};
    const GroupAssignment before = assign_groups(groups_table, positions, ratios, ranks);
    for (double& s : groups_table.scores) s *= 7.3;
    const GroupAssignment after = assign_groups(groups_table, positions, ratios, ranks);
    if (before.masks != after.masks) return {false, "group masks changed under score scaling"};

    if (before.masks.size() != 3 || before.masks[0].size() != 3 || before.masks[1].size() != 3 ||
        before.masks[2].size() != 4)
        return {false, "round(ratio * n) sizing violated"};
    std::vector<bool> seen(10, false);
    for (const auto& mask : before.masks)
        for (const std::uint32_t idx : mask) {
            if (idx >= 10 || seen[idx]) return {false, "partition not exact"};
            seen[idx] = true;
        }
    for (const bool s : seen)
        if (!s) return {false, "partition missed a token"};

    return {true, fmt("[0,1] invariant over 50 updates; alpha=0 exact; worked example off by "
                      "%.1e; groups scale-invariant, partition 3/3/4",
                      hand_err)};
}

// --- 7: factor-model rank sweep ---------------------------------------------

Outcome check_rank_sweep() {
    WorkloadSpec spec;
    spec.geometry = {4, 4, 16}; // cache width 64
    spec.num_layers = 2;
    spec.visual_tokens = 96;
    spec.textual_tokens = 16;
    spec.visual = {8, 0.85, 8, 0.0}; // exactly rank 8, no noise
    spec.textual = {8, 0.9, 4, 0.0};
    spec.decode_steps = 16;
    spec.batch = 1;
    spec.seed = 21;

    double low_rank_err = 0.0;
    double worst_exact_err = 0.0;
    double worst_ratio_dev = 0.0;
    for (const std::size_t rank : {4u, 8u, 16u, 32u, 64u}) {
        DecodeConfig cfg;
        cfg.compression_period = 512; // prefill compression only
        cfg.ranks = {rank, rank, 0, 0};
        const RunReport report = run_experiment<double>(spec, cfg);

        if (rank == 4)
            low_rank_err = report.aggregates.mean_output_max_abs_err;
        else
            worst_exact_err =
                std::max(worst_exact_err, report.aggregates.mean_output_max_abs_err);

        for (const RatioRecord& r : report.aggregates.compression_ratios) {
            const double closed =
                static_cast<double>(r.tokens) * static_cast<double>(r.width) /
                (static_cast<double>(r.tokens) * static_cast<double>(r.rank) +
                 static_cast<double>(r.rank) * static_cast<double>(r.width));
            worst_ratio_dev = std::max(worst_ratio_dev, std::fabs(r.ratio - closed));
        }
    }
    const bool pass = worst_exact_err <= 1e-6 && low_rank_err > 1e-6 &&
                      low_rank_err > worst_exact_err && worst_ratio_dev <= 1e-12;
    return {pass, fmt("mean err %.2e at R>=8 (bound 1e-6), %.2e at R=4 (must exceed both); "
                      "ratio deviation %.1e",
                      worst_exact_err, low_rank_err, worst_ratio_dev)};
}

// --- 8: eviction vs the masked-attention oracle -----------------------------

Outcome check_eviction_oracle() {
    const HeadGeometry geom{4, 4, 8};
    std::mt19937_64 gen(23);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    double worst = 0.0;

    for (std::size_t trial = 0; trial < 20; ++trial) {
        const std::uint64_t seed = 2000 + 10 * trial;
        const Matrix<double> k = kt::planted_rank(16, 32, 8, seed);
        const Matrix<double> v = kt::planted_rank(16, 32, 8, seed + 1);
        LayerCache<double> cache(geom, 0);
        append_tokens(cache, Modality::visual, k, v);

        DecodeConfig cfg;
        cfg.compression_period = 512;
        cfg.ranks = {8, 8, 0, 0};
        StepReport rep;
        compress_now(cache, cfg, rep);
        for (double& s : cache.importance.scores) s = uniform(gen);

        const GroupAssignment groups =
            assign_groups(cache.importance, cache.visual.compressed_positions(),
                          {0.25, 0.25, 0.5}, {8, 8, 8});
        std::vector<std::uint8_t> keep(17, 0);
        for (const std::uint32_t idx : groups.masks[0]) keep[idx] = 1;
        keep[16] = 1; // the new token attends to itself
        evict_low_groups(cache, cache.visual, groups);

        const AttentionWeights<double> w = scaled_weights(geom, seed + 2);
        const Matrix<double> h = kt::gaussian(1, geom.model_width(), seed + 3);
        const Matrix<double> engine = decode_step(h, cache, w, cfg, rep);

        Matrix<double> full_k = k, full_v = v;
        full_k.append_rows(matmul(h, w.w_k));
        full_v.append_rows(matmul(h, w.w_v));
        const Matrix<double> ref = reference_attention(h, full_k, full_v, w, geom, &keep);
        worst = std::max(worst, max_abs_difference(engine, ref));
    }
    return {worst <= 1e-6,
            fmt("worst |post-eviction decode - masked oracle| = %.2e over 20 states "
                "(bound 1e-6)",
                worst)};
}

// --- 9: 4-bit quantization bound and layout ----------------------------------

Outcome check_quantization_bound() {
    const std::size_t rows = 3125, cols = 320; // one million scalars
    const std::size_t group = 64;
    Matrix<double> m(rows, cols);
    std::mt19937_64 gen(29);
    std::uniform_real_distribution<double> uniform(-3.0, 3.0);
    for (auto& x : m.data) x = uniform(gen);

    const QuantizedMatrix<double> q = quantize_4bit(m, group);
    const std::size_t groups_per_col = (rows + group - 1) / group;
    if (q.codes.size() != cols * ((rows + 1) / 2) ||
        q.packed_bytes() != cols * ((rows + 1) / 2) ||
        q.scales.size() != cols * groups_per_col || q.mins.size() != cols * groups_per_col)
        return {false, fmt("layout mismatch: %zu code bytes, %zu scale entries", q.codes.size(),
                           q.scales.size())};

    double worst_excess = -1.0; // error minus the group's bound; negative = inside
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t g0 = 0; g0 < rows; g0 += group) {
            const std::size_t g1 = std::min(rows, g0 + group);
            double lo = m(g0, j), hi = m(g0, j);
            for (std::size_t i = g0; i < g1; ++i) {
                lo = std::min(lo, m(i, j));
                hi = std::max(hi, m(i, j));
            }
            const double bound = (hi - lo) / 30.0;
            for (std::size_t i = g0; i < g1; ++i)
                worst_excess =
                    std::max(worst_excess, std::fabs(q.value_at(i, j) - m(i, j)) - bound);
        }
    }
    const bool pass = worst_excess <= 1e-12;
    return {pass, fmt("per-element error within (max-min)/30 for all 10^6 scalars "
                      "(worst excess %.1e); packed size exact",
                      worst_excess)};
}

// --- 10: combined-head vs per-head compression ------------------------------

Outcome check_combined_head_benefit() {
    const HeadGeometry geom{4, 4, 16}; // 4 kv heads, width 64
    const std::size_t tokens = 96, head_dim = 16, heads = 4;
    const std::size_t combined_rank = 8;
    const ModalityProfile profile{8, 0.9, 8, 0.02};

    // Equal stored-scalar budget: combined R(T + HD) vs per-head H * Rh(T + D).
    const std::size_t combined_budget = combined_rank * (tokens + heads * head_dim);
    const std::size_t per_head_rank = static_cast<std::size_t>(std::llround(
        static_cast<double>(combined_budget) /
        static_cast<double>(heads * (tokens + head_dim))));
    const std::size_t per_head_budget = heads * per_head_rank * (tokens + head_dim);

    std::size_t wins = 0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const Matrix<double> m =
            latent_factor_matrix<double>(tokens, geom, profile, 4000 + trial, 0);
        const double combined_err =
            frobenius_distance(m, truncated_svd(m, combined_rank).reconstruct());

        double per_head_sq = 0.0;
        for (std::size_t h = 0; h < heads; ++h) {
            Matrix<double> slice(tokens, head_dim);
            for (std::size_t i = 0; i < tokens; ++i)
                for (std::size_t j = 0; j < head_dim; ++j)
                    slice(i, j) = m(i, h * head_dim + j);
            const double e = frobenius_distance(
                slice, truncated_svd(slice, per_head_rank).reconstruct());
            per_head_sq += e * e;
        }
        if (combined_err < std::sqrt(per_head_sq)) ++wins;
    }
    const bool pass = wins >= 95;
    return {pass, fmt("combined (R=%zu, %zu scalars) beat per-head (Rh=%zu, %zu scalars) in "
                      "%zu/100 trials (need >= 95)",
                      combined_rank, combined_budget, per_head_rank, per_head_budget, wins)};
}

// --- 11: determinism and snapshot round-trip ---------------------------------

Outcome check_determinism_io() {
    WorkloadSpec spec;
    spec.geometry = {4, 4, 8};
    spec.num_layers = 2;
    spec.visual_tokens = 48;
    spec.textual_tokens = 8;
    spec.visual = {6, 0.9, 6, 1e-3};
    spec.textual = {4, 0.9, 2, 1e-3};
    spec.decode_steps = 8;
    spec.batch = 2;
    spec.seed = 31;

    DecodeConfig cfg;
    cfg.compression_period = 8;
    cfg.ranks = {8, 8, 8, 8};
    TierSpec tiers;
    tiers.ratios = {0.25, 0.25, 0.5};
    tiers.key_fractions = {1.0, 0.5, 0.25};
    tiers.value_fractions = {1.0, 0.5, 0.25};
    cfg.tiering = tiers;
    cfg.eviction = true;
    cfg.quantization = true;
    cfg.quant_group_size = 16;

    RunOptions serial, parallel;
    serial.threads = 1;
    parallel.threads = 2;
    const std::string a = render_report(run_experiment<double>(spec, cfg, serial),
                                        ReportFormat::json_lines);
    const std::string b = render_report(run_experiment<double>(spec, cfg, parallel),
                                        ReportFormat::json_lines);
    const std::string c = render_report(run_experiment<double>(spec, cfg, serial),
                                        ReportFormat::json_lines);
    if (a != b || a != c) return {false, "reports differ across reruns/thread counts"};

    // Snapshot round-trip, quantized payloads included.
    const HeadGeometry geom{4, 2, 8};
    LayerCache<double> cache(geom, 3);
    append_tokens(cache, Modality::visual, kt::planted_rank(20, 16, 4, 71),
                  kt::planted_rank(20, 16, 4, 72));
    append_tokens(cache, Modality::textual, kt::gaussian(5, 16, 73), kt::gaussian(5, 16, 74));
    DecodeConfig snap_cfg;
    snap_cfg.ranks = {4, 4, 0, 0};
    StepReport rep;
    compress_now(cache, snap_cfg, rep);
    quantize_segment(cache.visual, 8);
    for (std::size_t i = 0; i < cache.importance.size(); ++i)
        cache.importance.scores[i] = 0.01 * static_cast<double>(i);

    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "kvpack_acceptance";
    fs::create_directories(dir);
    const std::string path_a = (dir / "a.kvpk").string();
    const std::string path_b = (dir / "b.kvpk").string();
    save_cache(cache, path_a, 8);
    const LayerCache<double> loaded = load_cache<double>(path_a);
    save_cache(loaded, path_b, 8);
    const bool files_equal = read_bytes(path_a) == read_bytes(path_b);

    const auto& orig_store = cache.visual.blocks[0].keys;
    const auto& loaded_store = loaded.visual.blocks[0].keys;
    const bool payload_equal =
        store_is_quantized(loaded_store) &&
        max_abs_difference(store_reconstruct(orig_store), store_reconstruct(loaded_store)) == 0.0 &&
        loaded.importance.scores == cache.importance.scores &&
        max_abs_difference(loaded.textual.tail_k, cache.textual.tail_k) == 0.0;
    fs::remove_all(dir);

    if (!files_equal) return {false, "snapshot bytes changed across save/load/save"};
    if (!payload_equal) return {false, "loaded cache does not match the original"};
    return {true, "reports byte-identical across reruns and thread counts; snapshot "
                  "save/load/save byte-identical with quantized payloads"};
}

} // namespace

int main() {
    struct Check {
        const char* name;
        std::function<Outcome()> run;
        double budget_s;
    };
    const std::vector<Check> checks{
        {"compression-ratio closed form", check_compression_ratio, 5.0},
        {"partial-decompression flops reduction", check_flops_reduction, 5.0},
        {"truncated SVD vs Gram-spectrum oracle", [] { return check_svd_oracle(30.0); }, 30.0},
        {"lossless decode paths (MHA + GQA)", check_lossless_decode, 60.0},
        {"fused online-softmax vs materialized", check_fused_equivalence, 60.0},
        {"importance EMA properties", check_importance_properties, 10.0},
        {"factor-model rank sweep", check_rank_sweep, 120.0},
        {"eviction vs masked-attention oracle", check_eviction_oracle, 30.0},
        {"4-bit quantization bound and layout", check_quantization_bound, 10.0},
        {"combined-head vs per-head compression", check_combined_head_benefit, 60.0},
        {"determinism and snapshot round-trip", check_determinism_io, 30.0},
    };

    int failures = 0;
    for (std::size_t i = 0; i < checks.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = checks[i].run();
        } catch (const std::exception& e) {
            outcome = {false, fmt("exception: %s", e.what())};
        }
        const double s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (s >= checks[i].budget_s) {
            outcome.pass = false;
            outcome.detail += fmt(" [over %.0f s budget]", checks[i].budget_s);
        }
        std::printf("[%s] %2zu %-42s %s (%.2f s)\n", outcome.pass ? "PASS" : "FAIL", i + 1,
                    checks[i].name, outcome.detail.c_str(), s);
        if (!outcome.pass) ++failures;
    }
    if (failures > 0) std::printf("%d of %zu checks failed\n", failures, checks.size());
    return failures == 0 ? 0 : 1;
}
