// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kvpack/cache.hpp"
#include "kvpack/decoder.hpp"

namespace kvpack {

// Low-rank structure of one modality's synthetic K/V rows: token latents
// (T x true_rank, latent i scaled by spectrum_decay^i) against per-head
// loadings. Latent dimensions below shared_subspace use one loading row
// shared across heads (cross-head redundancy); the rest are per-head draws.
// noise_floor scales an additive full-rank Gaussian.
struct ModalityProfile {
    std::size_t true_rank = 8;
    double spectrum_decay = 0.85;
    std::size_t shared_subspace = 8; // <= true_rank
    double noise_floor = 1e-3;
};

struct WorkloadSpec {
    HeadGeometry geometry{8, 8, 16};
    std::size_t num_layers = 2;
    std::size_t visual_tokens = 256; // prefill
    std::size_t textual_tokens = 16; // prefill (prompt text)
    ModalityProfile visual{8, 0.85, 8, 1e-3};
    ModalityProfile textual{48, 0.98, 4, 1e-2};
    std::size_t decode_steps = 32;
    std::size_t batch = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

// Everything a decode run consumes, generated deterministically from the
// spec's seed: per-layer projection weights (shared across the batch) and
// per-instance prefill K/V plus decode-step inputs.
template <typename T>
struct Workload {
    WorkloadSpec spec;
    std::vector<AttentionWeights<T>> weights; // one per layer
    struct Instance {
        // Prefill K/V per layer per modality, cache_width wide.
        std::vector<Matrix<T>> visual_k, visual_v;
        std::vector<Matrix<T>> textual_k, textual_v;
        Matrix<T> decode_inputs; // decode_steps x model_width
    };
    std::vector<Instance> instances;
};

template <typename T>
Workload<T> generate_workload(const WorkloadSpec& spec);

// Synthetic K/V matrix straight from the factor model (used by tests that
// need raw matrices rather than a full workload).
template <typename T>
Matrix<T> latent_factor_matrix(std::size_t tokens, const HeadGeometry& geom,
                               const ModalityProfile& profile, std::uint64_t seed,
                               std::uint64_t stream);

struct StepRecord {
    std::uint32_t instance = 0;
    std::uint32_t step = 0;
    std::uint64_t bytes_total = 0;      // cache bytes summed over layers
    std::uint64_t bytes_importance = 0;
    std::uint64_t decompress_flops = 0;      // summed over layers
    std::uint64_t decompress_flops_full = 0; // full-rank equivalent
    std::uint32_t compression_events = 0;
    double output_max_abs_err = 0.0; // final-layer output vs dense reference
    double output_rel_err = 0.0;
    std::vector<std::string> warnings;
};

struct RatioRecord {
    std::string modality;
    std::string kind;
    std::uint64_t tokens = 0;
    std::uint64_t width = 0;
    std::uint64_t rank = 0;
    double ratio = 0.0; // closed form on (tokens, width, rank)
};

struct Aggregates {
    std::uint64_t instances = 0;
    std::uint64_t steps = 0;
    double mean_output_max_abs_err = 0.0;
    double max_output_max_abs_err = 0.0;
    double mean_output_rel_err = 0.0;
    std::uint64_t final_bytes_total = 0;
    std::uint64_t final_bytes_importance = 0;
    std::uint64_t total_decompress_flops = 0;
    double flops_reduction_vs_untiered = 0.0;
    std::vector<RatioRecord> compression_ratios; // instance 0, final state
    std::string config_echo;
};

struct RunReport {
    std::vector<StepRecord> steps; // instance-major, then step order
    Aggregates aggregates;
};

struct RunOptions {
    // Zero importance scores right after the prefill compression.
    bool importance_reset = false;
    // Compress prefill segments before the first decode step.
    bool compress_after_prefill = true;
    // Write final LayerCache snapshots to this directory.
    std::optional<std::string> dump_caches_dir;
    // Append per-step importance score lines to this file.
    std::optional<std::string> dump_scores_path;
    // Worker threads across batch instances; 0 = KVPACK_THREADS or
    // hardware concurrency. Results are merged in instance order, so the
    // report is identical for any thread count.
    std::size_t threads = 0;
};

// Run the synthetic decode benchmark: engine caches per layer with a dense
// 64-bit reference chain alongside; per-step error, byte, and FLOP records;
// aggregates over the whole run.
template <typename T>
RunReport run_experiment(const WorkloadSpec& spec, const DecodeConfig& cfg,
                         const RunOptions& options = {});

enum class ReportFormat { json_lines, csv };

// Serialize a report. json-lines: one object per step record followed by
// one aggregate object. csv: header plus step rows (aggregates live in the
// json-lines form; they stay recomputable from step records). Numbers are
// printed with %.17g so emit(parse(emit(r))) is byte-identical.
void emit_report(const RunReport& report, ReportFormat format, const std::string& path);
std::string render_report(const RunReport& report, ReportFormat format);

RunReport parse_report(const std::string& path);
RunReport parse_report_text(const std::string& text, ReportFormat format);

std::size_t effective_thread_count(std::size_t requested, std::size_t jobs);

} // namespace kvpack
