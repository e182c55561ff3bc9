// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "kvpack/decoder.hpp"
#include "kvpack/harness.hpp"

namespace kvpack {

// INI-style experiment configuration:
//
//   [workload]              geometry, token counts, steps, batch, seed
//   [workload.visual]       true_rank, spectrum_decay, shared_subspace, noise_floor
//   [workload.textual]      likewise
//   [decode]                period, alpha, svd_method, svd_seed, eviction,
//                           quantization, quant_group_size, fused, fused_tile,
//                           recompress, bytes_per_scalar, importance_reset,
//                           compress_after_prefill
//   [decode.ranks]          key_visual, value_visual, key_textual, value_textual
//   [decode.rank_scheme]    kind + per-kind parameters
//   [decode.tiering]        ratios, key_rank_fractions, value_rank_fractions
//
// `#` and `;` start comments. Unknown sections or keys are parameter
// errors naming the offender. Every key has a default, so an empty file is
// a valid experiment.
enum class Precision { f32, f64 };

struct ExperimentConfig {
    WorkloadSpec workload;
    DecodeConfig decode;
    RunOptions run;
    Precision precision = Precision::f32; // engine storage precision
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical key=value dump of a parsed config (the report's config echo);
// parsing the echo reproduces the config.
std::string render_config(const ExperimentConfig& config);

} // namespace kvpack
