// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
//
// kvpack command line: synthetic decode runs, snapshot inspection and
// offline recompression.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvpack/config.hpp"
#include "kvpack/harness.hpp"
#include "kvpack/snapshot.hpp"

namespace {

using namespace kvpack;

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

ReportFormat parse_format(const std::string& name) {
    if (name == "json-lines" || name == "jsonl") return ReportFormat::json_lines;
    if (name == "csv") return ReportFormat::csv;
    throw parameter_error("unknown report format '" + name + "' (json-lines|csv)");
}

RunReport dispatch_run(const ExperimentConfig& cfg) {
    if (cfg.precision == Precision::f64)
        return run_experiment<double>(cfg.workload, cfg.decode, cfg.run);
    return run_experiment<float>(cfg.workload, cfg.decode, cfg.run);
}

void print_aggregates(const Aggregates& a) {
    std::printf("instances            %llu\n", static_cast<unsigned long long>(a.instances));
    std::printf("steps                %llu\n", static_cast<unsigned long long>(a.steps));
    std::printf("mean max-abs err     %.6e\n", a.mean_output_max_abs_err);
    std::printf("max  max-abs err     %.6e\n", a.max_output_max_abs_err);
    std::printf("mean rel err         %.6e\n", a.mean_output_rel_err);
    std::printf("final cache bytes    %llu\n",
                static_cast<unsigned long long>(a.final_bytes_total));
    std::printf("importance bytes     %llu\n",
                static_cast<unsigned long long>(a.final_bytes_importance));
    std::printf("decompress flops     %llu\n",
                static_cast<unsigned long long>(a.total_decompress_flops));
    std::printf("flops reduction      %.4f\n", a.flops_reduction_vs_untiered);
    for (const auto& r : a.compression_ratios)
        std::printf("ratio %-8s %-6s T=%-6llu R=%-4llu %.2fx\n", r.modality.c_str(),
                    r.kind.c_str(), static_cast<unsigned long long>(r.tokens),
                    static_cast<unsigned long long>(r.rank), r.ratio);
}

int cmd_simulate(const std::string& config_path, const std::string& out_path,
                 const std::string& format_name, const std::string& dump_caches,
                 const std::string& dump_scores, std::size_t threads) {
    ExperimentConfig cfg = load_config(config_path);
    if (!dump_caches.empty()) cfg.run.dump_caches_dir = dump_caches;
    if (!dump_scores.empty()) cfg.run.dump_scores_path = dump_scores;
    if (threads > 0) cfg.run.threads = threads;

    const RunReport report = dispatch_run(cfg);
    if (!out_path.empty()) emit_report(report, parse_format(format_name), out_path);
    print_aggregates(report.aggregates);
    return 0;
}

// The engine stores history in double for analysis regardless of the
// snapshot's scalar width.
LayerCache<double> load_snapshot(const std::string& path) { return load_cache<double>(path); }

void print_variance_table(const Matrix<double>& m, const HeadGeometry& geom,
                          std::size_t max_rank, const char* label) {
    if (m.rows == 0) {
        std::printf("%s: empty\n", label);
        return;
    }
    const std::size_t combined_max =
        std::min({max_rank, m.rows, m.cols});
    const std::vector<double> sv = singular_values(m);
    double total = 0.0;
    for (double s : sv) total += s * s;

    std::printf("%s (%zu tokens x %zu)\n", label, m.rows, m.cols);
    std::printf("  %-6s %-14s", "rank", "combined");
    for (std::size_t h = 0; h < geom.num_kv_heads; ++h) std::printf(" head%-9zu", h);
    std::printf("\n");

    // Per-head spectra over the T x head_dim column slices.
    std::vector<std::vector<double>> head_sv(geom.num_kv_heads);
    std::vector<double> head_total(geom.num_kv_heads, 0.0);
    for (std::size_t h = 0; h < geom.num_kv_heads; ++h) {
        Matrix<double> slice(m.rows, geom.head_dim);
        for (std::size_t t = 0; t < m.rows; ++t)
            for (std::size_t j = 0; j < geom.head_dim; ++j)
                slice(t, j) = m(t, h * geom.head_dim + j);
        head_sv[h] = singular_values(slice);
        for (double s : head_sv[h]) head_total[h] += s * s;
    }

    double run = 0.0;
    std::vector<double> head_run(geom.num_kv_heads, 0.0);
    for (std::size_t r = 1; r <= combined_max; ++r) {
        run += sv[r - 1] * sv[r - 1];
        std::printf("  %-6zu %-14.6f", r, total == 0.0 ? 1.0 : run / total);
        for (std::size_t h = 0; h < geom.num_kv_heads; ++h) {
            if (r <= head_sv[h].size()) head_run[h] += head_sv[h][r - 1] * head_sv[h][r - 1];
            std::printf(" %-13.6f", head_total[h] == 0.0 ? 1.0 : head_run[h] / head_total[h]);
        }
        std::printf("\n");
    }
}

int cmd_analyze_variance(const std::string& snapshot_path, std::size_t max_rank) {
    const LayerCache<double> cache = load_snapshot(snapshot_path);
    for (Modality m : {Modality::visual, Modality::textual}) {
        const auto& seg = cache.segment(m);
        if (seg.token_count() == 0) continue;
        for (MatrixKind kind : {MatrixKind::key, MatrixKind::value}) {
            const Matrix<double> full =
                segment_full_matrix(seg, kind, cache.geometry.cache_width());
            const std::string label = std::string(to_string(m)) + " " + to_string(kind);
            print_variance_table(full, cache.geometry, max_rank, label.c_str());
        }
    }
    return 0;
}

int cmd_inspect(const std::string& snapshot_path, std::size_t bytes_per_scalar) {
    const std::size_t stored_width = snapshot_scalar_width(snapshot_path);
    const LayerCache<double> cache = load_snapshot(snapshot_path);
    std::printf("layer            %zu\n", cache.layer_index);
    std::printf("geometry         H=%zu H_kv=%zu D=%zu (cache width %zu)\n",
                cache.geometry.num_query_heads, cache.geometry.num_kv_heads,
                cache.geometry.head_dim, cache.geometry.cache_width());
    std::printf("scalar width     %zu bytes\n", stored_width);
    std::printf("next position    %llu\n",
                static_cast<unsigned long long>(cache.next_position));
    std::printf("steps taken      %llu\n", static_cast<unsigned long long>(cache.steps_taken));
    for (Modality m : {Modality::visual, Modality::textual}) {
        const auto& seg = cache.segment(m);
        std::printf("[%s] tokens=%zu compressed=%zu tail=%zu blocks=%zu\n", to_string(m),
                    seg.token_count(), seg.compressed_len(), seg.tail_len(),
                    seg.blocks.size());
        for (std::size_t i = 0; i < seg.blocks.size(); ++i) {
            const auto& b = seg.blocks[i];
            std::printf("  block %zu: %zu tokens, R_k=%zu R_v=%zu%s%s\n", i,
                        b.positions.size(), store_rank(b.keys), store_rank(b.values),
                        store_is_quantized(b.keys) ? ", keys 4-bit" : "",
                        store_is_quantized(b.values) ? ", values 4-bit" : "");
        }
    }
    const CacheBytes bytes = memory_bytes(cache, bytes_per_scalar);
    std::printf("cache bytes      %llu (at %zu bytes/scalar)\n",
                static_cast<unsigned long long>(bytes.cache_bytes), bytes_per_scalar);
    std::printf("importance bytes %llu (%zu tracked tokens)\n",
                static_cast<unsigned long long>(bytes.importance_bytes),
                cache.importance.positions.size());
    return 0;
}

int cmd_compress(const std::string& in_path, const std::string& out_path, std::size_t rank_key,
                 std::size_t rank_value, const std::string& method_name) {
    LayerCache<double> cache = load_snapshot(in_path);
    const std::size_t width = snapshot_scalar_width(in_path);

    SvdOptions svd;
    if (method_name == "exact") svd.method = SvdMethod::exact;
    else if (method_name == "randomized") svd.method = SvdMethod::randomized;
    else throw parameter_error("unknown svd method '" + method_name + "' (exact|randomized)");

    for (Modality m : {Modality::visual, Modality::textual}) {
        auto& seg = cache.segment(m);
        if (seg.token_count() == 0) continue;
        CompressedBlock<double> block;
        block.positions = seg.compressed_positions();
        block.positions.insert(block.positions.end(), seg.tail_positions.begin(),
                               seg.tail_positions.end());
        auto refactor = [&](MatrixKind kind, std::size_t rank) {
            const Matrix<double> full =
                segment_full_matrix(seg, kind, cache.geometry.cache_width());
            const CompressOutcome<double> out = compress_segment(full, rank, svd);
            if (out.clamped)
                std::fprintf(stderr, "note: %s %s rank clamped to %zu\n", to_string(m),
                             to_string(kind), out.effective_rank);
            return LowRankStore<double>{out.factors};
        };
        block.keys = refactor(MatrixKind::key, rank_key);
        block.values = refactor(MatrixKind::value, rank_value);
        seg.blocks.clear();
        seg.blocks.push_back(std::move(block));
        seg.tail_k = Matrix<double>(0, cache.geometry.cache_width());
        seg.tail_v = Matrix<double>(0, cache.geometry.cache_width());
        seg.tail_positions.clear();
    }
    save_cache(cache, out_path, width);
    std::printf("wrote %s (R_k=%zu R_v=%zu, %s svd)\n", out_path.c_str(), rank_key, rank_value,
                method_name.c_str());
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& param_spec,
              const std::string& out_dir, const std::string& format_name, std::size_t threads) {
    const auto eq = param_spec.find('=');
    if (eq == std::string::npos)
        throw parameter_error("--param expects section.key=v1,v2,...");
    const std::string dotted = param_spec.substr(0, eq);
    const std::string value_list = param_spec.substr(eq + 1);
    const auto last_dot = dotted.rfind('.');
    if (last_dot == std::string::npos)
        throw parameter_error("--param key must include its section, e.g. decode.ranks.key_visual");
    const std::string section = dotted.substr(0, last_dot);
    const std::string key = dotted.substr(last_dot + 1);

    std::vector<std::string> values;
    {
        std::stringstream ss(value_list);
        std::string v;
        while (std::getline(ss, v, ',')) values.push_back(v);
    }
    if (values.empty()) throw parameter_error("--param has no values");

    const std::string base_text = read_text_file(config_path);
    const ReportFormat format = parse_format(format_name);
    const char* ext = format == ReportFormat::csv ? "csv" : "jsonl";

    std::filesystem::create_directories(out_dir);
    std::ofstream summary(out_dir + "/summary.csv");
    if (!summary) throw io_error("cannot open for writing: " + out_dir + "/summary.csv");
    summary << "param,value,mean_output_max_abs_err,max_output_max_abs_err,"
               "mean_output_rel_err,final_bytes_total,total_decompress_flops,"
               "flops_reduction_vs_untiered\n";

    for (const std::string& value : values) {
        // Appended keys override the base config (last occurrence wins).
        const std::string text =
            base_text + "\n[" + section + "]\n" + key + " = " + value + "\n";
        ExperimentConfig cfg = parse_config_text(text);
        if (threads > 0) cfg.run.threads = threads;
        const RunReport report = dispatch_run(cfg);

        std::string tag = value;
        for (char& c : tag)
            if (c == '/' || c == ' ') c = '_';
        emit_report(report, format, out_dir + "/" + key + "_" + tag + "." + ext);

        const Aggregates& a = report.aggregates;
        char row[512];
        std::snprintf(row, sizeof(row), "%s,%s,%.17g,%.17g,%.17g,%llu,%llu,%.17g\n",
                      dotted.c_str(), value.c_str(), a.mean_output_max_abs_err,
                      a.max_output_max_abs_err, a.mean_output_rel_err,
                      static_cast<unsigned long long>(a.final_bytes_total),
                      static_cast<unsigned long long>(a.total_decompress_flops),
                      a.flops_reduction_vs_untiered);
        summary << row;
        std::printf("%s = %-12s mean_err=%.3e bytes=%llu reduction=%.4f\n", dotted.c_str(),
                    value.c_str(), a.mean_output_max_abs_err,
                    static_cast<unsigned long long>(a.final_bytes_total),
                    a.flops_reduction_vs_untiered);
    }
    std::printf("summary: %s/summary.csv\n", out_dir.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"kvpack: low-rank KV cache compression toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_path, format_name = "json-lines";
    std::string dump_caches, dump_scores;
    std::size_t threads = 0;

    auto* simulate = app.add_subcommand("simulate", "run a synthetic decode experiment");
    simulate->add_option("--config", config_path, "experiment config (ini)")->required();
    simulate->add_option("--out", out_path, "report output path");
    simulate->add_option("--format", format_name, "json-lines|csv (default json-lines)");
    simulate->add_option("--dump-caches", dump_caches, "directory for final .kvpk snapshots");
    simulate->add_option("--dump-scores", dump_scores, "file for per-step importance scores");
    simulate->add_option("--threads", threads, "worker threads (default KVPACK_THREADS)");

    std::string snapshot_path;
    std::size_t max_rank = 32;
    auto* analyze = app.add_subcommand("analyze-variance",
                                       "explained-variance table of a cache snapshot");
    analyze->add_option("snapshot", snapshot_path, ".kvpk file")->required();
    analyze->add_option("--max-rank", max_rank, "ranks to tabulate (default 32)");

    std::size_t inspect_bps = 2;
    auto* inspect = app.add_subcommand("inspect", "summarize a cache snapshot");
    inspect->add_option("snapshot", snapshot_path, ".kvpk file")->required();
    inspect->add_option("--bytes-per-scalar", inspect_bps,
                        "scalar width for the byte accounting (default 2)");

    std::string compress_out, method_name = "exact";
    std::size_t rank_key = 64, rank_value = 64;
    auto* compress = app.add_subcommand("compress", "refactor a snapshot at new ranks");
    compress->add_option("snapshot", snapshot_path, ".kvpk file")->required();
    compress->add_option("--out", compress_out, "output .kvpk path")->required();
    compress->add_option("--rank-key", rank_key, "key rank (default 64)");
    compress->add_option("--rank-value", rank_value, "value rank (default 64)");
    compress->add_option("--method", method_name, "exact|randomized (default exact)");

    std::string param_spec, sweep_dir = "sweep";
    auto* sweep = app.add_subcommand("sweep", "rerun one config across parameter values");
    sweep->add_option("--config", config_path, "experiment config (ini)")->required();
    sweep->add_option("--param", param_spec, "section.key=v1,v2,...")->required();
    sweep->add_option("--out-dir", sweep_dir, "output directory (default ./sweep)");
    sweep->add_option("--format", format_name, "per-value report format");
    sweep->add_option("--threads", threads, "worker threads");

    try {
        app.parse(argc, argv);
        if (simulate->parsed())
            return cmd_simulate(config_path, out_path, format_name, dump_caches, dump_scores,
                                threads);
        if (analyze->parsed()) return cmd_analyze_variance(snapshot_path, max_rank);
        if (inspect->parsed()) return cmd_inspect(snapshot_path, inspect_bps);
        if (compress->parsed())
            return cmd_compress(snapshot_path, compress_out, rank_key, rank_value, method_name);
        if (sweep->parsed())
            return cmd_sweep(config_path, param_spec, sweep_dir, format_name, threads);
        return 2;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const kvpack::parameter_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const kvpack::error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
