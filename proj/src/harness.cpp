// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "kvpack/config.hpp"
#include "kvpack/rng.hpp"
#include "kvpack/snapshot.hpp"

namespace kvpack {

namespace {

// Philox stream ids: purpose tag in the top byte keeps weight, prefill and
// decode draws on disjoint streams for any instance/layer combination.
std::uint64_t stream_id(std::uint64_t purpose, std::uint64_t instance, std::uint64_t layer,
                        std::uint64_t extra) {
    return (purpose << 56) | (instance << 24) | (layer << 8) | extra;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_u64(std::uint64_t v) { return std::to_string(v); }

std::string json_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 8);
    for (char c : s) {
        switch (c) {
        case '"': out += "\\\""; break;
        case '\\': out += "\\\\"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default:
            if (static_cast<unsigned char>(c) < 0x20) {
                char buf[8];
                std::snprintf(buf, sizeof(buf), "\\u%04x", static_cast<unsigned>(c) & 0xff);
                out += buf;
            } else {
                out += c;
            }
        }
    }
    return out;
}

} // namespace

void WorkloadSpec::validate() const {
    geometry.validate();
    if (num_layers < 1) throw parameter_error("WorkloadSpec: at least one layer required");
    if (batch < 1) throw parameter_error("WorkloadSpec: batch must be >= 1");
    for (const auto* p : {&visual, &textual}) {
        if (p->true_rank < 1) throw parameter_error("WorkloadSpec: true_rank must be >= 1");
        if (p->shared_subspace > p->true_rank)
            throw parameter_error("WorkloadSpec: shared_subspace cannot exceed true_rank");
        if (!(p->spectrum_decay > 0.0) || p->spectrum_decay > 1.0)
            throw parameter_error("WorkloadSpec: spectrum_decay must be in (0, 1]");
        if (!(p->noise_floor >= 0.0))
            throw parameter_error("WorkloadSpec: noise_floor must be non-negative");
    }
}

template <typename T>
Matrix<T> latent_factor_matrix(std::size_t tokens, const HeadGeometry& geom,
                               const ModalityProfile& profile, std::uint64_t seed,
                               std::uint64_t stream) {
    const std::size_t width = geom.cache_width();
    const std::size_t d = geom.head_dim;
    const std::size_t heads = geom.num_kv_heads;
    const std::size_t r = profile.true_rank;
    const std::size_t shared = std::min(profile.shared_subspace, r);

    Philox4x32 rng(seed, stream);
    Matrix<T> out(tokens, width);
    if (tokens == 0) return out;

    // Token latents, latent i scaled by decay^i for spectrum control.
    Matrix<double> z(tokens, r);
    for (std::size_t t = 0; t < tokens; ++t) {
        double scale = 1.0;
        for (std::size_t i = 0; i < r; ++i) {
            z(t, i) = rng.next_gaussian() * scale;
            scale *= profile.spectrum_decay;
        }
    }
    // Loadings: first `shared` latent rows are one draw reused by every
    // head; the rest are per-head.
    Matrix<double> shared_rows(shared, d);
    for (auto& v : shared_rows.data) v = rng.next_gaussian();
    std::vector<Matrix<double>> head_rows(heads, Matrix<double>(r - shared, d));
    for (std::size_t h = 0; h < heads; ++h)
        for (auto& v : head_rows[h].data) v = rng.next_gaussian();

    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < shared; ++i) acc += z(t, i) * shared_rows(i, j);
                for (std::size_t i = shared; i < r; ++i)
                    acc += z(t, i) * head_rows[h](i - shared, j);
                out(t, h * d + j) = static_cast<T>(acc);
            }
        }
    }
    if (profile.noise_floor > 0.0)
        for (auto& v : out.data)
            v = static_cast<T>(static_cast<double>(v) + profile.noise_floor * rng.next_gaussian());
    return out;
}

template <typename T>
Workload<T> generate_workload(const WorkloadSpec& spec) {
    spec.validate();
    Workload<T> w;
    w.spec = spec;

    const std::size_t hd = spec.geometry.model_width();
    const std::size_t cw = spec.geometry.cache_width();
    const double q_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    w.weights.reserve(spec.num_layers);
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        AttentionWeights<T> aw;
        auto draw = [&](std::size_t rows, std::size_t cols, std::uint64_t extra) {
            Matrix<T> m = gaussian_matrix<T>(rows, cols, spec.seed, stream_id(1, 0, l, extra));
            for (auto& v : m.data) v = static_cast<T>(static_cast<double>(v) * q_scale);
            return m;
        };
        aw.w_q = draw(hd, hd, 0);
        aw.w_k = draw(hd, cw, 1);
        aw.w_v = draw(hd, cw, 2);
        aw.w_o = draw(hd, hd, 3);
        w.weights.push_back(std::move(aw));
    }

    w.instances.resize(spec.batch);
    for (std::size_t b = 0; b < spec.batch; ++b) {
        auto& inst = w.instances[b];
        inst.visual_k.reserve(spec.num_layers);
        for (std::size_t l = 0; l < spec.num_layers; ++l) {
            inst.visual_k.push_back(latent_factor_matrix<T>(
                spec.visual_tokens, spec.geometry, spec.visual, spec.seed, stream_id(2, b, l, 0)));
            inst.visual_v.push_back(latent_factor_matrix<T>(
                spec.visual_tokens, spec.geometry, spec.visual, spec.seed, stream_id(2, b, l, 1)));
            inst.textual_k.push_back(latent_factor_matrix<T>(
                spec.textual_tokens, spec.geometry, spec.textual, spec.seed, stream_id(2, b, l, 2)));
            inst.textual_v.push_back(latent_factor_matrix<T>(
                spec.textual_tokens, spec.geometry, spec.textual, spec.seed, stream_id(2, b, l, 3)));
        }
        inst.decode_inputs =
            gaussian_matrix<T>(spec.decode_steps, hd, spec.seed, stream_id(3, b, 0, 0));
    }
    return w;
}

std::size_t effective_thread_count(std::size_t requested, std::size_t jobs) {
    if (jobs == 0) return 1;
    std::size_t n = requested;
    if (n == 0) {
        if (const char* env = std::getenv("KVPACK_THREADS")) {
            const std::string v(env);
            try {
                std::size_t used = 0;
                const long long x = std::stoll(v, &used);
                if (used != v.size() || x < 1)
                    throw parameter_error("KVPACK_THREADS must be a positive integer");
                n = static_cast<std::size_t>(x);
            } catch (const parameter_error&) {
                throw;
            } catch (...) {
                throw parameter_error("KVPACK_THREADS must be a positive integer");
            }
        }
    }
    if (n == 0) n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    return std::min(n, jobs);
}

namespace {

template <typename T>
struct InstanceOutcome {
    std::vector<StepRecord> steps;
    std::vector<RatioRecord> ratios; // final state
    std::uint64_t final_bytes = 0;
    std::uint64_t final_importance_bytes = 0;
    std::uint64_t flops = 0;
    std::uint64_t flops_full = 0;
    std::string scores_dump;
};

template <typename T>
std::vector<RatioRecord> final_ratios(const std::vector<LayerCache<T>>& caches,
                                      std::size_t width) {
    // Ratios echo (T, HD, R) of layer-0 factored matrices in the closed form.
    std::vector<RatioRecord> out;
    if (caches.empty()) return out;
    const LayerCache<T>& c0 = caches.front();
    for (Modality m : {Modality::visual, Modality::textual}) {
        const auto& seg = c0.segment(m);
        if (seg.blocks.empty()) continue;
        for (MatrixKind kind : {MatrixKind::key, MatrixKind::value}) {
            const BlockStore<T>& s =
                kind == MatrixKind::key ? seg.blocks[0].keys : seg.blocks[0].values;
            const std::size_t rank = store_rank(s);
            if (rank == 0) continue;
            RatioRecord rr;
            rr.modality = to_string(m);
            rr.kind = to_string(kind);
            rr.tokens = store_token_count(s);
            rr.width = width;
            rr.rank = rank;
            rr.ratio = compression_ratio(rr.tokens, rr.width, rank);
            out.push_back(rr);
        }
    }
    return out;
}

template <typename T>
InstanceOutcome<T> run_instance(const Workload<T>& wl, const DecodeConfig& cfg,
                                const RunOptions& options, std::size_t b) {
    const WorkloadSpec& spec = wl.spec;
    const HeadGeometry& geom = spec.geometry;
    const auto& inst = wl.instances[b];

    std::vector<LayerCache<T>> caches;
    caches.reserve(spec.num_layers);
    for (std::size_t l = 0; l < spec.num_layers; ++l) caches.emplace_back(geom, l);

    // Dense 64-bit reference chain mirrors the engine step by step.
    std::vector<AttentionWeights<double>> ref_w(spec.num_layers);
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        ref_w[l].w_q = wl.weights[l].w_q.template cast<double>();
        ref_w[l].w_k = wl.weights[l].w_k.template cast<double>();
        ref_w[l].w_v = wl.weights[l].w_v.template cast<double>();
        ref_w[l].w_o = wl.weights[l].w_o.template cast<double>();
    }
    std::vector<Matrix<double>> ref_k(spec.num_layers), ref_v(spec.num_layers);

    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        if (spec.visual_tokens > 0)
            append_tokens(caches[l], Modality::visual, inst.visual_k[l], inst.visual_v[l]);
        if (spec.textual_tokens > 0)
            append_tokens(caches[l], Modality::textual, inst.textual_k[l], inst.textual_v[l]);

        ref_k[l] = Matrix<double>(0, geom.cache_width());
        ref_v[l] = Matrix<double>(0, geom.cache_width());
        ref_k[l].append_rows(inst.visual_k[l].template cast<double>());
        ref_k[l].append_rows(inst.textual_k[l].template cast<double>());
        ref_v[l].append_rows(inst.visual_v[l].template cast<double>());
        ref_v[l].append_rows(inst.textual_v[l].template cast<double>());

        if (options.compress_after_prefill) {
            StepReport prefill_report;
            compress_now(caches[l], cfg, prefill_report);
        }
        if (options.importance_reset)
            std::fill(caches[l].importance.scores.begin(), caches[l].importance.scores.end(),
                      0.0);
    }

    InstanceOutcome<T> out;
    std::ostringstream scores;

    for (std::size_t step = 0; step < spec.decode_steps; ++step) {
        Matrix<T> h_engine(1, geom.model_width());
        for (std::size_t j = 0; j < h_engine.cols; ++j)
            h_engine(0, j) = inst.decode_inputs(step, j);
        Matrix<double> h_ref = h_engine.template cast<double>();

        StepRecord rec;
        rec.instance = static_cast<std::uint32_t>(b);
        rec.step = static_cast<std::uint32_t>(step);

        for (std::size_t l = 0; l < spec.num_layers; ++l) {
            StepReport rep;
            Matrix<T> engine_out =
                decode_step(h_engine, caches[l], wl.weights[l], cfg, rep, Modality::textual);

            ref_k[l].append_rows(matmul(h_ref, ref_w[l].w_k));
            ref_v[l].append_rows(matmul(h_ref, ref_w[l].w_v));
            Matrix<double> ref_out =
                reference_attention(h_ref, ref_k[l], ref_v[l], ref_w[l], geom);

            rec.bytes_total += rep.bytes_after;
            rec.bytes_importance += rep.importance_bytes;
            rec.decompress_flops += rep.decompress_flops;
            rec.decompress_flops_full += rep.decompress_flops_full;
            rec.compression_events += rep.compression_event ? 1 : 0;
            for (auto& warning : rep.warnings) rec.warnings.push_back(std::move(warning));

            if (options.dump_scores_path) {
                scores << b << '\t' << l << '\t' << step;
                for (double s : caches[l].importance.scores) scores << '\t' << fmt_double(s);
                scores << '\n';
            }

            h_engine = std::move(engine_out);
            h_ref = std::move(ref_out);
        }

        const Matrix<double> engine_final = h_engine.template cast<double>();
        rec.output_max_abs_err = max_abs_difference(engine_final, h_ref);
        const double ref_norm = frobenius_norm(h_ref);
        rec.output_rel_err =
            ref_norm == 0.0 ? 0.0 : frobenius_distance(engine_final, h_ref) / ref_norm;

        out.flops += rec.decompress_flops;
        out.flops_full += rec.decompress_flops_full;
        out.steps.push_back(std::move(rec));
    }

    std::uint64_t bytes = 0, imp = 0;
    for (const auto& c : caches) {
        const CacheBytes cb = memory_bytes(c, cfg.bytes_per_scalar);
        bytes += cb.cache_bytes;
        imp += cb.importance_bytes;
    }
    out.final_bytes = bytes;
    out.final_importance_bytes = imp;
    out.ratios = final_ratios(caches, geom.cache_width());
    out.scores_dump = scores.str();

    if (options.dump_caches_dir) {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(*options.dump_caches_dir, ec);
        if (ec) throw io_error("cannot create directory: " + *options.dump_caches_dir);
        const std::size_t width =
            (cfg.bytes_per_scalar == 2 || cfg.bytes_per_scalar == 4 || cfg.bytes_per_scalar == 8)
                ? cfg.bytes_per_scalar
                : sizeof(T);
        for (std::size_t l = 0; l < caches.size(); ++l) {
            const std::string path = *options.dump_caches_dir + "/instance" + std::to_string(b) +
                                     "_layer" + std::to_string(l) + ".kvpk";
            save_cache(caches[l], path, width);
        }
    }
    return out;
}

} // namespace

template <typename T>
RunReport run_experiment(const WorkloadSpec& spec, const DecodeConfig& cfg,
                         const RunOptions& options) {
    spec.validate();
    cfg.validate();
    const Workload<T> wl = generate_workload<T>(spec);

    std::vector<InstanceOutcome<T>> outcomes(spec.batch);
    const std::size_t threads = effective_thread_count(options.threads, spec.batch);
    if (threads <= 1) {
        for (std::size_t b = 0; b < spec.batch; ++b)
            outcomes[b] = run_instance(wl, cfg, options, b);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        auto worker = [&] {
            for (;;) {
                const std::size_t b = next.fetch_add(1);
                if (b >= spec.batch) return;
                try {
                    outcomes[b] = run_instance(wl, cfg, options, b);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(threads);
        for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    RunReport report;
    Aggregates& agg = report.aggregates;
    agg.instances = spec.batch;
    std::uint64_t flops = 0, flops_full = 0;
    for (std::size_t b = 0; b < spec.batch; ++b) {
        auto& oc = outcomes[b];
        for (auto& s : oc.steps) report.steps.push_back(std::move(s));
        agg.final_bytes_total += oc.final_bytes;
        agg.final_bytes_importance += oc.final_importance_bytes;
        flops += oc.flops;
        flops_full += oc.flops_full;
        if (b == 0) agg.compression_ratios = oc.ratios;
    }
    agg.steps = report.steps.size();
    for (const auto& s : report.steps) {
        agg.mean_output_max_abs_err += s.output_max_abs_err;
        agg.mean_output_rel_err += s.output_rel_err;
        agg.max_output_max_abs_err = std::max(agg.max_output_max_abs_err, s.output_max_abs_err);
    }
    if (!report.steps.empty()) {
        agg.mean_output_max_abs_err /= static_cast<double>(report.steps.size());
        agg.mean_output_rel_err /= static_cast<double>(report.steps.size());
    }
    agg.total_decompress_flops = flops;
    agg.flops_reduction_vs_untiered =
        flops_full == 0 ? 0.0 : 1.0 - static_cast<double>(flops) / static_cast<double>(flops_full);

    ExperimentConfig echo_cfg;
    echo_cfg.workload = spec;
    echo_cfg.decode = cfg;
    echo_cfg.run = options;
    echo_cfg.precision = sizeof(T) == 4 ? Precision::f32 : Precision::f64;
    agg.config_echo = render_config(echo_cfg);

    if (options.dump_scores_path) {
        std::ofstream out(*options.dump_scores_path);
        if (!out) throw io_error("cannot open for writing: " + *options.dump_scores_path);
        for (const auto& oc : outcomes) out << oc.scores_dump;
        if (!out) throw io_error("write failed: " + *options.dump_scores_path);
    }
    return report;
}

namespace {

void render_step_json(const StepRecord& s, std::string& out) {
    out += "{\"record\":\"step\",\"instance\":" + fmt_u64(s.instance);
    out += ",\"step\":" + fmt_u64(s.step);
    out += ",\"bytes_total\":" + fmt_u64(s.bytes_total);
    out += ",\"bytes_importance\":" + fmt_u64(s.bytes_importance);
    out += ",\"decompress_flops\":" + fmt_u64(s.decompress_flops);
    out += ",\"decompress_flops_full\":" + fmt_u64(s.decompress_flops_full);
    out += ",\"compression_events\":" + fmt_u64(s.compression_events);
    out += ",\"output_max_abs_err\":" + fmt_double(s.output_max_abs_err);
    out += ",\"output_rel_err\":" + fmt_double(s.output_rel_err);
    out += ",\"warnings\":[";
    for (std::size_t i = 0; i < s.warnings.size(); ++i) {
        if (i) out += ",";
        out += "\"" + json_escape(s.warnings[i]) + "\"";
    }
    out += "]}\n";
}

void render_aggregate_json(const Aggregates& a, std::string& out) {
    out += "{\"record\":\"aggregate\",\"instances\":" + fmt_u64(a.instances);
    out += ",\"steps\":" + fmt_u64(a.steps);
    out += ",\"mean_output_max_abs_err\":" + fmt_double(a.mean_output_max_abs_err);
    out += ",\"max_output_max_abs_err\":" + fmt_double(a.max_output_max_abs_err);
    out += ",\"mean_output_rel_err\":" + fmt_double(a.mean_output_rel_err);
    out += ",\"final_bytes_total\":" + fmt_u64(a.final_bytes_total);
    out += ",\"final_bytes_importance\":" + fmt_u64(a.final_bytes_importance);
    out += ",\"total_decompress_flops\":" + fmt_u64(a.total_decompress_flops);
    out += ",\"flops_reduction_vs_untiered\":" + fmt_double(a.flops_reduction_vs_untiered);
    out += ",\"compression_ratios\":[";
    for (std::size_t i = 0; i < a.compression_ratios.size(); ++i) {
        const RatioRecord& r = a.compression_ratios[i];
        if (i) out += ",";
        out += "{\"modality\":\"" + r.modality + "\",\"kind\":\"" + r.kind + "\"";
        out += ",\"tokens\":" + fmt_u64(r.tokens);
        out += ",\"width\":" + fmt_u64(r.width);
        out += ",\"rank\":" + fmt_u64(r.rank);
        out += ",\"ratio\":" + fmt_double(r.ratio) + "}";
    }
    out += "],\"config_echo\":\"" + json_escape(a.config_echo) + "\"}\n";
}

constexpr const char* kCsvHeader =
    "record,instance,step,bytes_total,bytes_importance,decompress_flops,"
    "decompress_flops_full,compression_events,output_max_abs_err,output_rel_err,warnings\n";

void render_step_csv(const StepRecord& s, std::string& out) {
    out += "step," + fmt_u64(s.instance) + "," + fmt_u64(s.step);
    out += "," + fmt_u64(s.bytes_total) + "," + fmt_u64(s.bytes_importance);
    out += "," + fmt_u64(s.decompress_flops) + "," + fmt_u64(s.decompress_flops_full);
    out += "," + fmt_u64(s.compression_events);
    out += "," + fmt_double(s.output_max_abs_err) + "," + fmt_double(s.output_rel_err) + ",";
    for (std::size_t i = 0; i < s.warnings.size(); ++i) {
        if (i) out += "|";
        out += s.warnings[i];
    }
    out += "\n";
}

} // namespace

std::string render_report(const RunReport& report, ReportFormat format) {
    std::string out;
    if (format == ReportFormat::json_lines) {
        for (const auto& s : report.steps) render_step_json(s, out);
        render_aggregate_json(report.aggregates, out);
    } else {
        out += kCsvHeader;
        for (const auto& s : report.steps) render_step_csv(s, out);
    }
    return out;
}

void emit_report(const RunReport& report, ReportFormat format, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    const std::string text = render_report(report, format);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw io_error("write failed: " + path);
}

namespace {

StepRecord parse_step_json(const nlohmann::json& j) {
    StepRecord s;
    s.instance = j.at("instance").get<std::uint32_t>();
    s.step = j.at("step").get<std::uint32_t>();
    s.bytes_total = j.at("bytes_total").get<std::uint64_t>();
    s.bytes_importance = j.at("bytes_importance").get<std::uint64_t>();
    s.decompress_flops = j.at("decompress_flops").get<std::uint64_t>();
    s.decompress_flops_full = j.at("decompress_flops_full").get<std::uint64_t>();
    s.compression_events = j.at("compression_events").get<std::uint32_t>();
    s.output_max_abs_err = j.at("output_max_abs_err").get<double>();
    s.output_rel_err = j.at("output_rel_err").get<double>();
    for (const auto& w : j.at("warnings")) s.warnings.push_back(w.get<std::string>());
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

} // namespace

RunReport parse_report_text(const std::string& text, ReportFormat format) {
    RunReport report;
    std::istringstream in(text);
    std::string line;

    if (format == ReportFormat::json_lines) {
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw data_error(std::string("report: bad json line: ") + e.what());
            }
            const std::string record = j.at("record").get<std::string>();
            if (record == "step") {
                report.steps.push_back(parse_step_json(j));
            } else if (record == "aggregate") {
                Aggregates& a = report.aggregates;
                a.instances = j.at("instances").get<std::uint64_t>();
                a.steps = j.at("steps").get<std::uint64_t>();
                a.mean_output_max_abs_err = j.at("mean_output_max_abs_err").get<double>();
                a.max_output_max_abs_err = j.at("max_output_max_abs_err").get<double>();
                a.mean_output_rel_err = j.at("mean_output_rel_err").get<double>();
                a.final_bytes_total = j.at("final_bytes_total").get<std::uint64_t>();
                a.final_bytes_importance = j.at("final_bytes_importance").get<std::uint64_t>();
                a.total_decompress_flops = j.at("total_decompress_flops").get<std::uint64_t>();
                a.flops_reduction_vs_untiered =
                    j.at("flops_reduction_vs_untiered").get<double>();
                for (const auto& rj : j.at("compression_ratios")) {
                    RatioRecord r;
                    r.modality = rj.at("modality").get<std::string>();
                    r.kind = rj.at("kind").get<std::string>();
                    r.tokens = rj.at("tokens").get<std::uint64_t>();
                    r.width = rj.at("width").get<std::uint64_t>();
                    r.rank = rj.at("rank").get<std::uint64_t>();
                    r.ratio = rj.at("ratio").get<double>();
                    a.compression_ratios.push_back(std::move(r));
                }
                a.config_echo = j.at("config_echo").get<std::string>();
            } else {
                throw data_error("report: unknown record type '" + record + "'");
            }
        }
        return report;
    }

    // CSV: header + step rows; aggregates are recomputed from the records.
    if (!std::getline(in, line)) throw data_error("report: empty csv");
    {
        std::string expected(kCsvHeader);
        expected.pop_back(); // trailing newline
        if (line != expected) throw data_error("report: unexpected csv header");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 11 || fields[0] != "step")
            throw data_error("report: malformed csv row");
        StepRecord s;
        s.instance = static_cast<std::uint32_t>(std::stoull(fields[1]));
        s.step = static_cast<std::uint32_t>(std::stoull(fields[2]));
        s.bytes_total = std::stoull(fields[3]);
        s.bytes_importance = std::stoull(fields[4]);
        s.decompress_flops = std::stoull(fields[5]);
        s.decompress_flops_full = std::stoull(fields[6]);
        s.compression_events = static_cast<std::uint32_t>(std::stoull(fields[7]));
        s.output_max_abs_err = std::stod(fields[8]);
        s.output_rel_err = std::stod(fields[9]);
        if (!fields[10].empty()) {
            std::stringstream ws(fields[10]);
            std::string warning;
            while (std::getline(ws, warning, '|')) s.warnings.push_back(warning);
        }
        report.steps.push_back(std::move(s));
    }

    Aggregates& a = report.aggregates;
    a.steps = report.steps.size();
    std::uint64_t flops = 0, flops_full = 0;
    std::uint64_t max_instance = 0;
    for (const auto& s : report.steps) {
        a.mean_output_max_abs_err += s.output_max_abs_err;
        a.mean_output_rel_err += s.output_rel_err;
        a.max_output_max_abs_err = std::max(a.max_output_max_abs_err, s.output_max_abs_err);
        flops += s.decompress_flops;
        flops_full += s.decompress_flops_full;
        max_instance = std::max<std::uint64_t>(max_instance, s.instance);
    }
    if (!report.steps.empty()) {
        a.mean_output_max_abs_err /= static_cast<double>(report.steps.size());
        a.mean_output_rel_err /= static_cast<double>(report.steps.size());
        a.instances = max_instance + 1;
    }
    a.total_decompress_flops = flops;
    a.flops_reduction_vs_untiered =
        flops_full == 0 ? 0.0 : 1.0 - static_cast<double>(flops) / static_cast<double>(flops_full);
    // Final bytes: each instance's highest-step record.
    std::map<std::uint32_t, const StepRecord*> last;
    for (const auto& s : report.steps) {
        auto [it, inserted] = last.try_emplace(s.instance, &s);
        if (!inserted && s.step > it->second->step) it->second = &s;
    }
    for (const auto& entry : last) {
        a.final_bytes_total += entry.second->bytes_total;
        a.final_bytes_importance += entry.second->bytes_importance;
    }
    return report;
}

RunReport parse_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open report: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    const ReportFormat format = (first != std::string::npos && text[first] == '{')
                                    ? ReportFormat::json_lines
                                    : ReportFormat::csv;
    return parse_report_text(text, format);
}

#define KVPACK_INSTANTIATE_HARNESS(T)                                                      \
    template Matrix<T> latent_factor_matrix<T>(std::size_t, const HeadGeometry&,           \
                                               const ModalityProfile&, std::uint64_t,      \
                                               std::uint64_t);                             \
    template Workload<T> generate_workload<T>(const WorkloadSpec&);                        \
    template RunReport run_experiment<T>(const WorkloadSpec&, const DecodeConfig&,         \
                                         const RunOptions&);

KVPACK_INSTANTIATE_HARNESS(float)
KVPACK_INSTANTIATE_HARNESS(double)

#undef KVPACK_INSTANTIATE_HARNESS

} // namespace kvpack
