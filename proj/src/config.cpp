// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace kvpack {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
    throw parameter_error("config: bad value '" + value + "' for key '" + key + "'");
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) bad_value(key, v);
        return x;
    } catch (const parameter_error&) {
        throw;
    } catch (...) {
        bad_value(key, v);
    }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    const long long x = parse_int(key, v);
    if (x < 0) bad_value(key, v);
    return static_cast<std::size_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) bad_value(key, v);
        return x;
    } catch (const parameter_error&) {
        throw;
    } catch (...) {
        bad_value(key, v);
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v);
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(v);
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (const auto& item : split_list(v)) out.push_back(parse_double(key, item));
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_double_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += fmt_double(v[i]);
    }
    return out;
}

struct SchemeDraft {
    bool present = false;
    RankScheme scheme;
};

void apply_key(ExperimentConfig& c, SchemeDraft& scheme, bool& tiering_present,
               const std::string& section, const std::string& key, const std::string& value) {
    const std::string full = section + "." + key;
    auto& w = c.workload;
    auto& d = c.decode;

    if (section == "workload") {
        if (key == "num_query_heads") w.geometry.num_query_heads = parse_size(full, value);
        else if (key == "num_kv_heads") w.geometry.num_kv_heads = parse_size(full, value);
        else if (key == "head_dim") w.geometry.head_dim = parse_size(full, value);
        else if (key == "num_layers") w.num_layers = parse_size(full, value);
        else if (key == "visual_tokens") w.visual_tokens = parse_size(full, value);
        else if (key == "textual_tokens") w.textual_tokens = parse_size(full, value);
        else if (key == "decode_steps") w.decode_steps = parse_size(full, value);
        else if (key == "batch") w.batch = parse_size(full, value);
        else if (key == "seed") w.seed = static_cast<std::uint64_t>(parse_int(full, value));
        else throw parameter_error("config: unknown key '" + full + "'");
    } else if (section == "workload.visual" || section == "workload.textual") {
        ModalityProfile& p = section == "workload.visual" ? w.visual : w.textual;
        if (key == "true_rank") p.true_rank = parse_size(full, value);
        else if (key == "spectrum_decay") p.spectrum_decay = parse_double(full, value);
        else if (key == "shared_subspace") p.shared_subspace = parse_size(full, value);
        else if (key == "noise_floor") p.noise_floor = parse_double(full, value);
        else throw parameter_error("config: unknown key '" + full + "'");
    } else if (section == "decode") {
        if (key == "compression_period") {
            if (value == "none" || value == "inf")
                d.compression_period.reset();
            else
                d.compression_period = parse_size(full, value);
        } else if (key == "alpha") d.alpha = parse_double(full, value);
        else if (key == "svd_method") {
            if (value == "exact") d.svd.method = SvdMethod::exact;
            else if (value == "randomized") d.svd.method = SvdMethod::randomized;
            else bad_value(full, value);
        } else if (key == "svd_seed") d.svd.seed = static_cast<std::uint64_t>(parse_int(full, value));
        else if (key == "svd_oversampling") d.svd.oversampling = parse_size(full, value);
        else if (key == "svd_power_iterations") d.svd.power_iterations = parse_size(full, value);
        else if (key == "recompress") {
            if (value == "joint") d.recompress = RecompressMode::joint;
            else if (value == "separate_epochs") d.recompress = RecompressMode::separate_epochs;
            else bad_value(full, value);
        } else if (key == "eviction") d.eviction = parse_bool(full, value);
        else if (key == "quantization") d.quantization = parse_bool(full, value);
        else if (key == "quant_group_size") d.quant_group_size = parse_size(full, value);
        else if (key == "fused") d.fused = parse_bool(full, value);
        else if (key == "fused_tile") d.fused_tile = parse_size(full, value);
        else if (key == "bytes_per_scalar") d.bytes_per_scalar = parse_size(full, value);
        else if (key == "precision") {
            if (value == "f32") c.precision = Precision::f32;
            else if (value == "f64") c.precision = Precision::f64;
            else bad_value(full, value);
        } else if (key == "importance_reset") c.run.importance_reset = parse_bool(full, value);
        else if (key == "compress_after_prefill")
            c.run.compress_after_prefill = parse_bool(full, value);
        else throw parameter_error("config: unknown key '" + full + "'");
    } else if (section == "decode.ranks") {
        if (key == "key_visual") d.ranks.key_visual = parse_size(full, value);
        else if (key == "value_visual") d.ranks.value_visual = parse_size(full, value);
        else if (key == "key_textual") d.ranks.key_textual = parse_size(full, value);
        else if (key == "value_textual") d.ranks.value_textual = parse_size(full, value);
        else throw parameter_error("config: unknown key '" + full + "'");
    } else if (section == "decode.rank_scheme") {
        scheme.present = true;
        auto& s = scheme.scheme;
        if (key == "kind") {
            if (value == "fixed") s.kind = RankScheme::Kind::fixed;
            else if (value == "linear_schedule") s.kind = RankScheme::Kind::linear_schedule;
            else if (value == "variance_target") s.kind = RankScheme::Kind::variance_target;
            else bad_value(full, value);
        } else if (key == "fixed_rank") s.fixed_rank = parse_size(full, value);
        else if (key == "first_layer_rank") s.schedule.first_layer_rank = parse_size(full, value);
        else if (key == "last_layer_rank") s.schedule.last_layer_rank = parse_size(full, value);
        else if (key == "num_layers") s.schedule.num_layers = parse_size(full, value);
        else if (key == "variance_target") s.variance.target = parse_double(full, value);
        else if (key == "max_rank") s.variance.max_rank = parse_size(full, value);
        else throw parameter_error("config: unknown key '" + full + "'");
    } else if (section == "decode.tiering") {
        tiering_present = true;
        if (!c.decode.tiering) c.decode.tiering.emplace();
        TierSpec& t = *c.decode.tiering;
        if (key == "ratios") t.ratios = parse_double_list(full, value);
        else if (key == "key_rank_fractions") t.key_fractions = parse_double_list(full, value);
        else if (key == "value_rank_fractions") t.value_fractions = parse_double_list(full, value);
        else throw parameter_error("config: unknown key '" + full + "'");
    } else {
        throw parameter_error("config: unknown section '" + section + "'");
    }
}

} // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig c;
    SchemeDraft scheme;
    bool tiering_present = false;

    std::string section;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line.erase(comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw parameter_error("config: malformed section header at line " +
                                      std::to_string(line_no));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw parameter_error("config: expected key = value at line " +
                                  std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw parameter_error("config: key '" + key + "' outside any section");
        apply_key(c, scheme, tiering_present, section, key, value);
    }

    if (scheme.present) c.decode.rank_scheme = scheme.scheme;
    if (tiering_present) {
        TierSpec& t = *c.decode.tiering;
        if (t.ratios.empty())
            throw parameter_error("config: decode.tiering needs ratios");
        // Fractions default to "keep full rank" when unspecified.
        if (t.key_fractions.empty()) t.key_fractions.assign(t.ratios.size(), 1.0);
        if (t.value_fractions.empty()) t.value_fractions.assign(t.ratios.size(), 1.0);
    }

    c.workload.validate();
    c.decode.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string render_config(const ExperimentConfig& c) {
    std::string out;
    const auto& w = c.workload;
    const auto& d = c.decode;
    auto line = [&out](const std::string& k, const std::string& v) {
        out += k + " = " + v + "\n";
    };
    auto num = [](auto v) { return std::to_string(v); };

    out += "[workload]\n";
    line("num_query_heads", num(w.geometry.num_query_heads));
    line("num_kv_heads", num(w.geometry.num_kv_heads));
    line("head_dim", num(w.geometry.head_dim));
    line("num_layers", num(w.num_layers));
    line("visual_tokens", num(w.visual_tokens));
    line("textual_tokens", num(w.textual_tokens));
    line("decode_steps", num(w.decode_steps));
    line("batch", num(w.batch));
    line("seed", num(w.seed));
    for (const auto* p : {&w.visual, &w.textual}) {
        out += p == &w.visual ? "[workload.visual]\n" : "[workload.textual]\n";
        line("true_rank", num(p->true_rank));
        line("spectrum_decay", fmt_double(p->spectrum_decay));
        line("shared_subspace", num(p->shared_subspace));
        line("noise_floor", fmt_double(p->noise_floor));
    }
    out += "[decode]\n";
    line("compression_period",
         d.compression_period ? num(*d.compression_period) : std::string("none"));
    line("alpha", fmt_double(d.alpha));
    line("svd_method", d.svd.method == SvdMethod::exact ? "exact" : "randomized");
    line("svd_seed", num(d.svd.seed));
    line("svd_oversampling", num(d.svd.oversampling));
    line("svd_power_iterations", num(d.svd.power_iterations));
    line("recompress", d.recompress == RecompressMode::joint ? "joint" : "separate_epochs");
    line("eviction", d.eviction ? "true" : "false");
    line("quantization", d.quantization ? "true" : "false");
    line("quant_group_size", num(d.quant_group_size));
    line("fused", d.fused ? "true" : "false");
    line("fused_tile", num(d.fused_tile));
    line("bytes_per_scalar", num(d.bytes_per_scalar));
    line("precision", c.precision == Precision::f32 ? "f32" : "f64");
    line("importance_reset", c.run.importance_reset ? "true" : "false");
    line("compress_after_prefill", c.run.compress_after_prefill ? "true" : "false");
    out += "[decode.ranks]\n";
    line("key_visual", num(d.ranks.key_visual));
    line("value_visual", num(d.ranks.value_visual));
    line("key_textual", num(d.ranks.key_textual));
    line("value_textual", num(d.ranks.value_textual));
    if (d.rank_scheme) {
        const auto& s = *d.rank_scheme;
        out += "[decode.rank_scheme]\n";
        const char* kind = s.kind == RankScheme::Kind::fixed ? "fixed"
                           : s.kind == RankScheme::Kind::linear_schedule ? "linear_schedule"
                                                                         : "variance_target";
        line("kind", kind);
        line("fixed_rank", num(s.fixed_rank));
        line("first_layer_rank", num(s.schedule.first_layer_rank));
        line("last_layer_rank", num(s.schedule.last_layer_rank));
        line("num_layers", num(s.schedule.num_layers));
        line("variance_target", fmt_double(s.variance.target));
        line("max_rank", num(s.variance.max_rank));
    }
    if (d.tiering) {
        const auto& t = *d.tiering;
        out += "[decode.tiering]\n";
        line("ratios", fmt_double_list(t.ratios));
        line("key_rank_fractions", fmt_double_list(t.key_fractions));
        line("value_rank_fractions", fmt_double_list(t.value_fractions));
    }
    return out;
}

} // namespace kvpack
