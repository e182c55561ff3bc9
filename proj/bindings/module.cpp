// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
//
// Python bindings for the closed-form accounting, the factorization entry
// points, and the simulation harness. Matrices cross the boundary as 2-D
// float64 numpy arrays (copied, not aliased).
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "kvpack/cache.hpp"
#include "kvpack/config.hpp"
#include "kvpack/errors.hpp"
#include "kvpack/harness.hpp"
#include "kvpack/importance.hpp"
#include "kvpack/linalg.hpp"
#include "kvpack/quantize.hpp"

namespace py = pybind11;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

kvpack::Matrix<double> to_matrix(const DoubleArray& a) {
    if (a.ndim() != 2) throw kvpack::shape_error("expected a 2-D array");
    kvpack::Matrix<double> m(static_cast<std::size_t>(a.shape(0)),
                             static_cast<std::size_t>(a.shape(1)));
    const auto view = a.unchecked<2>();
    for (py::ssize_t i = 0; i < a.shape(0); ++i)
        for (py::ssize_t j = 0; j < a.shape(1); ++j)
            m(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = view(i, j);
    return m;
}

py::array_t<double> from_matrix(const kvpack::Matrix<double>& m) {
    py::array_t<double> out({m.rows, m.cols});
    auto view = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j)
            view(static_cast<py::ssize_t>(i), static_cast<py::ssize_t>(j)) = m(i, j);
    return out;
}

kvpack::SvdOptions svd_options(const std::string& method, std::uint64_t seed,
                               std::size_t oversampling, std::size_t power_iterations) {
    kvpack::SvdOptions opts;
    if (method == "exact")
        opts.method = kvpack::SvdMethod::exact;
    else if (method == "randomized")
        opts.method = kvpack::SvdMethod::randomized;
    else
        throw kvpack::parameter_error("svd method must be 'exact' or 'randomized'");
    opts.seed = seed;
    opts.oversampling = oversampling;
    opts.power_iterations = power_iterations;
    return opts;
}

kvpack::ReportFormat report_format(const std::string& name) {
    if (name == "json-lines") return kvpack::ReportFormat::json_lines;
    if (name == "csv") return kvpack::ReportFormat::csv;
    throw kvpack::parameter_error("format must be 'json-lines' or 'csv'");
}

py::dict aggregates_dict(const kvpack::Aggregates& a) {
    py::dict d;
    d["instances"] = a.instances;
    d["steps"] = a.steps;
    d["mean_output_max_abs_err"] = a.mean_output_max_abs_err;
    d["max_output_max_abs_err"] = a.max_output_max_abs_err;
    d["mean_output_rel_err"] = a.mean_output_rel_err;
    d["final_bytes_total"] = a.final_bytes_total;
    d["final_bytes_importance"] = a.final_bytes_importance;
    d["total_decompress_flops"] = a.total_decompress_flops;
    d["flops_reduction_vs_untiered"] = a.flops_reduction_vs_untiered;
    py::list ratios;
    for (const kvpack::RatioRecord& r : a.compression_ratios) {
        py::dict entry;
        entry["modality"] = r.modality;
        entry["kind"] = r.kind;
        entry["tokens"] = r.tokens;
        entry["width"] = r.width;
        entry["rank"] = r.rank;
        entry["ratio"] = r.ratio;
        ratios.append(entry);
    }
    d["compression_ratios"] = ratios;
    return d;
}

py::dict run_simulation(const std::string& config_path,
                        const std::optional<std::string>& out_path, const std::string& format,
                        std::size_t threads) {
    kvpack::ExperimentConfig cfg = kvpack::load_config(config_path);
    if (threads > 0) cfg.run.threads = threads;
    kvpack::RunReport report;
    {
        py::gil_scoped_release release;
        report = cfg.precision == kvpack::Precision::f64
                     ? kvpack::run_experiment<double>(cfg.workload, cfg.decode, cfg.run)
                     : kvpack::run_experiment<float>(cfg.workload, cfg.decode, cfg.run);
    }
    if (out_path) kvpack::emit_report(report, report_format(format), *out_path);
    return aggregates_dict(report.aggregates);
}

} // namespace

PYBIND11_MODULE(_kvpack, m) {
    m.doc() = "Low-rank KV-cache compression: factorization, accounting, simulation";

    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const kvpack::io_error& e) {
            PyErr_SetString(PyExc_OSError, e.what());
        } catch (const kvpack::parameter_error& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        } catch (const kvpack::data_error& e) {
            PyErr_SetString(PyExc_ValueError, e.what());
        }
    });

    m.def(
        "truncated_svd",
        [](const DoubleArray& a, std::size_t rank, const std::string& method,
           std::uint64_t seed, std::size_t oversampling, std::size_t power_iterations) {
            const kvpack::FactorPair<double> f = kvpack::truncated_svd(
                to_matrix(a), rank, svd_options(method, seed, oversampling, power_iterations));
            return py::make_tuple(from_matrix(f.left), from_matrix(f.right));
        },
        py::arg("a"), py::arg("rank"), py::arg("method") = "exact", py::arg("seed") = 0,
        py::arg("oversampling") = 8, py::arg("power_iterations") = 2,
        "Rank-R factorization (left: T x R with singular values folded in, right: R x W "
        "with orthonormal rows). Truncating both factors to a prefix stays optimal.");

    m.def(
        "singular_values",
        [](const DoubleArray& a) {
            const std::vector<double> sv = kvpack::singular_values(to_matrix(a));
            return py::array_t<double>(static_cast<py::ssize_t>(sv.size()), sv.data());
        },
        py::arg("a"), "All singular values, descending.");

    m.def(
        "explained_variance_ratio",
        [](const DoubleArray& a, std::size_t rank) {
            return kvpack::explained_variance_ratio(to_matrix(a), rank);
        },
        py::arg("a"), py::arg("rank"),
        "Fraction of squared Frobenius mass captured by the top `rank` directions.");

    m.def(
        "rank_for_variance",
        [](const DoubleArray& a, double target, std::size_t max_rank) {
            const kvpack::VarianceRank r =
                kvpack::rank_for_variance(to_matrix(a), target, max_rank);
            return py::make_tuple(r.rank, r.achieved);
        },
        py::arg("a"), py::arg("target"), py::arg("max_rank"),
        "Smallest rank reaching the explained-variance target, clamped to max_rank. "
        "Returns (rank, achieved).");

    m.def("compression_ratio", &kvpack::compression_ratio, py::arg("tokens"), py::arg("width"),
          py::arg("rank"), "Scalar-count ratio T*W / (T*R + R*W); rank 0 reports 1.");

    m.def(
        "partial_decompress_flops",
        [](std::size_t tokens, std::size_t width, const std::vector<double>& ratios,
           const std::vector<std::size_t>& ranks) {
            const kvpack::DecompressCost c =
                kvpack::flops_partial_decompress(tokens, width, ratios, ranks);
            return py::make_tuple(c.flops, c.reduction);
        },
        py::arg("tokens"), py::arg("width"), py::arg("ratios"), py::arg("ranks"),
        "Closed-form tiered decompression cost. Returns (flops, reduction_vs_full_rank).");

    m.def(
        "ema_update",
        [](const DoubleArray& scores, const DoubleArray& attn, double alpha) {
            if (scores.ndim() != 1) throw kvpack::shape_error("scores must be 1-D");
            kvpack::ImportanceTable table;
            table.alpha = alpha;
            const auto view = scores.unchecked<1>();
            for (py::ssize_t i = 0; i < scores.shape(0); ++i) {
                table.append_token(static_cast<std::uint64_t>(i));
                table.scores[static_cast<std::size_t>(i)] = view(i);
            }
            const kvpack::Matrix<double> rows = to_matrix(attn);
            kvpack::update_importance(table, rows, rows.rows);
            return py::array_t<double>(static_cast<py::ssize_t>(table.scores.size()),
                                       table.scores.data());
        },
        py::arg("scores"), py::arg("attn"), py::arg("alpha") = 0.25,
        "One EMA step: alpha^Tq * scores + (1 - alpha^Tq) * column means of `attn` "
        "(Tq x n head-averaged attention rows).");

    m.def(
        "assign_groups",
        [](const DoubleArray& scores, const std::vector<double>& ratios,
           const std::vector<std::size_t>& ranks) {
            if (scores.ndim() != 1) throw kvpack::shape_error("scores must be 1-D");
            kvpack::ImportanceTable table;
            std::vector<std::uint64_t> positions;
            const auto view = scores.unchecked<1>();
            for (py::ssize_t i = 0; i < scores.shape(0); ++i) {
                table.append_token(static_cast<std::uint64_t>(i));
                table.scores[static_cast<std::size_t>(i)] = view(i);
                positions.push_back(static_cast<std::uint64_t>(i));
            }
            return kvpack::assign_groups(table, positions, ratios, ranks).masks;
        },
        py::arg("scores"), py::arg("ratios"), py::arg("ranks"),
        "Partition token indices into tiers by descending score (ties by position). "
        "Returns one ascending index list per tier.");

    m.def(
        "quantize_roundtrip",
        [](const DoubleArray& a, std::size_t group_size) {
            return from_matrix(kvpack::dequantize(kvpack::quantize_4bit(to_matrix(a),
                                                                        group_size)));
        },
        py::arg("a"), py::arg("group_size") = 64,
        "4-bit groupwise quantize + dequantize; per-element error is bounded by "
        "(group max - group min) / 30.");

    m.def("run_simulation", &run_simulation, py::arg("config_path"),
          py::arg("out_path") = std::nullopt, py::arg("format") = "json-lines",
          py::arg("threads") = 0,
          "Run the synthetic decode benchmark described by an INI config file. "
          "Optionally writes the per-step report; returns the aggregate record as a dict.");

    m.attr("__version__") = "0.1.0";
}
