// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/compressor.hpp"

#include <algorithm>
#include <cmath>

namespace kvpack {

template <typename T>
std::size_t layer_rank(const RankScheme& scheme, std::size_t layer_index,
                       const Matrix<T>* matrix) {
    switch (scheme.kind) {
    case RankScheme::Kind::fixed:
        if (scheme.fixed_rank == 0)
            throw parameter_error("layer_rank: fixed rank must be positive");
        return scheme.fixed_rank;
    case RankScheme::Kind::linear_schedule: {
        const auto& s = scheme.schedule;
        if (s.num_layers == 0) throw parameter_error("layer_rank: schedule needs num_layers");
        if (layer_index >= s.num_layers)
            throw parameter_error("layer_rank: layer index outside the schedule");
        if (s.num_layers == 1) return s.first_layer_rank;
        const double span = static_cast<double>(s.last_layer_rank) -
                            static_cast<double>(s.first_layer_rank);
        const double x = static_cast<double>(s.first_layer_rank) +
                         span * static_cast<double>(layer_index) /
                             static_cast<double>(s.num_layers - 1);
        return static_cast<std::size_t>(std::floor(x + 0.5)); // round half up
    }
    case RankScheme::Kind::variance_target: {
        if (matrix == nullptr)
            throw parameter_error("layer_rank: variance_target needs the matrix");
        const VarianceRank vr =
            rank_for_variance(*matrix, scheme.variance.target, scheme.variance.max_rank);
        return vr.rank;
    }
    }
    throw parameter_error("layer_rank: unknown scheme kind");
}

std::size_t layer_rank(const RankScheme& scheme, std::size_t layer_index) {
    return layer_rank<double>(scheme, layer_index, nullptr);
}

template <typename T>
CompressOutcome<T> compress_segment(const Matrix<T>& m, std::size_t rank,
                                    const SvdOptions& opts) {
    if (m.rows == 0 || m.cols == 0)
        throw shape_error("compress_segment: segment matrix must be non-empty");
    if (rank == 0) throw parameter_error("compress_segment: rank must be positive");

    CompressOutcome<T> out;
    out.requested_rank = rank;
    out.effective_rank = std::min({rank, m.rows, m.cols});
    out.clamped = out.effective_rank != rank;
    out.factors = truncated_svd(m, out.effective_rank, opts);
    return out;
}

#define KVPACK_INSTANTIATE_COMPRESSOR(T)                                                   \
    template std::size_t layer_rank<T>(const RankScheme&, std::size_t, const Matrix<T>*); \
    template CompressOutcome<T> compress_segment<T>(const Matrix<T>&, std::size_t,        \
                                                    const SvdOptions&);

KVPACK_INSTANTIATE_COMPRESSOR(float)
KVPACK_INSTANTIATE_COMPRESSOR(double)

#undef KVPACK_INSTANTIATE_COMPRESSOR

} // namespace kvpack
