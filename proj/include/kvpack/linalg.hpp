// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "kvpack/matrix.hpp"

namespace kvpack {

enum class SvdMethod { exact, randomized };

struct SvdOptions {
    SvdMethod method = SvdMethod::exact;
    std::uint64_t seed = 0;         // randomized method only
    std::size_t oversampling = 8;   // extra columns in the sketch
    std::size_t power_iterations = 2;
};

// Rank-R factorization of m (rows x cols): left (rows x R) carries the
// singular values in its columns, right (R x cols) has orthonormal rows
// ordered by descending singular value. Exact method: full SVD, truncated.
// Randomized method: Gaussian range sketch with oversampling + power
// iterations (deterministic for a fixed seed).
//
// Preconditions: 1 <= rank <= min(rows, cols); matrix finite.
// A zero matrix yields left = 0 and a valid orthonormal right factor.
template <typename T>
FactorPair<T> truncated_svd(const Matrix<T>& m, std::size_t rank, const SvdOptions& opts = {});

// All singular values of m, descending, computed in double.
template <typename T>
std::vector<double> singular_values(const Matrix<T>& m);

// Fraction of squared Frobenius norm captured by the top `rank` singular
// values, in [0, 1]. A zero matrix reports 1.0 at every rank.
template <typename T>
double explained_variance_ratio(const Matrix<T>& m, std::size_t rank);

struct VarianceRank {
    std::size_t rank = 0;   // smallest rank reaching the target (or max_rank)
    double achieved = 0.0;  // ratio actually reached at that rank
};

// Smallest rank whose explained-variance ratio reaches `target`; clamps to
// max_rank (reporting the achieved ratio) when the target is unreachable.
template <typename T>
VarianceRank rank_for_variance(const Matrix<T>& m, double target, std::size_t max_rank);

// Matrix product a * b in T precision.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

// Gaussian matrix from the Philox stream (seed, stream), entries N(0, 1).
template <typename T>
Matrix<T> gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                          std::uint64_t stream = 0);

} // namespace kvpack
