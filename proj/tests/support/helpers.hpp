// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test fixtures. Random draws here use the standard library's
// mt19937_64 rather than the engine's generator, so test inputs do not
// depend on the code under test.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "kvpack/matrix.hpp"

namespace kvpack::testing {

inline Matrix<double> gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<double> m(rows, cols);
    for (auto& v : m.data) v = dist(rng);
    return m;
}

// Sum of `rank` decaying outer products of independent Gaussian vectors:
// numerically full-spectrum within the leading `rank` directions, zero
// beyond them.
inline Matrix<double> planted_rank(std::size_t rows, std::size_t cols, std::size_t rank,
                                   std::uint64_t seed, double decay = 0.7) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<double> m(rows, cols);
    double weight = 1.0;
    for (std::size_t r = 0; r < rank; ++r) {
        std::vector<double> u(rows), v(cols);
        for (auto& x : u) x = dist(rng);
        for (auto& x : v) x = dist(rng);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) m(i, j) += weight * u[i] * v[j];
        weight *= decay;
    }
    return m;
}

// Rows drawn from a Dirichlet-ish construction: positive entries
// normalized to sum exactly to one (attention-shaped input).
inline Matrix<double> row_stochastic(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.01, 1.0);
    Matrix<double> m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            m(i, j) = dist(rng);
            total += m(i, j);
        }
        for (std::size_t j = 0; j < cols; ++j) m(i, j) /= total;
    }
    return m;
}

template <typename T>
inline Matrix<T> cast_to(const Matrix<double>& m) {
    return m.template cast<T>();
}

} // namespace kvpack::testing
