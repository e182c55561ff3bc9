// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "kvpack/errors.hpp"

namespace kvpack {

// Dense row-major matrix. Deliberately minimal: the engine needs owned,
// contiguous, row-addressable storage with a stable layout that maps 1:1
// onto the snapshot format; heavier numerics go through linalg.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data; // rows * cols, row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}
    Matrix(std::size_t r, std::size_t c, std::vector<T> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols)
            throw shape_error("Matrix: payload size does not match rows*cols");
    }

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    T* row(std::size_t i) { return data.data() + i * cols; }
    const T* row(std::size_t i) const { return data.data() + i * cols; }

    bool empty() const { return rows == 0 || cols == 0; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void append_rows(const Matrix<T>& other) {
        if (rows == 0 && cols == 0) cols = other.cols;
        if (other.cols != cols)
            throw shape_error("Matrix::append_rows: column count mismatch");
        data.insert(data.end(), other.data.begin(), other.data.end());
        rows += other.rows;
    }

    Matrix<T> take_rows(const std::vector<std::size_t>& idx) const {
        Matrix<T> out(idx.size(), cols);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < cols; ++j)
                out(i, j) = (*this)(idx[i], j);
        return out;
    }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        for (std::size_t i = 0; i < data.size(); ++i)
            out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

// Low-rank factorization K ≈ left * right.
//   left:  T x R, columns carry the singular values (scaled left vectors)
//   right: R x N, orthonormal rows for the exact method
// Because the scale lives entirely in `left` and rows of `right` are ordered
// by descending singular value, truncating both factors to a prefix of R
// yields the optimal lower-rank approximation without touching the data.
template <typename T>
struct FactorPair {
    Matrix<T> left;
    Matrix<T> right;

    std::size_t rank() const { return left.cols; }
    std::size_t token_count() const { return left.rows; }
    std::size_t width() const { return right.cols; }

    // Dense reconstruction at a rank prefix (rank == rank() reproduces the
    // full approximation). Accumulates in double.
    Matrix<T> reconstruct(std::size_t use_rank) const {
        if (use_rank > rank())
            throw parameter_error("FactorPair::reconstruct: rank exceeds stored rank");
        Matrix<T> out(left.rows, right.cols);
        for (std::size_t i = 0; i < left.rows; ++i) {
            for (std::size_t j = 0; j < right.cols; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < use_rank; ++r)
                    acc += static_cast<double>(left(i, r)) * static_cast<double>(right(r, j));
                out(i, j) = static_cast<T>(acc);
            }
        }
        return out;
    }

    Matrix<T> reconstruct() const { return reconstruct(rank()); }
};

template <typename T>
double frobenius_norm(const Matrix<T>& m) {
    double acc = 0.0;
    for (const T& v : m.data) {
        const double d = static_cast<double>(v);
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <typename T>
double frobenius_distance(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw shape_error("frobenius_distance: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <typename T>
double max_abs_difference(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw shape_error("max_abs_difference: shape mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
        if (d > worst) worst = d;
    }
    return worst;
}

} // namespace kvpack
