// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "kvpack/matrix.hpp"

namespace kvpack {

// 4-bit asymmetric affine quantization of a matrix, grouped along columns:
// rows [g*group_size, (g+1)*group_size) of column c share one (min, scale)
// pair. code = round((x - min) / scale), scale = (max - min) / 15; a
// constant group stores scale 0 and reproduces exactly. Codes are packed
// two per byte, per column (even row in the low nibble), so each column
// occupies ceil(rows / 2) bytes.
template <typename T>
struct QuantizedMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t group_size = 64;
    std::vector<std::uint8_t> codes; // cols * ceil(rows/2), column-major blocks
    std::vector<T> scales;           // cols * groups_per_col, column-major
    std::vector<T> mins;             // aligned with scales

    std::size_t groups_per_col() const {
        return group_size == 0 ? 0 : (rows + group_size - 1) / group_size;
    }
    std::size_t bytes_per_col() const { return (rows + 1) / 2; }
    std::size_t packed_bytes() const { return cols * bytes_per_col(); }

    std::uint8_t code_at(std::size_t i, std::size_t j) const {
        const std::uint8_t byte = codes[j * bytes_per_col() + i / 2];
        return (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    }

    T value_at(std::size_t i, std::size_t j) const {
        const std::size_t g = j * groups_per_col() + i / group_size;
        return static_cast<T>(static_cast<double>(mins[g]) +
                              static_cast<double>(scales[g]) * code_at(i, j));
    }
};

// Quantize with per-(column, group) min/max. group_size must be >= 1.
template <typename T>
QuantizedMatrix<T> quantize_4bit(const Matrix<T>& m, std::size_t group_size = 64);

template <typename T>
Matrix<T> dequantize(const QuantizedMatrix<T>& q);

} // namespace kvpack
