// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/quantize.hpp"

#include <algorithm>
#include <cmath>

namespace kvpack {

template <typename T>
QuantizedMatrix<T> quantize_4bit(const Matrix<T>& m, std::size_t group_size) {
    if (group_size < 1) throw parameter_error("quantize_4bit: group_size must be >= 1");
    if (!m.all_finite()) throw data_error("quantize_4bit: matrix contains non-finite values");

    QuantizedMatrix<T> q;
    q.rows = m.rows;
    q.cols = m.cols;
    q.group_size = group_size;
    q.codes.assign(q.packed_bytes(), 0);
    q.scales.assign(m.cols * q.groups_per_col(), T(0));
    q.mins.assign(m.cols * q.groups_per_col(), T(0));

    const std::size_t bpc = q.bytes_per_col();
    for (std::size_t j = 0; j < m.cols; ++j) {
        for (std::size_t g = 0; g < q.groups_per_col(); ++g) {
            const std::size_t lo = g * group_size;
            const std::size_t hi = std::min(lo + group_size, m.rows);
            double mn = static_cast<double>(m(lo, j));
            double mx = mn;
            for (std::size_t i = lo + 1; i < hi; ++i) {
                const double v = static_cast<double>(m(i, j));
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
            const double scale = (mx - mn) / 15.0; // 0 for a constant group
            q.mins[j * q.groups_per_col() + g] = static_cast<T>(mn);
            q.scales[j * q.groups_per_col() + g] = static_cast<T>(scale);
            for (std::size_t i = lo; i < hi; ++i) {
                std::uint8_t code = 0;
                if (scale > 0.0) {
                    const double v = static_cast<double>(m(i, j));
                    const long c = std::lround((v - mn) / scale);
                    code = static_cast<std::uint8_t>(std::clamp(c, 0l, 15l));
                }
                std::uint8_t& byte = q.codes[j * bpc + i / 2];
                if (i % 2 == 0)
                    byte = static_cast<std::uint8_t>((byte & 0xF0) | code);
                else
                    byte = static_cast<std::uint8_t>((byte & 0x0F) | (code << 4));
            }
        }
    }
    return q;
}

template <typename T>
Matrix<T> dequantize(const QuantizedMatrix<T>& q) {
    Matrix<T> out(q.rows, q.cols);
    for (std::size_t j = 0; j < q.cols; ++j)
        for (std::size_t i = 0; i < q.rows; ++i)
            out(i, j) = q.value_at(i, j);
    return out;
}

template QuantizedMatrix<float> quantize_4bit<float>(const Matrix<float>&, std::size_t);
template QuantizedMatrix<double> quantize_4bit<double>(const Matrix<double>&, std::size_t);
template Matrix<float> dequantize<float>(const QuantizedMatrix<float>&);
template Matrix<double> dequantize<double>(const QuantizedMatrix<double>&);

} // namespace kvpack
