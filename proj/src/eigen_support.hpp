// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include "kvpack/matrix.hpp"

namespace kvpack::detail {

template <typename T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const EigenRowMajor<T>> as_eigen(const Matrix<T>& m) {
    return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

template <typename T>
Eigen::Map<EigenRowMajor<T>> as_eigen(Matrix<T>& m) {
    return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

template <typename T>
Matrix<T> from_eigen(const EigenRowMajor<T>& e) {
    Matrix<T> out(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    Eigen::Map<EigenRowMajor<T>>(out.data.data(), e.rows(), e.cols()) = e;
    return out;
}

} // namespace kvpack::detail
