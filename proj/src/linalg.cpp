// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "eigen_support.hpp"
#include "kvpack/rng.hpp"

namespace kvpack {

namespace {

template <typename T>
void check_svd_input(const Matrix<T>& m, std::size_t rank) {
    if (m.rows == 0 || m.cols == 0)
        throw shape_error("truncated_svd: matrix must be non-empty");
    const std::size_t max_rank = std::min(m.rows, m.cols);
    if (rank < 1 || rank > max_rank)
        throw parameter_error("truncated_svd: rank must be in [1, min(rows, cols)]");
    if (!m.all_finite())
        throw data_error("truncated_svd: matrix contains non-finite values");
}

// Split an Eigen thin SVD into (U * S, V^T) truncated to `rank`, putting the
// scale into the left factor. Zero singular values keep the corresponding
// right-factor rows from V, which Eigen returns orthonormal, so rank-prefix
// truncation stays valid even for rank-deficient input.
template <typename T, typename SvdT>
FactorPair<T> split_factors(const SvdT& svd, std::size_t rank) {
    using Mat = detail::EigenRowMajor<T>;
    const auto& u = svd.matrixU();
    const auto& v = svd.matrixV();
    const auto& s = svd.singularValues();

    Mat left = u.leftCols(rank);
    for (std::size_t r = 0; r < rank; ++r)
        left.col(r) *= s(static_cast<Eigen::Index>(r));
    Mat right = v.leftCols(rank).transpose();

    FactorPair<T> out;
    out.left = detail::from_eigen<T>(left);
    out.right = detail::from_eigen<T>(right);
    return out;
}

template <typename T>
FactorPair<T> exact_svd(const Matrix<T>& m, std::size_t rank) {
    using Mat = detail::EigenRowMajor<T>;
    Mat a = detail::as_eigen(m);
    if (a.isZero(T(0))) {
        // Degenerate but legal input: zero left factor against an
        // orthonormal right factor (coordinate rows).
        FactorPair<T> out;
        out.left = Matrix<T>(m.rows, rank);
        out.right = Matrix<T>(rank, m.cols);
        for (std::size_t r = 0; r < rank; ++r) out.right(r, r) = T(1);
        return out;
    }
    Eigen::BDCSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return split_factors<T>(svd, rank);
}

// Halko-Martinsson-Tropp randomized range finder: sketch Y = A Omega with
// `oversampling` extra columns, re-orthonormalized power iterations, then an
// exact SVD of the small projected matrix Q^T A.
template <typename T>
FactorPair<T> randomized_svd(const Matrix<T>& m, std::size_t rank, const SvdOptions& opts) {
    using Mat = detail::EigenRowMajor<T>;
    const std::size_t max_rank = std::min(m.rows, m.cols);
    const std::size_t sketch = std::min(rank + opts.oversampling, max_rank);

    Mat a = detail::as_eigen(m);
    if (a.isZero(T(0))) return exact_svd(m, rank);

    Matrix<T> omega_own = gaussian_matrix<T>(m.cols, sketch, opts.seed, /*stream=*/0x72737664);
    Mat omega = detail::as_eigen(omega_own);

    auto thin_q = [](const Mat& y) {
        Eigen::HouseholderQR<Mat> qr(y);
        Mat q = qr.householderQ() * Mat::Identity(y.rows(), std::min(y.rows(), y.cols()));
        return q;
    };

    Mat q = thin_q(a * omega);
    for (std::size_t it = 0; it < opts.power_iterations; ++it) {
        q = thin_q(a.transpose() * q);
        q = thin_q(a * q);
    }

    Mat b = q.transpose() * a; // sketch x cols
    Eigen::BDCSVD<Mat> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);

    Mat left = (q * svd.matrixU()).leftCols(rank);
    const auto& s = svd.singularValues();
    for (std::size_t r = 0; r < rank; ++r)
        left.col(r) *= s(static_cast<Eigen::Index>(r));
    Mat right = svd.matrixV().leftCols(rank).transpose();

    FactorPair<T> out;
    out.left = detail::from_eigen<T>(left);
    out.right = detail::from_eigen<T>(right);
    return out;
}

} // namespace

template <typename T>
FactorPair<T> truncated_svd(const Matrix<T>& m, std::size_t rank, const SvdOptions& opts) {
    check_svd_input(m, rank);
    if (opts.method == SvdMethod::randomized) return randomized_svd(m, rank, opts);
    return exact_svd(m, rank);
}

template <typename T>
std::vector<double> singular_values(const Matrix<T>& m) {
    if (m.rows == 0 || m.cols == 0)
        throw shape_error("singular_values: matrix must be non-empty");
    using Mat = detail::EigenRowMajor<double>;
    Matrix<double> md = m.template cast<double>();
    Mat a = detail::as_eigen(md);
    Eigen::BDCSVD<Mat> svd(a);
    const auto& s = svd.singularValues();
    std::vector<double> out(static_cast<std::size_t>(s.size()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s(static_cast<Eigen::Index>(i));
    return out;
}

template <typename T>
double explained_variance_ratio(const Matrix<T>& m, std::size_t rank) {
    if (rank > std::min(m.rows, m.cols))
        throw parameter_error("explained_variance_ratio: rank exceeds min(rows, cols)");
    const std::vector<double> s = singular_values(m);
    double total = 0.0, head = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        total += s[i] * s[i];
        if (i < rank) head += s[i] * s[i];
    }
    if (total == 0.0) return 1.0; // zero matrix: any rank explains everything
    return head / total;
}

template <typename T>
VarianceRank rank_for_variance(const Matrix<T>& m, double target, std::size_t max_rank) {
    if (!(target > 0.0) || target > 1.0)
        throw parameter_error("rank_for_variance: target must be in (0, 1]");
    if (max_rank < 1) throw parameter_error("rank_for_variance: max_rank must be >= 1");
    const std::size_t hard_cap = std::min(max_rank, std::min(m.rows, m.cols));

    const std::vector<double> s = singular_values(m);
    double total = 0.0;
    for (double v : s) total += v * v;

    VarianceRank out;
    if (total == 0.0) return {1, 1.0};
    double head = 0.0;
    for (std::size_t r = 1; r <= hard_cap; ++r) {
        head += s[r - 1] * s[r - 1];
        out.rank = r;
        out.achieved = head / total;
        if (out.achieved >= target) return out;
    }
    return out; // target unreachable within max_rank: clamp, report achieved
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols != b.rows) throw shape_error("matmul: inner dimensions disagree");
    Matrix<T> out(a.rows, b.cols);
    detail::as_eigen(out) = detail::as_eigen(a) * detail::as_eigen(b);
    return out;
}

template <typename T>
Matrix<T> gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                          std::uint64_t stream) {
    Philox4x32 rng(seed, stream);
    Matrix<T> out(rows, cols);
    for (auto& v : out.data) v = static_cast<T>(rng.next_gaussian());
    return out;
}

#define KVPACK_INSTANTIATE_LINALG(T)                                                        \
    template FactorPair<T> truncated_svd<T>(const Matrix<T>&, std::size_t, const SvdOptions&); \
    template std::vector<double> singular_values<T>(const Matrix<T>&);                      \
    template double explained_variance_ratio<T>(const Matrix<T>&, std::size_t);             \
    template VarianceRank rank_for_variance<T>(const Matrix<T>&, double, std::size_t);      \
    template Matrix<T> matmul<T>(const Matrix<T>&, const Matrix<T>&);                       \
    template Matrix<T> gaussian_matrix<T>(std::size_t, std::size_t, std::uint64_t, std::uint64_t);

KVPACK_INSTANTIATE_LINALG(float)
KVPACK_INSTANTIATE_LINALG(double)

#undef KVPACK_INSTANTIATE_LINALG

} // namespace kvpack
