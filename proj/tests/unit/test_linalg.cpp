// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "kvpack/linalg.hpp"
#include "support/helpers.hpp"
#include "support/spectrum_oracle.hpp"

using namespace kvpack;
namespace kt = kvpack::testing;

namespace {

double reconstruction_error(const Matrix<double>& m, const FactorPair<double>& f,
                            std::size_t use_rank = 0) {
    return frobenius_distance(m, use_rank == 0 ? f.reconstruct() : f.reconstruct(use_rank));
}

// Exactly-known spectrum: disjoint coordinate outer products weighted
// {8, 4, 2, 1}, so the singular values are {8, 4, 2, 1} by construction.
Matrix<double> staircase_matrix() {
    Matrix<double> m(6, 5);
    const double w[4] = {8.0, 4.0, 2.0, 1.0};
    for (int i = 0; i < 4; ++i) m(i, i) = w[i];
    return m;
}

} // namespace

TEST_CASE("exact svd meets the optimal-error bound") {
    const Matrix<double> m = kt::gaussian(40, 24, 11);
    const auto spectrum = kt::gram_spectrum(m);
    for (std::size_t r : {1u, 4u, 12u, 24u}) {
        const FactorPair<double> f = truncated_svd(m, r);
        const double err = reconstruction_error(m, f);
        const double bound = kt::best_rank_error(spectrum, r);
        // Optimality: no rank-r factorization beats the bound, and the SVD
        // attains it to rounding.
        CHECK(err >= bound - 1e-8);
        CHECK(err <= bound + 1e-8);
    }
}

TEST_CASE("planted low rank is captured exactly") {
    const Matrix<double> m = kt::planted_rank(60, 32, 5, 21);
    const FactorPair<double> f = truncated_svd(m, 5);
    CHECK(reconstruction_error(m, f) < 1e-9 * frobenius_norm(m));
}

TEST_CASE("factor layout: scale in the left factor, orthonormal right rows") {
    const Matrix<double> m = kt::gaussian(30, 20, 5);
    const FactorPair<double> f = truncated_svd(m, 8);
    REQUIRE(f.left.rows == 30);
    REQUIRE(f.left.cols == 8);
    REQUIRE(f.right.rows == 8);
    REQUIRE(f.right.cols == 20);
    for (std::size_t i = 0; i < f.right.rows; ++i)
        for (std::size_t j = 0; j < f.right.rows; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < f.right.cols; ++k) dot += f.right(i, k) * f.right(j, k);
            CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10));
        }
}

TEST_CASE("rank-prefix truncation equals re-factorization") {
    // The tiered decompressor reads rank prefixes; this only works if using
    // the first r' components of a rank-r factorization equals refactoring
    // at r'.
    const Matrix<double> m = kt::gaussian(48, 32, 17);
    const FactorPair<double> full = truncated_svd(m, 16);
    for (std::size_t r : {1u, 3u, 8u}) {
        const FactorPair<double> direct = truncated_svd(m, r);
        const double via_prefix = reconstruction_error(m, full, r);
        const double via_direct = reconstruction_error(m, direct);
        CHECK(via_prefix == doctest::Approx(via_direct).epsilon(1e-9));
    }
}

TEST_CASE("singular values of a constructed spectrum") {
    const Matrix<double> m = staircase_matrix();
    const auto sv = singular_values(m);
    REQUIRE(sv.size() == 5);
    CHECK(sv[0] == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(sv[1] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(sv[2] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(sv[3] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sv[4] <= 1e-12);
}

TEST_CASE("explained variance on the constructed spectrum") {
    const Matrix<double> m = staircase_matrix();
    // (64+16)/85 and (64+16+4)/85 exactly.
    CHECK(explained_variance_ratio(m, 2) == doctest::Approx(0.9411764705882353).epsilon(1e-14));
    CHECK(explained_variance_ratio(m, 3) == doctest::Approx(0.9882352941176471).epsilon(1e-14));

    const VarianceRank vr = rank_for_variance(m, 0.95, 5);
    CHECK(vr.rank == 3);
    CHECK(vr.achieved == doctest::Approx(0.9882352941176471).epsilon(1e-12));
}

TEST_CASE("explained variance agrees with the spectrum oracle") {
    const Matrix<double> m = kt::gaussian(36, 28, 31);
    const auto spectrum = kt::gram_spectrum(m);
    for (std::size_t r : {1u, 5u, 20u})
        CHECK(explained_variance_ratio(m, r) ==
              doctest::Approx(kt::explained_variance(spectrum, r)).epsilon(1e-10));
}

TEST_CASE("zero matrix conventions") {
    const Matrix<double> z(10, 6);
    CHECK(explained_variance_ratio(z, 1) == 1.0);
    const FactorPair<double> f = truncated_svd(z, 3);
    CHECK(frobenius_norm(f.reconstruct()) == 0.0);
}

TEST_CASE("randomized svd tracks the exact factorization") {
    const Matrix<double> m = kt::planted_rank(80, 48, 12, 41, 0.6);
    SvdOptions randomized;
    randomized.method = SvdMethod::randomized;
    randomized.seed = 7;

    SUBCASE("near-exact on a true low-rank matrix") {
        const FactorPair<double> f = truncated_svd(m, 12, randomized);
        CHECK(reconstruction_error(m, f) < 1e-8 * frobenius_norm(m));
    }
    SUBCASE("within 1.5x of optimal on a decaying spectrum") {
        const Matrix<double> noisy = [&] {
            Matrix<double> out = m;
            const Matrix<double> n = kt::gaussian(80, 48, 42);
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += 0.01 * n.data[i];
            return out;
        }();
        const auto spectrum = kt::gram_spectrum(noisy);
        const FactorPair<double> f = truncated_svd(noisy, 8, randomized);
        CHECK(reconstruction_error(noisy, f) <= 1.5 * kt::best_rank_error(spectrum, 8));
    }
    SUBCASE("deterministic per seed") {
        const FactorPair<double> a = truncated_svd(m, 6, randomized);
        const FactorPair<double> b = truncated_svd(m, 6, randomized);
        CHECK(max_abs_difference(a.left, b.left) == 0.0);
        CHECK(max_abs_difference(a.right, b.right) == 0.0);
    }
}

TEST_CASE("matmul small case") {
    Matrix<double> a(2, 2);
    a(0, 0) = 1;
    a(0, 1) = 2;
    a(1, 0) = 3;
    a(1, 1) = 4;
    Matrix<double> b(2, 1);
    b(0, 0) = 5;
    b(1, 0) = 6;
    const Matrix<double> c = matmul(a, b);
    CHECK(c(0, 0) == 17.0);
    CHECK(c(1, 0) == 39.0);
}

TEST_CASE("svd input validation") {
    const Matrix<double> m = kt::gaussian(8, 6, 1);
    CHECK_THROWS_AS(truncated_svd(m, 0), parameter_error);
    CHECK_THROWS_AS(truncated_svd(m, 7), parameter_error);
    CHECK_THROWS_AS(truncated_svd(Matrix<double>(), 1), shape_error);
    Matrix<double> bad = m;
    bad(2, 2) = std::nan("");
    CHECK_THROWS_AS(truncated_svd(bad, 2), data_error);
}

TEST_CASE("float instantiation round-trips through the same path") {
    const Matrix<float> m = kt::cast_to<float>(kt::planted_rank(24, 16, 4, 77));
    const FactorPair<float> f = truncated_svd(m, 4);
    const Matrix<float> recon = f.reconstruct();
    CHECK(frobenius_distance(m, recon) < 1e-4 * frobenius_norm(m));
}
