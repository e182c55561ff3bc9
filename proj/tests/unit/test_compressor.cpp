// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "kvpack/compressor.hpp"
#include "support/helpers.hpp"

using namespace kvpack;
namespace kt = kvpack::testing;

TEST_CASE("fixed rank scheme ignores the layer") {
    RankScheme s;
    s.kind = RankScheme::Kind::fixed;
    s.fixed_rank = 48;
    CHECK(layer_rank(s, 0) == 48);
    CHECK(layer_rank(s, 31) == 48);
}

TEST_CASE("linear schedule interpolates between the endpoints") {
    RankScheme s;
    s.kind = RankScheme::Kind::linear_schedule;
    s.schedule = {16, 128, 32};
    CHECK(layer_rank(s, 0) == 16);
    CHECK(layer_rank(s, 31) == 128);
    CHECK(layer_rank(s, 16) == 74); // 16 + 112*16/31, rounded half up
    CHECK_THROWS_AS(layer_rank(s, 32), parameter_error);
}

TEST_CASE("variance target picks the smallest sufficient rank") {
    // Exact spectrum {8,4,2,1}: 0.95 needs three components.
    Matrix<double> m(6, 5);
    const double w[4] = {8.0, 4.0, 2.0, 1.0};
    for (int i = 0; i < 4; ++i) m(i, i) = w[i];

    RankScheme s;
    s.kind = RankScheme::Kind::variance_target;
    s.variance = {0.95, 256};
    CHECK(layer_rank(s, 0, &m) == 3);

    s.variance = {0.999, 2}; // cap wins
    CHECK(layer_rank(s, 0, &m) == 2);

    CHECK_THROWS_AS(layer_rank(s, 0), parameter_error); // needs the matrix
}

TEST_CASE("segment compression clamps oversized ranks") {
    const Matrix<double> m = kt::gaussian(10, 8, 3);
    const CompressOutcome<double> out = compress_segment(m, 100);
    CHECK(out.requested_rank == 100);
    CHECK(out.effective_rank == 8);
    CHECK(out.clamped);
    CHECK(out.factors.rank() == 8);

    const CompressOutcome<double> ok = compress_segment(m, 4);
    CHECK(!ok.clamped);
    CHECK(ok.effective_rank == 4);
}
