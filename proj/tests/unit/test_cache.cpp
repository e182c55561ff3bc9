// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "kvpack/cache.hpp"
#include "kvpack/linalg.hpp"
#include "support/helpers.hpp"

using namespace kvpack;
namespace kt = kvpack::testing;

namespace {

const HeadGeometry kGeom{4, 4, 8}; // width 32

LayerCache<double> cache_with_prefill(std::size_t visual, std::size_t textual,
                                      std::uint64_t seed = 1) {
    LayerCache<double> cache(kGeom, 0);
    if (visual > 0)
        append_tokens(cache, Modality::visual, kt::gaussian(visual, 32, seed),
                      kt::gaussian(visual, 32, seed + 1));
    if (textual > 0)
        append_tokens(cache, Modality::textual, kt::gaussian(textual, 32, seed + 2),
                      kt::gaussian(textual, 32, seed + 3));
    return cache;
}

} // namespace

TEST_CASE("geometry validation") {
    const HeadGeometry gqa{8, 2, 16};
    CHECK_NOTHROW(gqa.validate());
    const HeadGeometry ragged{8, 3, 16}; // 3 does not divide 8
    CHECK_THROWS_AS(ragged.validate(), parameter_error);
    const HeadGeometry zero{0, 0, 16};
    CHECK_THROWS_AS(zero.validate(), parameter_error);
    CHECK(gqa.queries_per_kv_head() == 4);
    CHECK(gqa.model_width() == 128);
    CHECK(gqa.cache_width() == 32);
}

TEST_CASE("append assigns global positions across modalities") {
    LayerCache<double> cache = cache_with_prefill(3, 2);
    CHECK(cache.next_position == 5);
    CHECK(cache.segment(Modality::visual).tail_positions ==
          std::vector<std::uint64_t>{0, 1, 2});
    CHECK(cache.segment(Modality::textual).tail_positions ==
          std::vector<std::uint64_t>{3, 4});
    CHECK(cache.importance.positions == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
    CHECK(cache.total_tokens() == 5);

    append_tokens(cache, Modality::textual, kt::gaussian(1, 32, 9), kt::gaussian(1, 32, 10));
    CHECK(cache.segment(Modality::textual).tail_positions ==
          std::vector<std::uint64_t>{3, 4, 5});
}

TEST_CASE("append validates shapes and values") {
    LayerCache<double> cache(kGeom, 0);
    CHECK_THROWS_AS(append_tokens(cache, Modality::textual, kt::gaussian(2, 16, 1),
                                  kt::gaussian(2, 32, 2)),
                    shape_error);
    CHECK_THROWS_AS(append_tokens(cache, Modality::textual, kt::gaussian(2, 32, 1),
                                  kt::gaussian(3, 32, 2)),
                    shape_error);
    Matrix<double> bad = kt::gaussian(2, 32, 3);
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(append_tokens(cache, Modality::textual, bad, kt::gaussian(2, 32, 4)),
                    data_error);
}

TEST_CASE("low-rank row decompression matches reconstruction") {
    const Matrix<double> m = kt::planted_rank(20, 32, 6, 5);
    const FactorPair<double> f = truncated_svd(m, 6);
    const BlockStore<double> store = LowRankStore<double>{f};

    std::vector<double> row(32);
    SUBCASE("full rank") {
        const Matrix<double> recon = store_reconstruct(store);
        for (std::size_t i = 0; i < 20; ++i) {
            store_decompress_row(store, i, 0, row.data());
            for (std::size_t j = 0; j < 32; ++j)
                CHECK(row[j] == doctest::Approx(recon(i, j)).epsilon(1e-12));
        }
    }
    SUBCASE("rank prefix") {
        const Matrix<double> recon = f.reconstruct(3);
        store_decompress_row(store, 4, 3, row.data());
        for (std::size_t j = 0; j < 32; ++j)
            CHECK(row[j] == doctest::Approx(recon(4, j)).epsilon(1e-12));
    }
}

TEST_CASE("store variants report their shape") {
    const Matrix<double> m = kt::gaussian(10, 32, 8);
    const FactorPair<double> f = truncated_svd(m, 4);

    const BlockStore<double> lr = LowRankStore<double>{f};
    CHECK(store_token_count(lr) == 10);
    CHECK(store_rank(lr) == 4);
    CHECK(store_width(lr) == 32);
    CHECK(!store_is_quantized(lr));

    const BlockStore<double> dense = DenseStore<double>{m};
    CHECK(store_token_count(dense) == 10);
    CHECK(store_rank(dense) == 0); // dense stores have no rank
    CHECK(store_width(dense) == 32);

    const BlockStore<double> qlr =
        QuantizedLowRankStore<double>{quantize_4bit(f.left, 64), f.right};
    CHECK(store_is_quantized(qlr));
    CHECK(store_rank(qlr) == 4);
    CHECK(store_token_count(qlr) == 10);
}

TEST_CASE("row removal rebuilds plain stores and refuses quantized ones") {
    const Matrix<double> m = kt::gaussian(6, 32, 12);
    const FactorPair<double> f = truncated_svd(m, 3);

    SUBCASE("low rank") {
        BlockStore<double> store = LowRankStore<double>{f};
        store_remove_rows(store, {1, 4});
        CHECK(store_token_count(store) == 4);
        const Matrix<double> before = f.reconstruct();
        const Matrix<double> after = store_reconstruct(store);
        const std::size_t kept[] = {0, 2, 3, 5};
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 32; ++j)
                CHECK(after(i, j) == doctest::Approx(before(kept[i], j)).epsilon(1e-12));
    }
    SUBCASE("dense") {
        BlockStore<double> store = DenseStore<double>{m};
        store_remove_rows(store, {0});
        CHECK(store_token_count(store) == 5);
    }
    SUBCASE("quantized refuses") {
        BlockStore<double> store =
            QuantizedLowRankStore<double>{quantize_4bit(f.left, 64), f.right};
        CHECK_THROWS_AS(store_remove_rows(store, {0}), parameter_error);
    }
}

TEST_CASE("memory accounting") {
    SUBCASE("dense tails only") {
        // 10 tokens x width 64, K and V, at 2 bytes per scalar: 2560 bytes.
        LayerCache<double> cache(HeadGeometry{8, 8, 8}, 0);
        append_tokens(cache, Modality::textual, kt::gaussian(10, 64, 1),
                      kt::gaussian(10, 64, 2));
        const CacheBytes bytes = memory_bytes(cache, 2);
        CHECK(bytes.cache_bytes == 2560);
        CHECK(bytes.importance_bytes == 160); // 10 * (8 + 8)
    }
    SUBCASE("factored block beats dense above the break-even point") {
        LayerCache<double> cache = cache_with_prefill(64, 0);
        const std::uint64_t dense_bytes = memory_bytes(cache, 2).cache_bytes;

        auto& seg = cache.segment(Modality::visual);
        const Matrix<double> k = seg.tail_k, v = seg.tail_v;
        CompressedBlock<double> block;
        block.positions = seg.tail_positions;
        block.keys = LowRankStore<double>{truncated_svd(k, 8)};
        block.values = LowRankStore<double>{truncated_svd(v, 8)};
        seg.blocks.push_back(std::move(block));
        seg.tail_k = Matrix<double>(0, 32);
        seg.tail_v = Matrix<double>(0, 32);
        seg.tail_positions.clear();

        const std::uint64_t packed_bytes = memory_bytes(cache, 2).cache_bytes;
        // 2 * (64*8 + 8*32) * 2 = 3072 vs dense 2 * 64*32*2 = 8192.
        CHECK(packed_bytes == 3072);
        CHECK(dense_bytes == 8192);
    }
    SUBCASE("quantized left factors count packed bytes") {
        const Matrix<double> m = kt::gaussian(16, 32, 4);
        const FactorPair<double> f = truncated_svd(m, 4);
        LayerCache<double> cache(kGeom, 0);
        auto& seg = cache.segment(Modality::visual);
        CompressedBlock<double> block;
        for (std::size_t i = 0; i < 16; ++i) block.positions.push_back(i);
        block.keys = QuantizedLowRankStore<double>{quantize_4bit(f.left, 64), f.right};
        block.values = LowRankStore<double>{f};
        seg.blocks.push_back(std::move(block));
        const CacheBytes bytes = memory_bytes(cache, 2);
        // keys: 4 cols * ceil(16/2) packed + (scale+min per col-group) 2*4
        // scalars + right 4*32; values: (16*4 + 4*32) scalars.
        const std::uint64_t keys = 4 * 8 + (4 + 4) * 2 + 4 * 32 * 2;
        const std::uint64_t values = (16 * 4 + 4 * 32) * 2;
        CHECK(bytes.cache_bytes == keys + values);
    }
}

TEST_CASE("compression ratio closed form") {
    CHECK(compression_ratio(1000, 5120, 64) == doctest::Approx(13.071895424836601).epsilon(1e-14));
    CHECK(compression_ratio(576, 4096, 64) == doctest::Approx(7.890410958904109).epsilon(1e-14));
    CHECK(compression_ratio(64, 128, 16) == doctest::Approx(2.6666666666666665).epsilon(1e-14));
    CHECK(compression_ratio(100, 64, 0) == 1.0); // dense: no savings
}

TEST_CASE("segment views") {
    LayerCache<double> cache = cache_with_prefill(4, 3);
    const auto& seg = cache.segment(Modality::visual);
    CHECK(seg.modality == Modality::visual);
    CHECK(seg.compressed_len() == 0);
    CHECK(seg.tail_len() == 4);
    CHECK(seg.token_count() == 4);
    CHECK(cache.segment(Modality::textual).token_count() == 3);
    CHECK(to_string(Modality::visual) == std::string("visual"));
    CHECK(to_string(MatrixKind::key) == std::string("key"));
}
