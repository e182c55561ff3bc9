// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/cache.hpp"

#include <algorithm>

namespace kvpack {

const char* to_string(Modality m) { return m == Modality::visual ? "visual" : "textual"; }
const char* to_string(MatrixKind k) { return k == MatrixKind::key ? "key" : "value"; }

void HeadGeometry::validate() const {
    if (num_query_heads == 0 || num_kv_heads == 0 || head_dim == 0)
        throw parameter_error("HeadGeometry: head counts and head_dim must be positive");
    if (num_query_heads % num_kv_heads != 0)
        throw parameter_error("HeadGeometry: num_kv_heads must divide num_query_heads");
}

template <typename T>
std::size_t store_token_count(const BlockStore<T>& s) {
    return std::visit(
        [](const auto& v) -> std::size_t {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, LowRankStore<T>>) return v.factors.token_count();
            else if constexpr (std::is_same_v<V, QuantizedLowRankStore<T>>) return v.left.rows;
            else if constexpr (std::is_same_v<V, DenseStore<T>>) return v.rows.rows;
            else return v.rows.rows;
        },
        s);
}

template <typename T>
std::size_t store_rank(const BlockStore<T>& s) {
    return std::visit(
        [](const auto& v) -> std::size_t {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, LowRankStore<T>>) return v.factors.rank();
            else if constexpr (std::is_same_v<V, QuantizedLowRankStore<T>>) return v.left.cols;
            else return 0;
        },
        s);
}

template <typename T>
std::size_t store_width(const BlockStore<T>& s) {
    return std::visit(
        [](const auto& v) -> std::size_t {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, LowRankStore<T>>) return v.factors.width();
            else if constexpr (std::is_same_v<V, QuantizedLowRankStore<T>>) return v.right.cols;
            else if constexpr (std::is_same_v<V, DenseStore<T>>) return v.rows.cols;
            else return v.rows.cols;
        },
        s);
}

template <typename T>
bool store_is_quantized(const BlockStore<T>& s) {
    return std::holds_alternative<QuantizedLowRankStore<T>>(s) ||
           std::holds_alternative<QuantizedDenseStore<T>>(s);
}

template <typename T>
void store_decompress_row(const BlockStore<T>& s, std::size_t row, std::size_t use_rank, T* out) {
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, LowRankStore<T>>) {
                const std::size_t full = v.factors.rank();
                const std::size_t r_use = use_rank == 0 ? full : std::min(use_rank, full);
                const std::size_t w = v.factors.width();
                const Matrix<T>& left = v.factors.left;
                const Matrix<T>& right = v.factors.right;
                for (std::size_t j = 0; j < w; ++j) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < r_use; ++r)
                        acc += static_cast<double>(left(row, r)) *
                               static_cast<double>(right(r, j));
                    out[j] = static_cast<T>(acc);
                }
            } else if constexpr (std::is_same_v<V, QuantizedLowRankStore<T>>) {
                const std::size_t full = v.left.cols;
                const std::size_t r_use = use_rank == 0 ? full : std::min(use_rank, full);
                const std::size_t w = v.right.cols;
                for (std::size_t j = 0; j < w; ++j) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < r_use; ++r)
                        acc += static_cast<double>(v.left.value_at(row, r)) *
                               static_cast<double>(v.right(r, j));
                    out[j] = static_cast<T>(acc);
                }
            } else if constexpr (std::is_same_v<V, DenseStore<T>>) {
                const T* src = v.rows.row(row);
                std::copy(src, src + v.rows.cols, out);
            } else {
                for (std::size_t j = 0; j < v.rows.cols; ++j)
                    out[j] = v.rows.value_at(row, j);
            }
        },
        s);
}

template <typename T>
Matrix<T> store_reconstruct(const BlockStore<T>& s) {
    Matrix<T> out(store_token_count(s), store_width(s));
    for (std::size_t i = 0; i < out.rows; ++i)
        store_decompress_row(s, i, 0, out.row(i));
    return out;
}

template <typename T>
void store_remove_rows(BlockStore<T>& s, const std::vector<std::uint32_t>& victims) {
    if (victims.empty()) return;
    if (store_is_quantized(s))
        throw parameter_error(
            "store_remove_rows: cannot evict from a quantized block; evict before quantizing");
    std::vector<std::uint8_t> drop(store_token_count(s), 0);
    for (std::uint32_t i : victims) {
        if (i >= drop.size()) throw parameter_error("store_remove_rows: row index out of range");
        drop[i] = 1;
    }
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < drop.size(); ++i)
        if (!drop[i]) keep.push_back(i);

    if (auto* lr = std::get_if<LowRankStore<T>>(&s)) {
        lr->factors.left = lr->factors.left.take_rows(keep);
    } else if (auto* d = std::get_if<DenseStore<T>>(&s)) {
        d->rows = d->rows.take_rows(keep);
    }
}

template <typename T>
std::vector<std::uint64_t> segment_compressed_positions(const ModalitySegment<T>& seg) {
    std::vector<std::uint64_t> out;
    out.reserve(seg.compressed_len());
    for (const auto& b : seg.blocks)
        out.insert(out.end(), b.positions.begin(), b.positions.end());
    return out;
}

template <typename T>
std::vector<std::uint64_t> ModalitySegment<T>::compressed_positions() const {
    return segment_compressed_positions(*this);
}

template <typename T>
void append_tokens(LayerCache<T>& cache, Modality modality, const Matrix<T>& k_rows,
                   const Matrix<T>& v_rows) {
    const std::size_t w = cache.geometry.cache_width();
    if (k_rows.rows != v_rows.rows)
        throw shape_error("append_tokens: K and V row counts disagree");
    if (k_rows.cols != w || v_rows.cols != w)
        throw shape_error("append_tokens: rows must be cache_width wide");
    if (!k_rows.all_finite() || !v_rows.all_finite())
        throw data_error("append_tokens: non-finite K/V rows");

    ModalitySegment<T>& seg = cache.segment(modality);
    if (seg.tail_k.rows == 0) {
        seg.tail_k = Matrix<T>(0, w);
        seg.tail_v = Matrix<T>(0, w);
    }
    seg.tail_k.append_rows(k_rows);
    seg.tail_v.append_rows(v_rows);
    for (std::size_t i = 0; i < k_rows.rows; ++i) {
        seg.tail_positions.push_back(cache.next_position);
        cache.importance.append_token(cache.next_position);
        ++cache.next_position;
    }
}

namespace {

template <typename T>
void account_store(const BlockStore<T>& s, SegmentBytes& out) {
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, LowRankStore<T>>) {
                out.scalar_count += v.factors.left.data.size() + v.factors.right.data.size();
            } else if constexpr (std::is_same_v<V, QuantizedLowRankStore<T>>) {
                out.packed_code_bytes += v.left.codes.size();
                out.scalar_count += v.left.scales.size() + v.left.mins.size();
                out.scalar_count += v.right.data.size();
            } else if constexpr (std::is_same_v<V, DenseStore<T>>) {
                out.scalar_count += v.rows.data.size();
            } else {
                out.packed_code_bytes += v.rows.codes.size();
                out.scalar_count += v.rows.scales.size() + v.rows.mins.size();
            }
        },
        s);
}

template <typename T>
SegmentBytes account_segment(const ModalitySegment<T>& seg, std::size_t bytes_per_scalar) {
    SegmentBytes out;
    for (const auto& b : seg.blocks) {
        account_store(b.keys, out);
        account_store(b.values, out);
    }
    out.scalar_count += seg.tail_k.data.size() + seg.tail_v.data.size();
    out.bytes = out.scalar_count * bytes_per_scalar + out.packed_code_bytes;
    return out;
}

} // namespace

template <typename T>
CacheBytes memory_bytes(const LayerCache<T>& cache, std::size_t bytes_per_scalar) {
    if (bytes_per_scalar == 0)
        throw parameter_error("memory_bytes: bytes_per_scalar must be positive");
    CacheBytes out;
    out.visual = account_segment(cache.visual, bytes_per_scalar);
    out.textual = account_segment(cache.textual, bytes_per_scalar);
    out.cache_bytes = out.visual.bytes + out.textual.bytes;
    out.importance_bytes = cache.importance.size() * (sizeof(std::uint64_t) + sizeof(double));
    return out;
}

double compression_ratio(std::size_t token_count, std::size_t width, std::size_t rank) {
    if (token_count == 0 || width == 0)
        throw parameter_error("compression_ratio: token count and width must be positive");
    const double dense = static_cast<double>(token_count) * static_cast<double>(width);
    if (rank == 0) return 1.0; // uncompressed storage
    const double stored = static_cast<double>(token_count) * static_cast<double>(rank) +
                          static_cast<double>(rank) * static_cast<double>(width);
    return dense / stored;
}

#define KVPACK_INSTANTIATE_CACHE(T)                                                          \
    template std::size_t store_token_count<T>(const BlockStore<T>&);                         \
    template std::size_t store_rank<T>(const BlockStore<T>&);                                \
    template std::size_t store_width<T>(const BlockStore<T>&);                               \
    template bool store_is_quantized<T>(const BlockStore<T>&);                               \
    template void store_decompress_row<T>(const BlockStore<T>&, std::size_t, std::size_t, T*); \
    template Matrix<T> store_reconstruct<T>(const BlockStore<T>&);                           \
    template void store_remove_rows<T>(BlockStore<T>&, const std::vector<std::uint32_t>&);   \
    template struct ModalitySegment<T>;                                                      \
    template void append_tokens<T>(LayerCache<T>&, Modality, const Matrix<T>&, const Matrix<T>&); \
    template CacheBytes memory_bytes<T>(const LayerCache<T>&, std::size_t);

KVPACK_INSTANTIATE_CACHE(float)
KVPACK_INSTANTIATE_CACHE(double)

#undef KVPACK_INSTANTIATE_CACHE

} // namespace kvpack
