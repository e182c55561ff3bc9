// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#include "kvpack/snapshot.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "KVPK I/O assumes a little-endian host");

namespace kvpack {

std::uint16_t float_to_half(float value) {
    std::uint32_t bits;
    std::memcpy(&bits, &value, 4);
    const std::uint32_t sign = (bits >> 16) & 0x8000u;
    const std::uint32_t exp = (bits >> 23) & 0xFFu;
    std::uint32_t mant = bits & 0x7FFFFFu;

    if (exp == 0xFF) // inf / nan
        return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0));

    const int new_exp = static_cast<int>(exp) - 127 + 15;
    if (new_exp >= 0x1F) // overflow -> inf
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    if (new_exp <= 0) {
        if (new_exp < -10) return static_cast<std::uint16_t>(sign); // underflow -> 0
        // subnormal: shift in the implicit bit, round to nearest even
        mant |= 0x800000u;
        const int shift = 14 - new_exp;
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rest = mant & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rest > halfway || (rest == halfway && (half_mant & 1)))
            ++half_mant;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t half = sign | (static_cast<std::uint32_t>(new_exp) << 10) | (mant >> 13);
    const std::uint32_t rest = mant & 0x1FFFu;
    if (rest > 0x1000u || (rest == 0x1000u && (half & 1)))
        ++half; // mantissa carry may roll into the exponent; that is correct
    return static_cast<std::uint16_t>(half);
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else { // subnormal: normalize
            int e = -1;
            std::uint32_t m = mant;
            do {
                ++e;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            bits = sign | (static_cast<std::uint32_t>(112 - e) << 23) | ((m & 0x3FFu) << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 112) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

namespace {

constexpr char kMagic[4] = {'K', 'V', 'P', 'K'};

enum PayloadTag : std::uint8_t {
    kPlainFactors = 0,
    kQuantFactors = 1,
    kPlainDense = 2,
    kQuantDense = 3,
};

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw io_error("cannot open for writing: " + path);
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw io_error("write failed: " + path_);
    }
    template <typename V>
    void pod(V v) {
        bytes(&v, sizeof(V));
    }
    void close() {
        out_.close();
        if (!out_) throw io_error("close failed: " + path_);
    }

private:
    std::string path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw io_error("cannot open for reading: " + path);
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n))
            throw data_error("snapshot truncated: " + path_);
    }
    template <typename V>
    V pod() {
        V v;
        bytes(&v, sizeof(V));
        return v;
    }

private:
    std::string path_;
    std::ifstream in_;
};

template <typename T>
void write_scalars(Writer& w, const std::vector<T>& values, std::size_t width) {
    if (width == sizeof(T)) {
        w.bytes(values.data(), values.size() * sizeof(T));
        return;
    }
    for (const T& v : values) {
        if (width == 2) {
            const std::uint16_t h = float_to_half(static_cast<float>(v));
            w.pod(h);
        } else if (width == 4) {
            w.pod(static_cast<float>(v));
        } else {
            w.pod(static_cast<double>(v));
        }
    }
}

template <typename T>
void read_scalars(Reader& r, std::vector<T>& values, std::size_t count, std::size_t width) {
    values.resize(count);
    if (width == sizeof(T)) {
        r.bytes(values.data(), count * sizeof(T));
        return;
    }
    for (std::size_t i = 0; i < count; ++i) {
        if (width == 2)
            values[i] = static_cast<T>(half_to_float(r.pod<std::uint16_t>()));
        else if (width == 4)
            values[i] = static_cast<T>(r.pod<float>());
        else
            values[i] = static_cast<T>(r.pod<double>());
    }
}

template <typename T>
void write_matrix(Writer& w, const Matrix<T>& m, std::size_t width) {
    write_scalars(w, m.data, width);
}

template <typename T>
Matrix<T> read_matrix(Reader& r, std::size_t rows, std::size_t cols, std::size_t width) {
    Matrix<T> m(rows, cols);
    read_scalars(r, m.data, rows * cols, width);
    return m;
}

template <typename T>
void write_quant(Writer& w, const QuantizedMatrix<T>& q, std::size_t width) {
    w.pod(static_cast<std::uint32_t>(q.group_size));
    w.bytes(q.codes.data(), q.codes.size());
    write_scalars(w, q.scales, width);
    write_scalars(w, q.mins, width);
}

template <typename T>
QuantizedMatrix<T> read_quant(Reader& r, std::size_t rows, std::size_t cols, std::size_t width) {
    QuantizedMatrix<T> q;
    q.rows = rows;
    q.cols = cols;
    q.group_size = r.pod<std::uint32_t>();
    if (q.group_size == 0) throw data_error("snapshot: zero quantization group size");
    q.codes.resize(q.packed_bytes());
    r.bytes(q.codes.data(), q.codes.size());
    read_scalars(r, q.scales, cols * q.groups_per_col(), width);
    read_scalars(r, q.mins, cols * q.groups_per_col(), width);
    return q;
}

template <typename T>
void write_store(Writer& w, const BlockStore<T>& s, std::size_t width) {
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, LowRankStore<T>>) {
                w.pod(static_cast<std::uint8_t>(kPlainFactors));
                write_matrix(w, v.factors.left, width);
                write_matrix(w, v.factors.right, width);
            } else if constexpr (std::is_same_v<V, QuantizedLowRankStore<T>>) {
                w.pod(static_cast<std::uint8_t>(kQuantFactors));
                write_quant(w, v.left, width);
                write_matrix(w, v.right, width);
            } else if constexpr (std::is_same_v<V, DenseStore<T>>) {
                w.pod(static_cast<std::uint8_t>(kPlainDense));
                write_matrix(w, v.rows, width);
            } else {
                w.pod(static_cast<std::uint8_t>(kQuantDense));
                write_quant(w, v.rows, width);
            }
        },
        s);
}

template <typename T>
BlockStore<T> read_store(Reader& r, std::size_t tokens, std::size_t rank, std::size_t cache_w,
                         std::size_t width) {
    const auto tag = r.pod<std::uint8_t>();
    switch (tag) {
    case kPlainFactors: {
        LowRankStore<T> s;
        s.factors.left = read_matrix<T>(r, tokens, rank, width);
        s.factors.right = read_matrix<T>(r, rank, cache_w, width);
        return s;
    }
    case kQuantFactors: {
        QuantizedLowRankStore<T> s;
        s.left = read_quant<T>(r, tokens, rank, width);
        s.right = read_matrix<T>(r, rank, cache_w, width);
        return s;
    }
    case kPlainDense:
        return DenseStore<T>{read_matrix<T>(r, tokens, cache_w, width)};
    case kQuantDense:
        return QuantizedDenseStore<T>{read_quant<T>(r, tokens, cache_w, width)};
    default:
        throw data_error("snapshot: unknown payload tag " + std::to_string(tag));
    }
}

} // namespace

template <typename T>
void save_cache(const LayerCache<T>& cache, const std::string& path, std::size_t scalar_width) {
    if (scalar_width != 2 && scalar_width != 4 && scalar_width != 8)
        throw parameter_error("save_cache: scalar width must be 2, 4, or 8");
    for (const auto* seg : {&cache.visual, &cache.textual})
        if (seg->blocks.size() > 1)
            throw parameter_error(
                "save_cache: KVPK v1 stores one block per segment; consolidate the "
                "separate-epochs cache first");

    Writer w(path);
    w.bytes(kMagic, 4);
    w.pod(kSnapshotVersion);
    w.pod(static_cast<std::uint32_t>(cache.geometry.num_query_heads));
    w.pod(static_cast<std::uint32_t>(cache.geometry.num_kv_heads));
    w.pod(static_cast<std::uint32_t>(cache.geometry.head_dim));
    w.pod(static_cast<std::uint8_t>(scalar_width));
    w.pod(static_cast<std::uint32_t>(cache.layer_index));
    w.pod(static_cast<std::uint64_t>(cache.next_position));
    w.pod(static_cast<std::uint64_t>(cache.steps_taken));
    w.pod(static_cast<std::uint8_t>(2)); // segment records: visual, textual

    for (const auto* seg : {&cache.visual, &cache.textual}) {
        const std::size_t t_cc = seg->compressed_len();
        const std::uint32_t r_k =
            seg->blocks.empty() ? 0 : static_cast<std::uint32_t>(store_rank(seg->blocks[0].keys));
        const std::uint32_t r_v = seg->blocks.empty()
                                      ? 0
                                      : static_cast<std::uint32_t>(store_rank(seg->blocks[0].values));
        w.pod(static_cast<std::uint8_t>(seg->modality));
        w.pod(static_cast<std::uint64_t>(seg->tail_len()));
        w.pod(static_cast<std::uint64_t>(t_cc));
        w.pod(r_k);
        w.pod(r_v);

        const auto compressed = seg->compressed_positions();
        w.bytes(compressed.data(), compressed.size() * 8);
        w.bytes(seg->tail_positions.data(), seg->tail_positions.size() * 8);
        write_matrix(w, seg->tail_k, scalar_width);
        write_matrix(w, seg->tail_v, scalar_width);
        if (t_cc > 0) {
            write_store(w, seg->blocks[0].keys, scalar_width);
            write_store(w, seg->blocks[0].values, scalar_width);
        }
    }

    // Importance scores gate grouping/eviction decisions and stay f64
    // regardless of the payload width.
    w.pod(cache.importance.alpha);
    w.pod(static_cast<std::uint64_t>(cache.importance.size()));
    for (std::size_t i = 0; i < cache.importance.size(); ++i) {
        w.pod(static_cast<std::uint64_t>(cache.importance.positions[i]));
        w.pod(cache.importance.scores[i]);
    }
    w.close();
}

template <typename T>
LayerCache<T> load_cache(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw data_error("not a KVPK snapshot: " + path);
    const auto version = r.pod<std::uint32_t>();
    if (version != kSnapshotVersion)
        throw data_error("unsupported KVPK version " + std::to_string(version));

    HeadGeometry geom;
    geom.num_query_heads = r.pod<std::uint32_t>();
    geom.num_kv_heads = r.pod<std::uint32_t>();
    geom.head_dim = r.pod<std::uint32_t>();
    geom.validate();

    const auto width = static_cast<std::size_t>(r.pod<std::uint8_t>());
    if (width != 2 && width != 4 && width != 8)
        throw data_error("snapshot: bad scalar width " + std::to_string(width));

    LayerCache<T> cache(geom, r.pod<std::uint32_t>());
    cache.next_position = r.pod<std::uint64_t>();
    cache.steps_taken = r.pod<std::uint64_t>();

    const auto seg_count = r.pod<std::uint8_t>();
    if (seg_count != 2) throw data_error("snapshot: expected 2 segment records");

    const std::size_t cache_w = geom.cache_width();
    for (int s = 0; s < 2; ++s) {
        const auto modality = r.pod<std::uint8_t>();
        if (modality > 1) throw data_error("snapshot: bad modality tag");
        ModalitySegment<T>& seg = cache.segment(static_cast<Modality>(modality));

        const auto t_uc = static_cast<std::size_t>(r.pod<std::uint64_t>());
        const auto t_cc = static_cast<std::size_t>(r.pod<std::uint64_t>());
        const auto r_k = static_cast<std::size_t>(r.pod<std::uint32_t>());
        const auto r_v = static_cast<std::size_t>(r.pod<std::uint32_t>());

        std::vector<std::uint64_t> compressed(t_cc);
        r.bytes(compressed.data(), t_cc * 8);
        seg.tail_positions.resize(t_uc);
        r.bytes(seg.tail_positions.data(), t_uc * 8);
        seg.tail_k = read_matrix<T>(r, t_uc, cache_w, width);
        seg.tail_v = read_matrix<T>(r, t_uc, cache_w, width);
        if (t_cc > 0) {
            CompressedBlock<T> block;
            block.positions = std::move(compressed);
            block.keys = read_store<T>(r, t_cc, r_k, cache_w, width);
            block.values = read_store<T>(r, t_cc, r_v, cache_w, width);
            seg.blocks.push_back(std::move(block));
        }
    }

    cache.importance.alpha = r.pod<double>();
    const auto count = static_cast<std::size_t>(r.pod<std::uint64_t>());
    cache.importance.positions.resize(count);
    cache.importance.scores.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        cache.importance.positions[i] = r.pod<std::uint64_t>();
        cache.importance.scores[i] = r.pod<double>();
    }
    return cache;
}

std::size_t snapshot_scalar_width(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw data_error("not a KVPK snapshot: " + path);
    (void)r.pod<std::uint32_t>(); // version
    (void)r.pod<std::uint32_t>(); // H
    (void)r.pod<std::uint32_t>(); // H_kv
    (void)r.pod<std::uint32_t>(); // D
    return r.pod<std::uint8_t>();
}

template void save_cache<float>(const LayerCache<float>&, const std::string&, std::size_t);
template void save_cache<double>(const LayerCache<double>&, const std::string&, std::size_t);
template LayerCache<float> load_cache<float>(const std::string&);
template LayerCache<double> load_cache<double>(const std::string&);

} // namespace kvpack
