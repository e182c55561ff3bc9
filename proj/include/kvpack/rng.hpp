// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace kvpack {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11 constants).
// Counter-based so that independent streams can be split deterministically:
// the 64-bit key is (seed, stream) and the 128-bit counter just increments.
// Identical (seed, stream) sequences on every platform.
class Philox4x32 {
public:
    explicit Philox4x32(std::uint64_t seed, std::uint64_t stream = 0)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          counter_{0, 0,
                   static_cast<std::uint32_t>(stream),
                   static_cast<std::uint32_t>(stream >> 32)} {}

    std::uint32_t next_u32() {
        if (idx_ == 4) {
            block_ = round10(key_, counter_);
            advance_counter();
            idx_ = 0;
        }
        return block_[idx_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t lo = next_u32();
        const std::uint64_t hi = next_u32();
        return (hi << 32) | lo;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        const std::uint64_t a = next_u32() >> 5;  // 27 bits
        const std::uint64_t b = next_u32() >> 6;  // 26 bits
        return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) * (1.0 / 9007199254740992.0);
    }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

    // One full output block for a given counter/key — exposed so tests can
    // check the published Philox4x32-10 reference vectors.
    static std::array<std::uint32_t, 4> round10(std::array<std::uint32_t, 2> key,
                                                const std::array<std::uint32_t, 4>& ctr_in) {
        std::array<std::uint32_t, 4> ctr = ctr_in;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
            const std::uint64_t p2 = static_cast<std::uint64_t>(kMul1) * ctr[2];
            const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
            const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const std::uint32_t lo2 = static_cast<std::uint32_t>(p2);
            const std::uint32_t hi2 = static_cast<std::uint32_t>(p2 >> 32);
            ctr = {hi2 ^ ctr[1] ^ key[0], lo2, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    void advance_counter() {
        for (int i = 0; i < 4; ++i) {
            if (++counter_[i] != 0) break; // carry into the next word on wrap
        }
    }

    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> counter_;
    std::array<std::uint32_t, 4> block_{};
    int idx_ = 4;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace kvpack
