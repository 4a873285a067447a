#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace oar {

/**
 * Philox4x32-10 counter-based random generator.
 *
 * Counter-based generation keeps streams reproducible across platforms and
 * lets independent jobs derive non-overlapping streams from (seed, stream)
 * pairs without shared state. All distribution transforms below are fixed
 * (no rejection sampling), so the number of raw draws consumed per variate
 * never depends on parameter values.
 */
class Philox {
public:
    explicit Philox(std::uint64_t seed, std::uint64_t stream = 0)
        : key0_(static_cast<std::uint32_t>(seed)),
          key1_(static_cast<std::uint32_t>(seed >> 32)) {
        ctr_[0] = 0;
        ctr_[1] = 0;
        ctr_[2] = static_cast<std::uint32_t>(stream);
        ctr_[3] = static_cast<std::uint32_t>(stream >> 32);
        buf_pos_ = 4;
    }

    std::uint32_t next_u32() {
        if (buf_pos_ == 4) {
            fill_block();
            advance_counter();
            buf_pos_ = 0;
        }
        return buf_[buf_pos_++];
    }

    std::uint64_t next_u64() {
        std::uint64_t hi = next_u32();
        std::uint64_t lo = next_u32();
        return (hi << 32) | lo;
    }

    /** Uniform draw strictly inside (0, 1). */
    double uniform() {
        std::uint64_t bits = next_u64() >> 11;
        return (static_cast<double>(bits) + 0.5) * (1.0 / 9007199254740992.0);
    }

    /** Standard normal via Box-Muller (cosine branch only; 2 uniforms per draw). */
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /** Bernoulli(p) as {0,1}; consumes exactly one uniform. */
    int bernoulli(double p) { return uniform() < p ? 1 : 0; }

    /** Uniform integer in [0, n); consumes exactly one uniform. */
    std::uint64_t uniform_index(std::uint64_t n) {
        double u = uniform();
        auto idx = static_cast<std::uint64_t>(u * static_cast<double>(n));
        return idx >= n ? n - 1 : idx;
    }

    /** One 10-round Philox4x32 block: 128-bit counter + 64-bit key -> 4 words. */
    static std::array<std::uint32_t, 4> block(const std::array<std::uint32_t, 4>& ctr,
                                              const std::array<std::uint32_t, 2>& key) {
        std::uint32_t c0 = ctr[0], c1 = ctr[1], c2 = ctr[2], c3 = ctr[3];
        std::uint32_t k0 = key[0], k1 = key[1];
        for (int round = 0; round < 10; ++round) {
            std::uint32_t hi0, lo0, hi1, lo1;
            mulhilo(0xD2511F53u, c0, hi0, lo0);
            mulhilo(0xCD9E8D57u, c2, hi1, lo1);
            std::uint32_t n0 = hi1 ^ c1 ^ k0;
            std::uint32_t n1 = lo1;
            std::uint32_t n2 = hi0 ^ c3 ^ k1;
            std::uint32_t n3 = lo0;
            c0 = n0; c1 = n1; c2 = n2; c3 = n3;
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        return {c0, c1, c2, c3};
    }

private:
    static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
        std::uint64_t prod = static_cast<std::uint64_t>(a) * b;
        hi = static_cast<std::uint32_t>(prod >> 32);
        lo = static_cast<std::uint32_t>(prod);
    }

    void fill_block() {
        auto out = block({ctr_[0], ctr_[1], ctr_[2], ctr_[3]}, {key0_, key1_});
        buf_[0] = out[0]; buf_[1] = out[1]; buf_[2] = out[2]; buf_[3] = out[3];
    }

    void advance_counter() {
        if (++ctr_[0] == 0 && ++ctr_[1] == 0 && ++ctr_[2] == 0) ++ctr_[3];
    }

    std::uint32_t key0_, key1_;
    std::uint32_t ctr_[4];
    std::uint32_t buf_[4];
    int buf_pos_;
};

} // namespace oar
