#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "cmm/common.hpp"

namespace cmm {

// Deterministic, implementation-independent RNG. libstdc++ distributions are
// not pinned across versions, so all sampling goes through this type: every
// artifact the pipeline writes must be reproducible bit-for-bit from the root
// seed alone.
//
// State advance is xoshiro256**, seeded via splitmix64.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the spare is cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Integer in [0, n).
    uint64_t below(uint64_t n) {
        // Lemire-style rejection-free enough for non-crypto use.
        return n == 0 ? 0 : next_u64() % n;
    }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Counter-based sub-seed derivation: independent streams for named pipeline
// stages and per-cell work items, all rooted in one seed.
inline uint64_t derive_seed(uint64_t root, std::string_view tag) {
    uint64_t h = fnv1a64(tag, fnv1a64(&root, sizeof(root)));
    return Rng::splitmix64(h);
}

inline uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index) {
    uint64_t h = derive_seed(root, tag);
    h ^= 0x632be59bd9b4e019ULL + index;
    return Rng::splitmix64(h);
}

}  // namespace cmm
