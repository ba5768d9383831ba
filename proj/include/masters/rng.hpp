#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace masters {

// Deterministic, platform-independent RNG. std::mt19937 plus the standard
// distributions would be reproducible per libstdc++ version only; the
// pipeline promises bit-exact reruns, so the generator and the double /
// gaussian constructions are pinned here.

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes an arbitrary tag sequence into a seed, so every consumer of
// randomness draws from its own independent stream.
inline uint64_t mix_tag(uint64_t seed, std::string_view tag) {
    uint64_t h = seed ^ 0x51'7c'c1'b7'27'22'0a'95ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
        h ^= h >> 29;
    }
    uint64_t s = h;
    return splitmix64(s);
}

inline uint64_t mix_tag(uint64_t seed, uint64_t tag) {
    uint64_t s = seed ^ (tag * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t seed) { return seed; }

template <typename First, typename... Rest>
uint64_t derive_seed(uint64_t seed, First&& first, Rest&&... rest) {
    return derive_seed(mix_tag(seed, std::forward<First>(first)), std::forward<Rest>(rest)...);
}

class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
    }

    uint64_t next_u64() {
        // xoshiro256**
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 significant bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; 1-u keeps log() away from zero.
        const double u = 1.0 - next_double();
        const double v = next_double();
        const double radius = std::sqrt(-2.0 * std::log(u));
        const double angle = 6.283185307179586 * v;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4]{};
    bool has_spare_{false};
    double spare_{0.0};
};

}  // namespace masters
