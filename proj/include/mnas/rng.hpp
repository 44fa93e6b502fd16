#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace mnas {

// splitmix64: used both as the stream generator seeder and as the hash
// combiner for deriving named substreams. Stable across platforms, unlike
// std::seed_seq or libstdc++ distribution internals.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_mix(uint64_t seed, uint64_t value) {
    uint64_t s = seed ^ (value + 0x9e3779b97f4a7c15ULL);
    return splitmix64(s);
}

inline uint64_t hash_str(uint64_t seed, std::string_view s) {
    uint64_t h = seed;
    for (unsigned char c : s) {
        h = hash_mix(h, c);
    }
    return hash_mix(h, s.size());
}

// Deterministic PRNG (xoshiro256**). All randomness in the project flows
// through explicit Rng instances; substreams are derived with hash_mix /
// hash_str so concurrent consumers never share state.
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& word : state_) {
            word = splitmix64(s);
        }
    }

    uint64_t next_u64() {
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

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), n >= 1
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    // Standard normal via Box-Muller; no cached second value so the consumed
    // stream length per call is fixed.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

}  // namespace mnas
