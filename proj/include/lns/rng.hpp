#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace lns {

// FNV-1a over arbitrary bytes; also the ParamSet fingerprint primitive.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

// All randomness flows from one user seed through named substreams, so that
// e.g. changing the number of shots cannot perturb dataset generation.
inline uint64_t subseed(uint64_t seed, std::string_view stream) {
    uint64_t h = fnv1a64(stream.data(), stream.size());
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

// Deterministic RNG wrapper. Distribution transforms are hand-pinned
// (std::normal_distribution is implementation-defined), so generated
// datasets are stable across standard libraries, not just across runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return (eng_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        // modulo bias is irrelevant at the n we use (n << 2^64)
        return eng_() % n;
    }

    // standard normal via Box-Muller (no cached spare: keeps state trivial)
    double normal() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace lns
