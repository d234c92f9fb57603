#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace ssmg {

// splitmix64 finalizer; used to derive independent seed streams from a base
// seed plus a stream tag so that every consumer of randomness is decoupled.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
    return mix64(base ^ mix64(tag));
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t tag2) {
    return derive_seed(derive_seed(base, tag), tag2);
}

// String stream tags hash through FNV-1a first.
inline constexpr uint64_t stream_tag(std::string_view name) {
    uint64_t h = 14695981039346656037ull;
    for (char c : name) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    return derive_seed(base, stream_tag(tag));
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t tag2) {
    return derive_seed(derive_seed(base, stream_tag(tag)), tag2);
}

// Seeded PRNG with explicit transforms only. mt19937_64 output is fully
// specified by the standard and Box-Muller is written out by hand, so a given
// seed reproduces the exact same stream everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Multiply-shift; bias is negligible for the small n used here.
        return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    int range(int lo, int hi) {  // inclusive ends
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ssmg
