#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace sdtl {

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

// Deterministic generator owned explicitly by the caller; there is no global
// RNG state anywhere in the library. Streams for subsystems are derived from
// one root seed via split(), so results are reproducible regardless of the
// order unrelated subsystems consume randomness.
//
// xoshiro-style output from splitmix64 state, Box-Muller normals; all
// sequences depend only on the seed, never on platform library internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0xd1b54a32d192ed03ull) {
        // warm up so nearby seeds diverge immediately
        detail::splitmix64(state_);
        detail::splitmix64(state_);
    }

    // Child stream labeled by subsystem name (and optional index).
    Rng split(std::string_view label, uint64_t index = 0) {
        uint64_t child = state_ ^ detail::fnv1a(label) ^ (0x9e3779b97f4a7c15ull * (index + 1));
        return Rng(child);
    }

    uint64_t next_u64() { return detail::splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // standard normal (Box-Muller, second value cached)
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    template <class Container>
    void fill_normal(Container& c, double scale = 1.0) {
        for (auto& v : c) v = static_cast<typename Container::value_type>(normal() * scale);
    }

    template <class Container>
    void fill_uniform(Container& c, double lo, double hi) {
        for (auto& v : c) v = static_cast<typename Container::value_type>(uniform(lo, hi));
    }

    // Fisher-Yates; spelled out so shuffles do not depend on library internals.
    template <class Vec>
    void shuffle(Vec& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[i], v[j]);
        }
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace sdtl
