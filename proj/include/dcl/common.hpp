#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dcl {

/// Raised when a training step produces a non-finite loss. The step is
/// rolled back before the exception leaves the net.
class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised on malformed configuration or file input.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Deterministic random stream. All distributions are implemented by hand on
/// top of the raw 64-bit generator so that sequences are identical across
/// standard library versions; simulation reproducibility depends on it.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        // Warm up so that nearby seeds decorrelate.
        s0_ = splitmix64(s);
        s1_ = splitmix64(s);
        if (s0_ == 0 && s1_ == 0) s1_ = 1;
    }

    /// Independent stream keyed by (master seed, tag string, two indices).
    static Rng derive(uint64_t master, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
        uint64_t h = master;
        splitmix64(h);
        for (char c : tag) {
            h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
            splitmix64(h);
        }
        h ^= 0x9e3779b97f4a7c15ull * (a + 1);
        splitmix64(h);
        h ^= 0xc2b2ae3d27d4eb4full * (b + 1);
        uint64_t seed = splitmix64(h);
        return Rng(seed);
    }

    uint64_t next_u64() {
        // xorshift128+
        uint64_t x = s0_;
        const uint64_t y = s1_;
        s0_ = y;
        x ^= x << 23;
        s1_ = x ^ y ^ (x >> 17) ^ (y >> 26);
        return s1_ + y;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    size_t uniform_index(size_t n) { return static_cast<size_t>(uniform() * static_cast<double>(n)); }

    /// Standard normal via Box-Muller (no state carried between calls).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Fisher-Yates shuffle with this stream.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Sample k distinct indices from [0, n), ascending order.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        if (k > n) k = n;
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        return idx;
    }

private:
    uint64_t s0_ = 0;
    uint64_t s1_ = 0;
};

/// Numerically stable softmax of one row; accumulation in double.
template <class Real>
inline void softmax_row(const Real* in, Real* out, size_t n) {
    double mx = -1e300;
    for (size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(in[i]));
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double e = std::exp(static_cast<double>(in[i]) - mx);
        out[i] = static_cast<Real>(e);
        sum += e;
    }
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<Real>(static_cast<double>(out[i]) / sum);
}

inline bool approx_eq(double a, double b, double tol) { return std::abs(a - b) <= tol; }

} // namespace dcl
