#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace sbd {

/// Deterministic random stream. Distributions are hand-rolled on top of a
/// fixed-algorithm 64-bit generator so that a (seed, stream) pair produces
/// identical draws on every platform and standard library.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {
        // warm up so nearby seeds decorrelate
        next();
        next();
    }

    uint64_t next() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    long long uniform_int(long long lo, long long hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<long long>(next() % span);
    }

    /// Standard normal via Box-Muller (explicit formula, cached pair).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
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
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Derives a named sub-stream seed from a root seed (FNV-1a over the name,
/// mixed with the root and an index). Components that draw from distinct
/// sub-streams cannot perturb each other's sequences.
inline uint64_t substream_seed(uint64_t root, std::string_view name, uint64_t index = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    h ^= root + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h ^= index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull;
    return h ? h : 1;
}

inline RngStream substream(uint64_t root, std::string_view name, uint64_t index = 0) {
    return RngStream(substream_seed(root, name, index));
}

} // namespace sbd
