#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ltwin {

// All randomness in the toolkit flows through these helpers on top of
// std::mt19937_64 so that results do not depend on library-specific
// distribution implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Unbiased integer in [0, n) via rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // Standard normal via Box-Muller (one value per call; the pair's second
    // half is cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Normal(0, sigma^2) truncated to +-3 sigma by rejection.
    double truncated_normal(double sigma) {
        double v;
        do {
            v = normal();
        } while (v < -3.0 || v > 3.0);
        return v * sigma;
    }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Derives independent stream seeds from a base seed (splitmix64 step).
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// FNV-1a over little-endian token ids; used to verify twin batch streams.
inline uint64_t fnv1a_update(uint64_t h, const void * bytes, size_t len) {
    const unsigned char * p = static_cast<const unsigned char *>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}
inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

} // namespace ltwin
