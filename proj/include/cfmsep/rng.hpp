#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace cfmsep {

// Splittable counter-based generator. Every stochastic call site owns a stream
// derived from (global seed, purpose label, index), so data generation and
// training draws are reproducible and order-independent across call sites.
class RngStream {
public:
    RngStream(uint64_t seed, std::string_view label, uint64_t index = 0) {
        uint64_t h = 1469598103934665603ull;  // FNV-1a over the label
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        state_ = mix(mix(seed + 0x9e3779b97f4a7c15ull) ^ h);
        state_ = mix(state_ ^ (index + 0x2545f4914f6cdd1dull));
    }

    uint64_t u64() {
        state_ += 0x9e3779b97f4a7c15ull;  // splitmix64
        return mix(state_);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int64_t uniform_int(int64_t n) { return static_cast<int64_t>(u64() % static_cast<uint64_t>(n)); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller; u1 in (0, 1] so the log is finite
        double u1 = static_cast<double>((u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    static uint64_t mix(uint64_t x) {
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t state_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace cfmsep
