#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "toklip/common.hpp"

namespace toklip {

// Deterministic, platform-stable RNG. All randomness in a run flows from a
// single root seed through named sub-streams ("init/teacher", "data/batch",
// "sampling/42", ...), so independent consumers never share state.
//
// Core generator is splitmix64; normal deviates via Box-Muller. No libstdc++
// distributions are used anywhere, so bitstreams are identical across
// standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull) {}

    static Rng substream(uint64_t root_seed, const std::string& name) {
        uint64_t h = fnv1a(name);
        return Rng(root_seed ^ (h + 0x9e3779b97f4a7c15ull + (root_seed << 6) + (root_seed >> 2)));
    }

    Rng derive(const std::string& name) const {
        uint64_t h = fnv1a(name);
        return Rng(state_ ^ (h * 0xbf58476d1ce4e5b9ull));
    }

    Rng derive(uint64_t index) const {
        return Rng(state_ ^ ((index + 1) * 0x94d049bb133111ebull));
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

    float next_float() { return static_cast<float>(next_double()); }

    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Standard normal via Box-Muller (one value per call; pairs cached).
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Fisher-Yates over [0, n), deterministic in the stream.
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; i++) p[i] = i;
        for (int i = n - 1; i > 0; i--) {
            int j = static_cast<int>(next_below(static_cast<uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

  private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace toklip
