#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace toklip {

// Thrown on contract violations (bad shapes, bad config, consumed tape, ...).
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Configuration problems: unknown keys, malformed values, bad CLI usage.
// Maps to exit code 1 in the CLI; everything else maps to 2.
struct ConfigError : ValueError {
    explicit ConfigError(const std::string& msg) : ValueError(msg) {}
};

// Thrown when a numeric guard trips (NaN/Inf escaping an op, checksum failure).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runtime toggle for the per-op finite checks. Defaults to on in debug
// builds, off in release; tests flip it explicitly.
inline bool& finite_checks() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValueError(msg);
}

// FNV-1a, used for parameter hashing and config fingerprints.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace toklip
