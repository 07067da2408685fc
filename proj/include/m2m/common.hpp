#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace m2m {

// Error taxonomy, mapped to process exit codes by the CLI:
// ConfigError -> 2, DataError -> 3, NumericError -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// 64-bit FNV-1a. Used for config hashes and seed derivation; stable across
// platforms and runs, which is what reproducibility rests on.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// String literals would otherwise decay to the void* overload above and
// misread the chain value as a byte count.
inline std::uint64_t fnv1a64(const char* s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(std::string_view(s), h);
}

// splitmix64 finalizer; decorrelates structured inputs before seeding RNGs.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Seed derivation for per-task RNG streams, e.g. hash(seed, track_id, index).
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index = 0) {
    std::uint64_t h = fnv1a64(tag);
    h = fnv1a64(&base, sizeof base, h);
    h = fnv1a64(&index, sizeof index, h);
    return mix64(h);
}

// Deterministic RNG. The engine is the standard-specified mt19937_64; the
// distribution helpers below are fixed algorithms so draws are identical on
// every platform (std::uniform_* distributions are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw NumericError("Rng::next_below: n must be positive");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    int next_int(int lo, int hi) {  // inclusive bounds
        if (hi < lo) throw NumericError("Rng::next_int: empty range");
        return lo + static_cast<int>(next_below(
                        static_cast<std::uint64_t>(hi - lo) + 1));
    }

    double next_real() {  // [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double next_real(double lo, double hi) {
        return lo + (hi - lo) * next_real();
    }

    // Box-Muller; no state carried between calls so draw order is obvious.
    double next_normal() {
        double u1, u2;
        do {
            u1 = next_real();
        } while (u1 <= 0.0);
        u2 = next_real();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// Runs fn(i) for i in [0, n). Results must be written to per-index slots by
// the caller; the schedule never affects output, so any thread count gives
// identical results.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

std::string hex64(std::uint64_t v);

}  // namespace m2m
