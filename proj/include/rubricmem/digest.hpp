#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

namespace rubricmem {

/// 64-bit FNV-1a. Stable across platforms; used for cache keys and audit digests.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

/// Hashes each part with a unit separator in between, so ("ab","c") != ("a","bc").
std::uint64_t fnv1a64_parts(std::initializer_list<std::string_view> parts) noexcept;

/// 16 lowercase hex digits.
std::string hex_digest(std::uint64_t value);

inline std::string digest(std::string_view data) { return hex_digest(fnv1a64(data)); }

inline std::string digest_parts(std::initializer_list<std::string_view> parts) {
    return hex_digest(fnv1a64_parts(parts));
}

// SplitMix64: tiny, fully specified generator. Every seeded decision in the
// engine derives a fresh stream from (base seed, tag) so results do not depend
// on call order or thread scheduling.
class SplitMix64 {
  public:
    using result_type = std::uint64_t;

    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    result_type operator()() noexcept {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;

  private:
    std::uint64_t state_;
};

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::string_view> tags) noexcept;

}  // namespace rubricmem
