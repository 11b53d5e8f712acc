#include "rubricmem/digest.hpp"

#include <array>

namespace rubricmem {

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis) noexcept {
    std::uint64_t h = basis;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64_parts(std::initializer_list<std::string_view> parts) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    bool first = true;
    for (auto part : parts) {
        if (!first) h = fnv1a64("\x1f", h);
        h = fnv1a64(part, h);
        first = false;
    }
    return h;
}

std::string hex_digest(std::uint64_t value) {
    static constexpr std::array<char, 16> digits = {'0', '1', '2', '3', '4', '5', '6', '7',
                                                    '8', '9', 'a', 'b', 'c', 'd', 'e', 'f'};
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[value & 0xf];
        value >>= 4;
    }
    return out;
}

std::uint64_t SplitMix64::below(std::uint64_t n) noexcept {
    // Lemire-style rejection keeps the distribution exact.
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x = (*this)();
    while (x >= limit) x = (*this)();
    return x % n;
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::string_view> tags) noexcept {
    SplitMix64 mix(base ^ fnv1a64_parts(tags));
    mix();
    return mix();
}

}  // namespace rubricmem
