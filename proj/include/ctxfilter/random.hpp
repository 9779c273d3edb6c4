#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "ctxfilter/digest.hpp"

namespace ctxfilter {

/// Unbiased draw from [0, bound) by rejection. std::uniform_int_distribution
/// is implementation-defined, so sampled artifacts would differ across
/// standard libraries; this keeps seeded runs reproducible everywhere.
inline std::uint64_t bounded_rand(std::mt19937_64& rng, std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t value = rng();
    while (value >= limit) value = rng();
    return value % bound;
}

/// Stable sub-seed for a named unit of work (conversation, round, variant),
/// independent of iteration order.
inline std::uint64_t derive_seed(std::uint64_t base_seed, std::string_view key) {
    Sha256 h;
    char seed_bytes[8];
    for (int i = 0; i < 8; ++i)
        seed_bytes[i] = static_cast<char>(base_seed >> (8 * i));
    h.update(std::string_view(seed_bytes, 8));
    h.update(key);
    auto digest = h.finish();
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out = (out << 8) | digest[i];
    return out;
}

} // namespace ctxfilter
